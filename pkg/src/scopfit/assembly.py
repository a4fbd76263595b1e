"""Model-matrix assembly.

Terms are laid out column-wise as ``X = [A : F : M]`` (parametric, then
unconstrained smooths, then shape-constrained ones in formula order within
each group) and the linear predictor is ``X @ beta_tilde``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DataTable, Factor
from .formula import BS_CODES, ModelSpec, TermSpec, validate
from .splines import (
    BETA_CLIP,
    KnotVector,
    PenaltyBlock,
    ScopDescriptor,
    SmoothDesign,
    eval_basis,
    null_space_dim,
    place_knots,
    univariate_design,
)
from .tensor import double_monotone, tensor_raw, ti_interaction

__all__ = [
    "AssembledModel",
    "TermDesign",
    "build",
    "functional_term",
    "random_effect_term",
    "trapezoid_weights",
    "varying_coefficient_term",
]

log = logging.getLogger(__name__)


def trapezoid_weights(t) -> np.ndarray:
    """Per-row trapezoid weights for sample points ``t`` (n x J, rows nondecreasing)."""
    t = np.atleast_2d(np.asarray(t, dtype=float))
    if t.shape[1] < 2:
        raise ValueError("each curve needs at least 2 points")
    dt = np.diff(t, axis=1)
    if np.any(dt < 0):
        raise ValueError("observation points must be nondecreasing within each row")
    w = np.zeros_like(t)
    w[:, :-1] += dt / 2.0
    w[:, 1:] += dt / 2.0
    return w


def functional_term(X_obs, Z, kv: KnotVector, d: ScopDescriptor | None = None,
                    clamp: bool = False) -> np.ndarray:
    """Model matrix of the linear functional ``integral m(t) z_i(t) dt``.

    Entry ``(i, j)`` approximates ``integral b_j(t) z_i(t) dt`` by the
    trapezoid rule over row ``i``'s points; with a descriptor the columns are
    mapped through ``sigma`` so they multiply ``beta_tilde``.
    """
    X_obs = np.atleast_2d(np.asarray(X_obs, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if X_obs.shape != Z.shape:
        raise ValueError(f"matrix shape mismatch: {X_obs.shape} vs {Z.shape}")
    w = trapezoid_weights(X_obs)
    n, J = X_obs.shape
    B = eval_basis(X_obs.ravel(), kv, clamp).reshape(n, J, kv.q)
    L = np.einsum("ij,ijk->ik", w * Z, B)
    return L if d is None else L @ d.sigma


def random_effect_term(factor) -> tuple[np.ndarray, np.ndarray]:
    """Indicator matrix (one column per level) and its identity ridge penalty."""
    if not isinstance(factor, Factor):
        factor = Factor.from_values(factor)
    L = len(factor.levels)
    if L < 2:
        raise ValueError("random effect factor needs at least 2 levels")
    U = np.zeros((len(factor), L))
    ok = factor.codes >= 0
    U[np.flatnonzero(ok), factor.codes[ok]] = 1.0
    return U, np.eye(L)


def varying_coefficient_term(smooth, z) -> np.ndarray:
    """Scale each row of a smooth's basis matrix by the by-variable."""
    smooth = np.asarray(smooth, dtype=float)
    z = np.asarray(z, dtype=float).ravel()
    if z.size != smooth.shape[0]:
        raise ValueError("by-variable length does not match the basis")
    return smooth * z[:, None]


def _factor_dummies(f: Factor, levels) -> np.ndarray:
    lookup = {lv: i for i, lv in enumerate(levels)}
    codes = np.array([lookup.get(v, -2) if v is not None else -1 for v in f.values])
    if np.any(codes == -2):
        bad = [v for v, c in zip(f.values, codes) if c == -2][0]
        raise ValueError(f"factor level {bad!r} not seen in training data")
    D = np.zeros((len(f), len(levels) - 1))
    rows = np.flatnonzero(codes >= 1)
    D[rows, codes[rows] - 1] = 1.0
    return D


@dataclass
class TermDesign:
    """One model term: its data bindings plus a :class:`SmoothDesign`."""

    label: str
    kind: str
    covariates: tuple[str, ...]
    design: SmoothDesign
    bs: str | None = None
    by: str | None = None
    levels: tuple[str, ...] = ()
    raw_names: tuple[str, ...] = ()

    @property
    def width(self) -> int:
        return self.design.width

    @property
    def is_scop(self) -> bool:
        return bool(np.any(self.design.exp_mask))

    @property
    def penalties(self) -> tuple[np.ndarray, ...]:
        return self.design.penalties

    def null_space_dim(self) -> int:
        if not self.penalties:
            return self.width
        return null_space_dim(sum(self.penalties))

    def raw_basis(self, data: DataTable, clamp: bool = False) -> np.ndarray:
        n = data.n
        if self.kind == "intercept":
            return np.ones((n, 1))
        if self.kind == "parametric":
            col = data[self.covariates[0]]
            if isinstance(col, Factor):
                return _factor_dummies(col, self.levels)
            return np.asarray(col, dtype=float)[:, None]
        if self.kind == "random_effect":
            col = data[self.covariates[0]]
            if not isinstance(col, Factor):
                col = Factor.from_values(col)
            f = Factor.from_values(col.values, self.levels)
            U = np.zeros((n, len(self.levels)))
            ok = f.codes >= 0
            U[np.flatnonzero(ok), f.codes[ok]] = 1.0
            return U
        kn = self.design.knots
        if self.kind == "tensor":
            return tensor_raw(data[self.covariates[0]], data[self.covariates[1]], kn, clamp)
        x = data[self.covariates[0]]
        if self.kind == "functional":
            z = data[self.by]
            if np.ndim(x) == 2:
                return functional_term(x, z, kn[0], clamp=clamp)
            return varying_coefficient_term(eval_basis(x, kn[0], clamp), z)
        return eval_basis(x, kn[0], clamp)

    def model_matrix(self, data: DataTable, clamp: bool = False) -> np.ndarray:
        return self.design.columns(self.raw_basis(data, clamp))

    def covariate_range_ok(self, data: DataTable) -> bool:
        for kv, name in zip(self.design.knots, self.covariates):
            lo, hi = kv.domain
            x = np.asarray(data[name], dtype=float)
            tol = 1e-10 * (hi - lo)
            if np.any(x < lo - tol) or np.any(x > hi + tol):
                return False
        return True


@dataclass
class AssembledModel:
    X: np.ndarray
    terms: list[TermDesign]
    term_index: list[slice]
    penalties: list[PenaltyBlock]
    exp_mask: np.ndarray
    y: np.ndarray | None = None
    weights: np.ndarray | None = None
    spec: ModelSpec | None = None
    n_dropped: int = 0
    rows: np.ndarray | None = None
    term_of_penalty: list[int] = field(default_factory=list)

    @classmethod
    def from_matrices(cls, X, penalties=(), exp_mask=None, y=None, blocks=None) -> "AssembledModel":
        """Wrap a raw model matrix; ``penalties`` are full p x p matrices."""
        X = np.asarray(X, dtype=float)
        p = X.shape[1]
        mask = np.zeros(p, dtype=bool) if exp_mask is None else np.asarray(exp_mask, dtype=bool)
        pens = [PenaltyBlock(np.asarray(S, dtype=float), 0, 0) for S in penalties]
        design = SmoothDesign("unconstrained", np.eye(p), np.eye(p), np.zeros(p), mask,
                              tuple(np.asarray(S, dtype=float) for S in penalties))
        term = TermDesign("X", "matrix", (), design)
        return cls(X, [term], [slice(0, p)], pens, mask,
                   None if y is None else np.asarray(y, dtype=float),
                   term_of_penalty=[0] * len(pens))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def intercept(self) -> bool:
        return any(t.kind == "intercept" for t in self.terms)

    @property
    def scop_map(self) -> dict:
        return {
            "exp_mask": self.exp_mask,
            "blocks": {t.label: (s, t.design.sigma) for t, s in zip(self.terms, self.term_index)
                       if t.is_scop},
        }

    def penalty_matrices(self) -> list[np.ndarray]:
        return [pb.embed(self.p) for pb in self.penalties]

    def S_lambda(self, lam) -> np.ndarray:
        S = np.zeros((self.p, self.p))
        for pb, l in zip(self.penalties, np.atleast_1d(lam)):
            sl = slice(pb.offset, pb.offset + pb.size)
            S[sl, sl] += l * pb.matrix
        return S

    def penalty_roots(self) -> list[np.ndarray]:
        """Matrices ``R_j`` with ``R_j' R_j = S^j`` (computed once)."""
        roots = self.__dict__.get("_roots")
        if roots is None:
            roots = []
            for pb in self.penalties:
                w, U = np.linalg.eigh(0.5 * (pb.matrix + pb.matrix.T))
                keep = w > max(w.max(), 0.0) * 1e-13
                roots.append(np.sqrt(w[keep])[:, None] * U[:, keep].T)
            self.__dict__["_roots"] = roots
        return roots

    def penalty(self, beta, lam) -> tuple[float, np.ndarray]:
        """``beta' S_lambda beta`` and ``S_lambda beta`` as sums of squares (no cancellation)."""
        beta = np.asarray(beta, dtype=float)
        val = 0.0
        grad = np.zeros(self.p)
        for pb, R, l in zip(self.penalties, self.penalty_roots(), np.atleast_1d(lam)):
            sl = slice(pb.offset, pb.offset + pb.size)
            r = R @ beta[sl]
            val += l * float(r @ r)
            grad[sl] += l * (R.T @ r)
        return val, grad

    def exp_factors(self, beta) -> np.ndarray:
        m = np.ones(self.p)
        b = np.asarray(beta, dtype=float)[self.exp_mask]
        m[self.exp_mask] = np.exp(np.minimum(b, BETA_CLIP))
        return m

    def beta_tilde(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        return np.where(self.exp_mask, self.exp_factors(beta), beta)

    def with_data(self, X=None, y=None) -> "AssembledModel":
        return replace(self, X=self.X if X is None else X, y=self.y if y is None else y)

    def term_contributions(self, beta, X=None) -> np.ndarray:
        X = self.X if X is None else X
        bt = self.beta_tilde(beta)
        return np.column_stack([X[:, s] @ bt[s] for s in self.term_index])

    def shape_ok(self, beta, tol: float = 1e-10) -> bool:
        bt = self.beta_tilde(beta)
        return all(t.design.shape_ok(bt[s], tol) for t, s in zip(self.terms, self.term_index))

    def model_matrix(self, data: DataTable, clamp: bool = False) -> np.ndarray:
        return np.column_stack([t.model_matrix(data, clamp) for t in self.terms])


def _parametric_design(width: int, keep) -> SmoothDesign:
    keep = np.asarray(keep, dtype=int)
    absorb = np.zeros((width, keep.size))
    absorb[keep, np.arange(keep.size)] = 1.0
    return SmoothDesign("parametric", np.eye(width), absorb, np.zeros(keep.size),
                        np.zeros(keep.size, dtype=bool), ())


def _smooth_term(t: TermSpec, data: DataTable) -> TermDesign:
    kind, constraint = BS_CODES[t.bs]
    if t.kind == "random_effect":
        col = data[t.covariates[0]]
        U, P = random_effect_term(col)
        design = SmoothDesign("random_effect", np.eye(U.shape[1]), np.eye(U.shape[1]),
                              np.zeros(U.shape[1]), np.zeros(U.shape[1], dtype=bool), (P,),
                              matrix=U)
        return TermDesign(t.label, "random_effect", t.covariates, design, t.bs, None, col.levels)
    if t.kind == "tensor":
        x1, x2 = (data[c] for c in t.covariates)
        if constraint in ("none", "increasing-first", "decreasing-first"):
            design = ti_interaction(x1, x2, t.k, t.k, constraint)
        else:
            design = double_monotone(x1, x2, t.k, t.k, tuple(constraint.split("/")))
        return TermDesign(t.label, "tensor", t.covariates, design, t.bs)
    x = data[t.covariates[0]]
    if t.kind == "functional":
        z = data[t.by]
        by_constraint = constraint if constraint.endswith("-by") or constraint == "unconstrained" \
            else f"{constraint}-by"
        if np.ndim(x) == 2:
            kv = place_knots(x.ravel(), t.k)
            raw = functional_term(x, z, kv)
            design = univariate_design(x.ravel(), t.k, by_constraint, identifiable=False, raw=raw)
        else:
            kv = place_knots(x, t.k)
            raw = varying_coefficient_term(eval_basis(x, kv), z)
            design = univariate_design(x, t.k, by_constraint, identifiable=False, raw=raw)
        return TermDesign(t.label, "functional", t.covariates, design, t.bs, t.by)
    design = univariate_design(x, t.k, constraint)
    return TermDesign(t.label, "smooth", t.covariates, design, t.bs)


def _independent_columns(A: np.ndarray, tol: float = 1e-9) -> list[int]:
    """Indices of columns kept by a left-to-right rank-revealing scan."""
    keep: list[int] = []
    Q = np.zeros((A.shape[0], 0))
    for j in range(A.shape[1]):
        v = A[:, j]
        nv = np.linalg.norm(v)
        if nv == 0:
            continue
        r = v - Q @ (Q.T @ v)
        r = r - Q @ (Q.T @ r)
        if np.linalg.norm(r) > tol * nv:
            keep.append(j)
            Q = np.column_stack([Q, r / np.linalg.norm(r)])
    return keep


def build(spec: ModelSpec, data: DataTable, weights=None) -> AssembledModel:
    """Assemble model matrix, penalties and coefficient map for ``spec``.

    Rows with a missing value in any used column are dropped (the count is
    logged and stored as ``n_dropped``).
    """
    if data.n == 0:
        raise ValueError("empty data")
    spec = validate(spec, data.schema())
    used = [spec.response]
    for t in spec.terms:
        used.extend(t.covariates)
        if t.by:
            used.append(t.by)
    miss = np.zeros(data.n, dtype=bool)
    for name in dict.fromkeys(used):
        miss |= data.missing(name)
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        miss |= ~np.isfinite(weights)
    rows = np.flatnonzero(~miss)
    n_dropped = int(miss.sum())
    if n_dropped:
        log.info("dropped %d rows with missing values", n_dropped)
    if rows.size == 0:
        raise ValueError("empty data after removing incomplete rows")
    data = data.take(rows) if n_dropped else data
    y = np.asarray(data[spec.response], dtype=float)
    w = np.ones(rows.size) if weights is None else weights[rows]

    parametric: list[TermDesign] = []
    free: list[TermDesign] = []
    scop: list[TermDesign] = []
    if spec.intercept:
        parametric.append(TermDesign("(Intercept)", "intercept", (), _parametric_design(1, [0])))
    for t in spec.terms:
        if t.kind == "parametric":
            col = data[t.covariates[0]]
            if isinstance(col, Factor):
                levels = tuple(lv for i, lv in enumerate(col.levels) if np.any(col.codes == i))
                names = tuple(f"{t.covariates[0]}{lv}" for lv in levels[1:])
                td = TermDesign(t.label, "parametric", t.covariates,
                                _parametric_design(len(levels) - 1, range(len(levels) - 1)),
                                levels=levels, raw_names=names)
            else:
                td = TermDesign(t.label, "parametric", t.covariates, _parametric_design(1, [0]),
                                raw_names=(t.covariates[0],))
            parametric.append(td)
            continue
        td = _smooth_term(t, data)
        (scop if td.is_scop else free).append(td)

    # rank check of the parametric block, dropping dependent columns left to right
    raws = [td.raw_basis(data) for td in parametric]
    A = np.column_stack(raws) if raws else np.zeros((rows.size, 0))
    keep = set(_independent_columns(A))
    start = 0
    kept_terms = []
    for td, R in zip(parametric, raws):
        local = [j for j in range(R.shape[1]) if start + j in keep]
        if len(local) < R.shape[1]:
            warnings.warn(f"parametric term {td.label!r} is rank deficient; dropping "
                          f"{R.shape[1] - len(local)} column(s)", stacklevel=2)
        start += R.shape[1]
        if local:
            td.design = _parametric_design(R.shape[1], local)
            kept_terms.append(td)
    terms = kept_terms + free + scop

    blocks, index, pens, pen_term, masks = [], [], [], [], []
    off = 0
    for ti, td in enumerate(terms):
        M = td.model_matrix(data)
        blocks.append(M)
        index.append(slice(off, off + M.shape[1]))
        masks.append(td.design.exp_mask)
        for S in td.penalties:
            pens.append(PenaltyBlock(S, off, ti))
            pen_term.append(ti)
        off += M.shape[1]
    X = np.column_stack(blocks)
    return AssembledModel(X, terms, index, pens, np.concatenate(masks), y, w, spec,
                          n_dropped, rows, pen_term)
