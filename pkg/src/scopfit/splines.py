"""B-spline bases, difference penalties and SCOP reparametrizations.

A shape-constrained smooth is written as ``m(x) = B(x) @ gamma`` where the
spline coefficients are ``gamma = Sigma @ beta_tilde`` and ``beta_tilde``
holds the working coefficients ``beta`` with selected entries exponentiated.
Because the exponentiated entries are positive, the first (or second)
differences of ``gamma`` carry a fixed sign for every real ``beta``, and the
B-spline derivative formula turns that into a shape guarantee on ``m``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "BETA_CLIP",
    "CONSTRAINTS",
    "KnotVector",
    "PenaltyBlock",
    "ScopDescriptor",
    "SmoothDesign",
    "difference_matrix",
    "eval_basis",
    "penalty",
    "place_knots",
    "reparam",
    "reparam_jacobian",
    "scop_sigma",
    "sum_to_zero_basis",
    "univariate_design",
]

#: working coefficients are clipped here before exponentiation
BETA_CLIP = 15.0

CONSTRAINTS = (
    "unconstrained",
    "increasing",
    "decreasing",
    "convex",
    "concave",
    "increasing-by",
    "decreasing-by",
    "convex-by",
    "concave-by",
)


@dataclass(frozen=True)
class KnotVector:
    """Knot sequence of a B-spline basis of dimension ``q`` and given order."""

    knots: np.ndarray
    order: int = 4

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        if knots.ndim != 1:
            raise ValueError("knots must be one-dimensional")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be nondecreasing")
        if self.order < 1:
            raise ValueError("order must be at least 1")
        if knots.size - self.order < self.order:
            raise ValueError("basis dimension must be at least the order")

    @property
    def q(self) -> int:
        return self.knots.size - self.order

    @property
    def domain(self) -> tuple[float, float]:
        """Interval on which the basis is a partition of unity."""
        return float(self.knots[self.order - 1]), float(self.knots[self.q])


def place_knots(x, q: int, order: int = 4) -> KnotVector:
    """Evenly spaced knots over the range of ``x``.

    The ``q - order + 1`` spans cover ``[min(x), max(x)]`` exactly and
    ``order - 1`` extra knots are appended on each side at the same spacing.
    """
    x = np.asarray(x, dtype=float).ravel()
    x = x[np.isfinite(x)]
    if q < order:
        raise ValueError(f"basis dimension q={q} is smaller than order {order}")
    if x.size == 0:
        raise ValueError("empty covariate")
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise ValueError("constant covariate")
    nspan = q - order + 1
    h = (hi - lo) / nspan
    interior = lo + h * np.arange(nspan + 1)
    interior[-1] = hi
    ext = h * np.arange(1, order)
    knots = np.concatenate([lo - ext[::-1], interior, hi + ext])
    return KnotVector(knots, order)


def eval_basis(x, kv: KnotVector, clamp: bool = False) -> np.ndarray:
    """Evaluate the B-spline basis at ``x`` by the Cox-de Boor recursion.

    Points outside the basis domain raise unless ``clamp`` is set, in which
    case they are moved to the nearest end of the domain.
    """
    x = np.asarray(x, dtype=float).ravel()
    t = kv.knots
    k = kv.order
    q = kv.q
    lo, hi = kv.domain
    tol = 1e-10 * (hi - lo)
    outside = (x < lo - tol) | (x > hi + tol)
    if np.any(outside) and not clamp:
        bad = float(x[outside][0])
        raise ValueError(f"x={bad!r} outside the basis range [{lo!r}, {hi!r}]")
    x = np.clip(x, lo, hi)

    nint = t.size - 1
    idx = np.searchsorted(t, x, side="right") - 1
    idx = np.clip(idx, k - 1, q - 1)
    B = np.zeros((x.size, nint))
    B[np.arange(x.size), idx] = 1.0
    for d in range(1, k):
        m = nint - d
        left_den = t[d:d + m] - t[:m]
        right_den = t[d + 1:d + 1 + m] - t[1:1 + m]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (x[:, None] - t[:m]) / left_den, 0.0)
            right = np.where(right_den > 0, (t[d + 1:d + 1 + m] - x[:, None]) / right_den, 0.0)
        B = left * B[:, :m] + right * B[:, 1:m + 1]
    return B[:, :q]


@dataclass(frozen=True)
class ScopDescriptor:
    """Reparametrization ``gamma = sigma @ beta_tilde`` for one coefficient block."""

    constraint: str
    sigma: np.ndarray
    exp_mask: np.ndarray

    @property
    def q(self) -> int:
        return self.sigma.shape[0]

    def satisfied(self, gamma, tol: float = 0.0) -> bool:
        """Check the sufficient difference-sign condition on ``gamma``."""
        g = np.asarray(gamma, dtype=float)
        base = self.constraint.removesuffix("-by")
        if base == "increasing":
            return bool(np.all(np.diff(g) >= -tol))
        if base == "decreasing":
            return bool(np.all(np.diff(g) <= tol))
        if base == "convex":
            return bool(np.all(np.diff(g, 2) >= -tol))
        if base == "concave":
            return bool(np.all(np.diff(g, 2) <= tol))
        return True


def scop_sigma(constraint: str, q: int) -> ScopDescriptor:
    """Sigma matrix and exponentiation mask for a univariate constraint.

    Monotone types keep entry 1 linear and exponentiate the rest; the
    convexity types keep entries 1 and 2 linear (level and initial slope)
    so that curvature is the only restriction.
    """
    if constraint not in CONSTRAINTS:
        raise ValueError(f"unknown constraint {constraint!r}")
    if q < 2:
        raise ValueError("q must be at least 2")
    base = constraint.removesuffix("-by")
    mask = np.ones(q, dtype=bool)
    if base == "unconstrained":
        return ScopDescriptor(constraint, np.eye(q), np.zeros(q, dtype=bool))
    if base in ("increasing", "decreasing"):
        sigma = np.tril(np.ones((q, q)))
        if base == "decreasing":
            sigma[:, 1:] *= -1.0
        mask[0] = False
        return ScopDescriptor(constraint, sigma, mask)
    if q < 3:
        raise ValueError("convexity constraints need q >= 3")
    # gamma_k = beta_1 + (k-1) beta_2 +/- sum_{i=3..k} (k-i+1) exp(beta_i)
    i = np.arange(q)
    sigma = np.maximum(i[:, None] - i[None, :] + 1, 0).astype(float)
    sigma[:, 0] = 1.0
    sigma[:, 1] = i
    if base == "concave":
        sigma[:, 2:] *= -1.0
    mask[:2] = False
    return ScopDescriptor(constraint, sigma, mask)


def _exp_factors(beta, exp_mask) -> tuple[np.ndarray, bool]:
    beta = np.asarray(beta, dtype=float)
    exp_mask = np.asarray(exp_mask, dtype=bool)
    clipped = bool(np.any(beta[exp_mask] > BETA_CLIP))
    m = np.ones_like(beta)
    m[exp_mask] = np.exp(np.minimum(beta[exp_mask], BETA_CLIP))
    return m, clipped


def reparam(beta, d: ScopDescriptor) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(beta_tilde, gamma)`` for working coefficients ``beta``."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (d.q,):
        raise ValueError(f"expected {d.q} coefficients, got {beta.shape}")
    m, _ = _exp_factors(beta, d.exp_mask)
    beta_tilde = np.where(d.exp_mask, m, beta)
    return beta_tilde, d.sigma @ beta_tilde


def reparam_jacobian(beta, d: ScopDescriptor) -> np.ndarray:
    """d gamma / d beta = sigma @ diag(m), with m = exp(beta) on exponentiated entries."""
    m, _ = _exp_factors(beta, d.exp_mask)
    return d.sigma * m[None, :]


def difference_matrix(q: int, order: int = 1) -> np.ndarray:
    """``(q - order) x q`` matrix of ``order``-th differences (empty if q <= order)."""
    if q <= order:
        return np.zeros((0, q))
    return np.diff(np.eye(q), n=order, axis=0)


@dataclass(frozen=True)
class PenaltyBlock:
    """Quadratic penalty on a contiguous block of model coefficients."""

    matrix: np.ndarray
    offset: int = 0
    term_id: int = 0

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def embed(self, p: int) -> np.ndarray:
        S = np.zeros((p, p))
        sl = slice(self.offset, self.offset + self.size)
        S[sl, sl] = self.matrix
        return S


def _scop_penalty_matrix(q: int, exp_mask: np.ndarray, constrained: bool) -> np.ndarray:
    if not constrained:
        D = difference_matrix(q, 2)
        return D.T @ D
    idx = np.flatnonzero(exp_mask)
    D = np.zeros((max(idx.size - 1, 0), q))
    for r in range(idx.size - 1):
        D[r, idx[r]] = -1.0
        D[r, idx[r + 1]] = 1.0
    return D.T @ D


def penalty(q: int, constraint: str = "unconstrained", offset: int = 0, term_id: int = 0) -> PenaltyBlock:
    """Difference penalty acting on the working coefficients.

    Shape-constrained types use first differences over the exponentiated
    entries, so a flat ``beta`` maps to equally spaced ``gamma`` (a straight
    line).  The unconstrained P-spline uses second differences.
    """
    if q < 3:
        raise ValueError("penalty needs q >= 3")
    d = scop_sigma(constraint, q)
    S = _scop_penalty_matrix(q, d.exp_mask, constraint != "unconstrained")
    return PenaltyBlock(S, offset, term_id)


def sum_to_zero_basis(C) -> np.ndarray:
    """Orthonormal basis ``Z`` (q x (q-r)) of the null space of constraint rows ``C``."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    r = C.shape[0]
    Q, _ = np.linalg.qr(C.T, mode="complete")
    return Q[:, r:]


@dataclass(frozen=True)
class SmoothDesign:
    """Everything needed to turn a raw basis into model-matrix columns.

    Model columns are ``raw @ sigma @ absorb - center``.  ``absorb`` removes
    the directions fixed by identifiability constraints and only mixes
    linear (non-exponentiated) coefficients, so the reduced working
    coefficients reparametrize exactly like the full ones.
    """

    constraint: str
    sigma: np.ndarray
    absorb: np.ndarray
    center: np.ndarray
    exp_mask: np.ndarray
    penalties: tuple[np.ndarray, ...]
    knots: tuple[KnotVector, ...] = ()
    grid: tuple[int, ...] = ()
    constraints: tuple[str, ...] = ()
    matrix: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def transform(self) -> np.ndarray:
        return self.sigma @ self.absorb

    @property
    def width(self) -> int:
        return self.absorb.shape[1]

    def columns(self, raw: np.ndarray) -> np.ndarray:
        return raw @ self.transform - self.center

    def gamma(self, beta_tilde) -> np.ndarray:
        """Full spline coefficients for reduced ``beta_tilde``."""
        return self.transform @ np.asarray(beta_tilde, dtype=float)

    def shape_ok(self, beta_tilde, tol: float = 1e-10) -> bool:
        """Check the sign conditions of the (possibly tensor) coefficient grid."""
        g = self.gamma(beta_tilde)
        if not self.constraints:
            return True
        if len(self.grid) == 1:
            return ScopDescriptor(self.constraints[0], self.sigma, self.exp_mask).satisfied(g, tol)
        G = g.reshape(self.grid)
        for axis, c in enumerate(self.constraints):
            if c == "increasing" and np.any(np.diff(G, axis=axis) < -tol):
                return False
            if c == "decreasing" and np.any(np.diff(G, axis=axis) > tol):
                return False
        return True


def _selection(q: int, keep) -> np.ndarray:
    keep = np.asarray(keep)
    E = np.zeros((q, keep.size))
    E[keep, np.arange(keep.size)] = 1.0
    return E


def univariate_design(x, q: int, constraint: str = "unconstrained", order: int = 4,
                      identifiable: bool = True, raw: np.ndarray | None = None) -> SmoothDesign:
    """Set up a univariate smooth of covariate ``x``.

    With ``identifiable`` the constant is removed from the span: the
    unconstrained P-spline gets a sum-to-zero reparametrization, a SCOP
    smooth drops its linear level coefficient (whose column of ``B @ sigma``
    is the constant function).  Columns are then centered.  By-variable and
    functional terms pass ``identifiable=False`` and a precomputed ``raw``.
    """
    kv = place_knots(x, q, order)
    if raw is None:
        raw = eval_basis(x, kv)
    d = scop_sigma(constraint, q)
    S = _scop_penalty_matrix(q, d.exp_mask, constraint.removesuffix("-by") != "unconstrained")
    base = constraint.removesuffix("-by")
    if identifiable and base == "unconstrained":
        absorb = sum_to_zero_basis(raw.sum(axis=0))
        exp_mask = np.zeros(q - 1, dtype=bool)
    elif identifiable:
        absorb = _selection(q, np.arange(1, q))
        exp_mask = d.exp_mask[1:]
    else:
        absorb = np.eye(q)
        exp_mask = d.exp_mask.copy()
    cols = raw @ d.sigma @ absorb
    center = cols.mean(axis=0) if identifiable else np.zeros(absorb.shape[1])
    pen = absorb.T @ S @ absorb
    pen = 0.5 * (pen + pen.T)
    constraints = () if base == "unconstrained" else (base,)
    return SmoothDesign(constraint, d.sigma, absorb, center, exp_mask, (pen,), (kv,),
                        (q,), constraints, cols - center)


def null_space_dim(S, tol: float = 1e-9) -> int:
    """Dimension of the null space of a symmetric PSD matrix."""
    S = np.atleast_2d(S)
    if S.size == 0:
        return 0
    ev = scipy.linalg.eigvalsh(S)
    scale = max(1.0, float(np.max(np.abs(ev))))
    return int(np.sum(ev <= tol * scale))
