"""Penalized full-Newton estimation at fixed smoothing parameters.

The objective minimized over working coefficients ``beta`` is
``D(beta) / 2 + beta' S_lambda beta / 2`` where ``D`` is the deviance of
``eta = X beta_tilde(beta)``.  Derivatives go through the exponentiated
entries by the chain rule, so the Hessian carries an extra diagonal term
for those entries and need not be positive definite away from the optimum.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .assembly import AssembledModel
from .data import DataTable
from .family import Family, get_family
from .splines import BETA_CLIP

__all__ = [
    "FitResult",
    "Evaluation",
    "effective_df",
    "evaluate",
    "model_matrix",
    "newton_fit",
    "predict",
    "predict_from",
    "scale_estimate",
]

log = logging.getLogger(__name__)

MAX_ITER = 200
MAX_HALVINGS = 30
OBJ_TOL = 1e-8
GRAD_TOL = 1e-6


@dataclass
class Evaluation:
    """Objective, gradient and Hessian pieces at one ``beta``."""

    beta: np.ndarray
    beta_tilde: np.ndarray
    m: np.ndarray          # d beta_tilde / d beta (diagonal)
    eta: np.ndarray
    mu: np.ndarray
    a: np.ndarray          # dl/deta per observation, times prior weight
    b: np.ndarray          # -d2l/deta2 per observation, times prior weight
    deviance: float
    objective: float
    grad: np.ndarray
    Xt: np.ndarray         # X diag(m)

    def hessian_unpenalized(self, exp_mask) -> np.ndarray:
        H = self.Xt.T @ (self.b[:, None] * self.Xt)
        H[np.diag_indices_from(H)] -= np.where(exp_mask, self.Xt.T @ self.a, 0.0)
        return H


def _derivative_factors(beta, exp_mask):
    bt = np.asarray(beta, dtype=float).copy()
    m = np.ones_like(bt)
    e = bt[exp_mask]
    ex = np.exp(np.minimum(e, BETA_CLIP))
    bt[exp_mask] = ex
    m[exp_mask] = np.where(e < BETA_CLIP, ex, 0.0)
    return bt, m


def evaluate(am: AssembledModel, y, family: Family, lam, beta, weights=None,
             X=None) -> Evaluation | None:
    """Penalized objective and gradient; ``None`` when ``eta`` leaves the mean space."""
    X = am.X if X is None else X
    w = np.ones(X.shape[0]) if weights is None else weights
    bt, m = _derivative_factors(beta, am.exp_mask)
    eta = X @ bt
    mu, a, b = family.newton_weights(y, eta)
    if not (np.all(np.isfinite(eta)) and family.valid_mu(mu)):
        return None
    D = family.deviance(y, mu, w)
    if not np.isfinite(D):
        return None
    pen, Sb = am.penalty(beta, lam)
    Xt = X * m
    wa = w * a
    g = -Xt.T @ wa + Sb
    obj = 0.5 * D + 0.5 * pen
    return Evaluation(np.asarray(beta, dtype=float), bt, m, eta, mu, wa, w * b, D, obj, g, Xt)


def _factor(H: np.ndarray):
    """Cholesky of ``H``, adding ``eps * I`` with ``eps`` escalating x10 if needed."""
    scale = max(1.0, float(np.max(np.abs(np.diag(H))))) if H.size else 1.0
    eps = 0.0
    while True:
        try:
            c = linalg.cho_factor(H + eps * scale * np.eye(H.shape[0]), lower=True)
            return c, eps
        except linalg.LinAlgError:
            eps = 1e-10 if eps == 0.0 else eps * 10.0
            if eps > 1e10:
                raise


@dataclass
class FitResult:
    beta: np.ndarray
    beta_tilde: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    deviance: float
    objective: float
    edf: float
    edf_terms: np.ndarray
    scale: float
    H_u: np.ndarray
    H_p: np.ndarray
    H_p_inv: np.ndarray
    lam: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    family: Family
    weights: np.ndarray
    y: np.ndarray
    constraints_ok: bool = True
    regularized: bool = False
    edf_ok: bool = True
    trace: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def cov(self) -> np.ndarray:
        """Coefficient covariance of working ``beta``: ``scale * H_p^-1``."""
        return self.scale * self.H_p_inv


def effective_df(H_u: np.ndarray, H_p_inv: np.ndarray, term_index=None):
    """``tr(H_p^-1 H_u)``; with ``term_index`` also the per-term partial traces."""
    F = H_p_inv @ H_u
    d = np.diag(F)
    if term_index is None:
        return float(d.sum())
    return float(d.sum()), np.array([d[s].sum() for s in term_index])


def edf_in_range(edf: float, edf_terms, term_index, tol: float = 0.01) -> bool:
    """Whether every per-term trace lies in ``[0, width]`` up to ``tol``.

    A nearly singular penalized Hessian with an indefinite ``H_u`` can push
    the trace far outside this range, where it no longer measures complexity.
    """
    widths = np.array([s.stop - s.start for s in term_index])
    p = widths.sum()
    return bool(np.isfinite(edf) and -tol <= edf <= p + tol
                and np.all(edf_terms >= -tol) and np.all(edf_terms <= widths + tol))


def scale_estimate(family: Family, y, mu, edf: float, weights=None) -> float:
    """Pearson estimate ``sum w (y - mu)^2 / V(mu) / (n - edf)``; 1 for known-scale families."""
    if family.scale_known:
        return 1.0
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if weights is None else weights
    n = np.sum(w > 0)
    if n <= edf:
        raise ValueError(f"n={n} does not exceed edf={edf:.3f}")
    mu_c, _ = family.clamp_mu(mu)
    return float(np.sum(w * (y - mu) ** 2 / family.variance(mu_c)) / (n - edf))


def initial_beta(am: AssembledModel, y, family: Family, lam, weights=None, X=None) -> np.ndarray:
    """Exponentiated entries at 0; linear ones from a penalized LS step on ``g(y)``."""
    X = am.X if X is None else X
    w = np.ones(X.shape[0]) if weights is None else weights
    beta = np.zeros(X.shape[1])
    lin = ~am.exp_mask
    if not np.any(lin):
        return beta
    z = family.link.link(family.initial_mu(y))
    z = np.where(np.isfinite(z), z, 0.0)
    offset = X[:, am.exp_mask] @ np.ones(int(am.exp_mask.sum()))
    XL = X[:, lin]
    S = am.S_lambda(lam)[np.ix_(lin, lin)]
    A = XL.T @ (w[:, None] * XL) + S
    A[np.diag_indices_from(A)] += 1e-10 * max(1.0, float(np.max(np.abs(np.diag(A)))))
    beta[lin] = linalg.solve(A, XL.T @ (w * (z - offset)), assume_a="sym")
    return beta


def _grad_floor(S, beta) -> float:
    """Round-off bound on the penalty gradient; large lambda hides smaller gradients."""
    if not beta.size:
        return 0.0
    return 10.0 * beta.size * np.finfo(float).eps * float(np.max(np.abs(S) @ np.abs(beta)))


def newton_fit(am: AssembledModel, y=None, family="gaussian", lam=None, beta0=None,
               weights=None, X=None, max_iter: int = MAX_ITER) -> FitResult:
    """Minimize the penalized deviance by full Newton with step halving."""
    family = get_family(family)
    y = am.y if y is None else np.asarray(y, dtype=float)
    X = am.X if X is None else X
    w = (am.weights if am.weights is not None and am.weights.size == X.shape[0]
         else np.ones(X.shape[0])) if weights is None else np.asarray(weights, dtype=float)
    lam = np.zeros(len(am.penalties)) if lam is None else np.atleast_1d(np.asarray(lam, float))
    if lam.size != len(am.penalties):
        raise ValueError(f"expected {len(am.penalties)} smoothing parameters, got {lam.size}")
    if np.any(lam < 0):
        raise ValueError("smoothing parameters must be nonnegative")
    S = am.S_lambda(lam)

    beta = initial_beta(am, y, family, lam, w, X) if beta0 is None else np.array(beta0, float)
    ev = evaluate(am, y, family, lam, beta, w, X)
    if ev is None:
        beta = np.zeros(X.shape[1])
        ev = evaluate(am, y, family, lam, beta, w, X)
        if ev is None:
            raise FloatingPointError("no valid starting point for the linear predictor")
    trace = [ev.objective]
    converged = False
    regularized = False
    it = 0
    for it in range(1, max_iter + 1):
        H = ev.hessian_unpenalized(am.exp_mask) + S
        c, eps = _factor(H)
        regularized |= eps > 0
        step = -linalg.cho_solve(c, ev.grad)
        new = None
        alpha = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = evaluate(am, y, family, lam, ev.beta + alpha * step, w, X)
            if cand is not None and cand.objective <= ev.objective:
                new = cand
                break
            alpha *= 0.5
        gmax = float(np.max(np.abs(ev.grad))) if ev.grad.size else 0.0
        if new is None:
            # no decrease possible at working precision
            converged = gmax < GRAD_TOL * max(1.0, abs(ev.objective)) + _grad_floor(S, ev.beta)
            break
        dobj = ev.objective - new.objective
        ev = new
        trace.append(ev.objective)
        gmax = float(np.max(np.abs(ev.grad))) if ev.grad.size else 0.0
        if dobj < OBJ_TOL * (abs(ev.objective) + OBJ_TOL):
            floor = _grad_floor(S, ev.beta)
            if gmax < GRAD_TOL + floor:
                converged = True
                break
            if dobj <= 1e-15 * abs(ev.objective):
                # stalled at working precision; accept a gradient small relative to the objective
                converged = gmax < GRAD_TOL * max(1.0, abs(ev.objective)) + floor
                break
    if not converged:
        log.warning("Newton iteration did not converge after %d iterations", it)
    return _finish(am, ev, family, lam, S, y, w, converged, it, trace, regularized)


def _finish(am, ev: Evaluation, family, lam, S, y, w, converged, it, trace, regularized):
    H_u = ev.hessian_unpenalized(am.exp_mask)
    H_p = H_u + S
    c, eps = _factor(H_p)
    regularized |= eps > 0
    H_p_inv = linalg.cho_solve(c, np.eye(H_p.shape[0]))
    H_p_inv = 0.5 * (H_p_inv + H_p_inv.T)
    edf, edf_terms = effective_df(H_u, H_p_inv, am.term_index)
    scale = scale_estimate(family, y, ev.mu, edf, w) if np.sum(w > 0) > edf else float("nan")
    res = FitResult(ev.beta, ev.beta_tilde, ev.eta, ev.mu, ev.deviance, ev.objective, edf,
                    edf_terms, scale, H_u, H_p, H_p_inv, lam, converged, it,
                    float(np.max(np.abs(ev.grad))) if ev.grad.size else 0.0, family, w, y,
                    regularized=regularized, trace=trace)
    res.edf_ok = edf_in_range(edf, edf_terms, am.term_index)
    res.constraints_ok = am.shape_ok(ev.beta)
    if not res.constraints_ok:
        raise AssertionError("fitted coefficients violate a shape constraint")
    return res


def predict(am: AssembledModel, fit: FitResult, data: DataTable | None = None,
            type: str = "link", se: bool = False, extrapolate: bool = False):
    """Predictions (and delta-method standard errors) for ``data``.

    ``type`` is ``link``, ``response`` or ``terms``; ``terms`` returns an
    ``n x n_terms`` array (intercept included as its own column).
    """
    Xn = am.X if data is None else None
    return predict_from(am.terms, am.term_index, am.exp_mask, fit.beta, fit.cov, fit.family,
                        data, type, se, extrapolate, Xn)


def model_matrix(terms, data: DataTable, extrapolate: bool = False) -> np.ndarray:
    if not extrapolate:
        for t in terms:
            if not t.covariate_range_ok(data):
                raise ValueError(f"covariate of term {t.label!r} outside the training range "
                                 "(use extrapolate to allow)")
    return np.column_stack([t.model_matrix(data, clamp=extrapolate) for t in terms])


def _quad_se(J, C) -> np.ndarray:
    return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", J, C, J), 0.0))


def predict_from(terms, term_index, exp_mask, beta, cov, family: Family, data=None,
                 type: str = "link", se: bool = False, extrapolate: bool = False, X=None):
    """Prediction core shared by fitted results and reloaded models."""
    if type not in ("link", "response", "terms"):
        raise ValueError(f"unknown prediction type {type!r}")
    Xn = model_matrix(terms, data, extrapolate) if X is None else X
    bt, m = _derivative_factors(beta, exp_mask)
    J = Xn * m if se else None
    if type == "terms":
        out = np.column_stack([Xn[:, s] @ bt[s] for s in term_index])
        if not se:
            return out
        return out, np.column_stack([_quad_se(J[:, s], cov[s, s]) for s in term_index])
    eta = Xn @ bt
    if type == "link":
        return (eta, _quad_se(J, cov)) if se else eta
    mu = family.link.inverse(eta)
    if not se:
        return mu
    return mu, np.abs(family.link.mu_eta(eta)) * _quad_se(J, cov)
