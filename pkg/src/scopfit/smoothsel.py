"""Smoothing-parameter selection by GCV/UBRE with multiplicative EFS updates.

Each outer step refits the coefficients at ``lambda = exp(rho)`` and moves
``rho_j`` by the log of a ratio built from ``dD/drho_j`` and ``dtau/drho_j``;
the ratio equals one exactly where the criterion is stationary in ``rho_j``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .assembly import AssembledModel
from .family import Family, get_family
from .fit import FitResult, _derivative_factors, evaluate, initial_beta, newton_fit

__all__ = [
    "CriterionState",
    "Selection",
    "criterion_derivatives",
    "criterion_score",
    "deviance_floor",
    "efs_step",
    "gcv",
    "initial_rho",
    "select",
    "ubre",
]

log = logging.getLogger(__name__)

MAX_STEP = 5.0
RHO_RANGE = 25.0
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
DEVIANCE_RESOLUTION = 1e-10


def gcv(D: float, n: float, tau: float, gamma: float = 1.0) -> float:
    """``n D / (n - gamma tau)^2``; ``inf`` when the denominator is not positive."""
    den = n - gamma * tau
    if den <= 0:
        return float("inf")
    return n * D / den**2


def ubre(D: float, phi: float, tau: float, gamma: float = 1.0) -> float:
    """``D + 2 phi tau gamma``."""
    return D + 2.0 * phi * tau * gamma


def resolve_criterion(criterion: str, family: Family) -> str:
    if criterion == "auto":
        return "ubre" if family.scale_known else "gcv"
    if criterion not in ("gcv", "ubre"):
        raise ValueError(f"unknown criterion {criterion!r}")
    return criterion


def deviance_floor(fit: FitResult) -> float:
    """Smallest deviance distinguishable from round-off for this response.

    Below it the deviance carries no information about ``lambda``; scores use
    the floor instead so that ties break toward the smoother fit.
    """
    w = fit.weights
    n = float(np.sum(w > 0))
    rms = float(np.sqrt(np.sum(w * fit.y**2) / max(n, 1.0)))
    return n * (DEVIANCE_RESOLUTION * max(rms, 1.0)) ** 2


def criterion_score(fit: FitResult, criterion: str = "auto", gamma: float = 1.0) -> float:
    """GCV or UBRE score of a fit; ``inf`` when its edf is outside the valid range."""
    criterion = resolve_criterion(criterion, fit.family)
    if not fit.edf_ok:
        return float("inf")
    n = float(np.sum(fit.weights > 0))
    D = max(fit.deviance, deviance_floor(fit))
    if criterion == "gcv":
        return gcv(D, n, fit.edf, gamma)
    return ubre(D, 1.0, fit.edf, gamma)


@dataclass
class CriterionState:
    rho: np.ndarray
    score: float
    D: float
    tau: float
    n: float
    criterion: str = "gcv"
    phi: float = 1.0
    gamma: float = 1.0
    dD: np.ndarray | None = None
    dtau: np.ndarray | None = None
    history: list = field(default_factory=list)

    @property
    def lam(self) -> np.ndarray:
        return np.exp(self.rho)


def criterion_derivatives(am: AssembledModel, fit: FitResult, lam, X=None, dtau: str = "full"):
    """Implicit derivatives of ``beta_hat``, ``D`` and ``tau`` with respect to each ``rho_j``.

    ``dbeta_j = -H_p^-1 lambda_j S^j beta``.  With ``dtau="frozen"`` the
    trace derivative holds ``H_u`` fixed; ``"full"`` adds the change of
    ``H_u`` along ``dbeta_j``, which is nonzero for non-Gaussian families
    and for exponentiated coefficients.

    Returns ``(dD, dtau, dbeta)`` with ``dbeta`` of shape ``(p, M)``.
    """
    if dtau not in ("full", "frozen"):
        raise ValueError(f"unknown dtau mode {dtau!r}")
    X = am.X if X is None else X
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    beta = fit.beta
    Hi = fit.H_p_inv
    p = beta.size
    M = len(am.penalties)
    _, m = _derivative_factors(beta, am.exp_mask)
    Xt = X * m
    w = fit.weights
    _, a, b = fit.family.newton_weights(fit.y, fit.eta)
    wa, wb = w * a, w * b
    dDdbeta = -2.0 * (Xt.T @ wa)
    HiHuHi = Hi @ fit.H_u @ Hi
    S_lam = fit.H_p - fit.H_u
    full = dtau == "full"
    if full:
        db = w * fit.family.db_deta(fit.y, fit.eta)
        G = Xt.T @ (wb[:, None] * Xt)
        g_a = Xt.T @ wa
        HiSHi = Hi @ S_lam @ Hi
        E = am.exp_mask.astype(float)

    dbeta = np.zeros((p, M))
    dD = np.zeros(M)
    dt = np.zeros(M)
    for j, pb in enumerate(am.penalties):
        sl = slice(pb.offset, pb.offset + pb.size)
        rhs = np.zeros(p)
        rhs[sl] = lam[j] * (pb.matrix @ beta[sl])
        v = -Hi @ rhs
        dbeta[:, j] = v
        dD[j] = dDdbeta @ v
        dt[j] = -lam[j] * float(np.sum(pb.matrix * HiHuHi[sl, sl]))
        if full:
            ev = E * v
            deta = Xt @ v
            dH = ev[:, None] * G + G * ev[None, :]
            dH += Xt.T @ ((db * deta)[:, None] * Xt)
            dH[np.diag_indices(p)] += -ev * g_a + E * (Xt.T @ (wb * deta))
            dt[j] += float(np.sum(dH * HiSHi.T))
    return dD, dt, dbeta


def efs_step(state: CriterionState, max_step: float = MAX_STEP):
    """One multiplicative update of ``rho``.

    Returns ``(rho_new, fallback)`` where ``fallback[j]`` marks coordinates
    whose log argument was not positive; those keep their old value and are
    left to a line search by the caller.
    """
    if state.criterion == "gcv":
        coef = -2.0 * state.gamma * state.D / (state.n - state.tau)
    else:
        coef = -2.0 * state.phi * state.gamma
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = coef * state.dtau / state.dD
    fallback = ~(np.isfinite(arg) & (arg > 0))
    step = np.zeros_like(state.rho)
    step[~fallback] = np.clip(np.log(arg[~fallback]), -max_step, max_step)
    return state.rho + step, fallback


@dataclass
class Selection:
    fit: FitResult
    rho: np.ndarray
    score: float
    path: list
    converged: bool
    iterations: int
    criterion: str
    gamma: float
    flags: list = field(default_factory=list)

    @property
    def lam(self) -> np.ndarray:
        return np.exp(self.rho)


def initial_rho(am: AssembledModel, y, family: Family, X=None, weights=None) -> np.ndarray:
    """Start each ``lambda_j`` where its penalty is comparable to the data information."""
    if not am.penalties:
        return np.zeros(0)
    X = am.X if X is None else X
    lam0 = np.zeros(len(am.penalties))
    ev = evaluate(am, y, family, lam0, initial_beta(am, y, family, lam0, weights, X), weights, X)
    if ev is None:
        ev = evaluate(am, y, family, lam0, np.zeros(am.p), weights, X)
    Hd = np.abs(np.diag(ev.hessian_unpenalized(am.exp_mask)))
    rho = np.zeros(len(am.penalties))
    for j, pb in enumerate(am.penalties):
        sl = slice(pb.offset, pb.offset + pb.size)
        sd = np.diag(pb.matrix)
        act = sd > 0
        h = Hd[sl][act].mean() if np.any(act) else 1.0
        s = sd[act].mean() if np.any(act) else 1.0
        rho[j] = np.log(max(h, 1e-8) / s)
    return rho


def select(am: AssembledModel, y=None, family="gaussian", criterion: str = "auto",
           gamma: float = 1.0, rho0=None, tol: float = 1e-3, max_iter: int = 50, X=None,
           weights=None, dtau: str = "full") -> Selection:
    """Alternate inner Newton fits with EFS updates until ``max|drho| < tol``."""
    family = get_family(family)
    y = am.y if y is None else np.asarray(y, dtype=float)
    criterion = resolve_criterion(criterion, family)
    M = len(am.penalties)
    if M == 0:
        fit = newton_fit(am, y, family, np.zeros(0), X=X, weights=weights)
        return Selection(fit, np.zeros(0), criterion_score(fit, criterion, gamma),
                         [], True, 0, criterion, gamma)
    rho = initial_rho(am, y, family, X, weights) if rho0 is None else \
        np.array(np.broadcast_to(np.asarray(rho0, float), (M,)))
    lo, hi = rho - RHO_RANGE, rho + RHO_RANGE
    flags: list[str] = []

    def refit(r, beta0, multistart=True):
        f = newton_fit(am, y, family, np.exp(r), beta0=beta0, X=X, weights=weights)
        if multistart and beta0 is not None and am.exp_mask.any():
            # exponentiated coefficients make the inner problem nonconvex; a warm
            # start can stall on a plateau where some increments are near zero
            g = newton_fit(am, y, family, np.exp(r), X=X, weights=weights)
            if g.objective < f.objective:
                f = g
        return f, criterion_score(f, criterion, gamma)

    def probe(r):
        # line searches only rank candidates; the accepted point is refitted in full
        return refit(r, fit.beta, multistart=False)[1]

    fit, score = refit(rho, None)
    path = [(rho.copy(), score)]
    converged = False
    prev_step = None
    it = 0
    for it in range(1, max_iter + 1):
        dD, dt, _ = criterion_derivatives(am, fit, np.exp(rho), X, dtau)
        D = fit.deviance
        floor = deviance_floor(fit)
        if D <= floor:
            # exact fit at every lambda: leave the move to the floored score
            D, dD = floor, np.zeros_like(dD)
        state = CriterionState(rho, score, D, fit.edf, float(np.sum(fit.weights > 0)),
                               criterion, 1.0, gamma, dD, dt)
        new_rho, fallback = efs_step(state)
        new_rho = np.clip(new_rho, lo, hi)
        for j in np.flatnonzero(fallback):
            new_rho[j] = _golden_coordinate(probe, rho, j, lo[j], hi[j], tol=tol)
            flags.append(f"line search on rho[{j}] at iteration {it}")
        step = new_rho - rho
        new_fit, new_score = refit(new_rho, fit.beta)
        halvings = 0
        while not new_score <= score and halvings < 8:
            step = step / 2.0
            new_rho = rho + step
            new_fit, new_score = refit(new_rho, fit.beta)
            halvings += 1
        if halvings:
            flags.append(f"step halved {halvings}x at iteration {it}")
        if new_score <= score:
            if prev_step is not None and _slow(step, prev_step):
                new_rho, new_fit, new_score, step = _extrapolate(
                    refit, rho, step, new_rho, new_fit, new_score, lo, hi)
            prev_step = step
            rho, fit, score = new_rho, new_fit, new_score
            path.append((rho.copy(), score))
            if float(np.max(np.abs(step))) < tol:
                converged = True
                break
            continue
        prev_step = None
        # the update direction does not descend: sweep coordinates by line search
        moved = 0.0
        for j in range(M):
            x = _golden_coordinate(probe, rho, j, lo[j], hi[j], tol=tol)
            if x == rho[j]:
                continue
            trial = rho.copy()
            trial[j] = x
            f_j, s_j = refit(trial, fit.beta)
            if s_j < score:
                moved = max(moved, abs(x - rho[j]))
                rho, fit, score = trial, f_j, s_j
        flags.append(f"coordinate line search at iteration {it}")
        path.append((rho.copy(), score))
        if moved < tol:
            converged = True
            break
    if not converged:
        flags.append("outer iteration did not converge")
        log.warning("smoothing parameter selection did not converge in %d iterations", it)
    return Selection(fit, rho, score, path, converged, it, criterion, gamma, flags)


def _slow(step, prev_step) -> bool:
    """Successive steps point the same way and are not shrinking geometrically."""
    return bool(np.all(step * prev_step > 0)
                and np.max(np.abs(step)) > 0.5 * np.max(np.abs(prev_step)))


def _extrapolate(refit, rho, step, new_rho, new_fit, new_score, lo, hi):
    """Double an accepted step while the score keeps decreasing.

    On a flat stretch of the criterion the update ratio stays close to one and
    plain iteration crawls; this restores progress without giving up descent.
    """
    while np.max(np.abs(2.0 * step)) <= MAX_STEP:
        trial = np.clip(rho + 2.0 * step, lo, hi)
        f, sc = refit(trial, new_fit.beta)
        if not sc < new_score:
            break
        step = trial - rho
        new_rho, new_fit, new_score = trial, f, sc
    return new_rho, new_fit, new_score, step


def _golden_coordinate(score_fn, rho, j, lo, hi, width: float = MAX_STEP, iters: int = 25,
                       tol: float = 0.0) -> float:
    """Golden-section minimization of the score along coordinate ``j``."""
    a, b = max(lo, rho[j] - width), min(hi, rho[j] + width)

    def f(x):
        r = rho.copy()
        r[j] = x
        return score_fn(r)

    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if b - a < tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    x = (a + b) / 2.0
    return x if f(x) <= f(rho[j]) else float(rho[j])
