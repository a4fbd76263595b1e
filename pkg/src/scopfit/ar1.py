"""AR(1) residual model for Gaussian identity-link fits.

Whitening applies a banded square root ``T`` of the inverse AR(1)
correlation matrix block by block: the first row of each block passes
through and every later row becomes ``(r_i - rho r_{i-1}) / sqrt(1 - rho^2)``,
so that ``T'T = V^-1``.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .assembly import AssembledModel
from .family import get_family
from .smoothsel import Selection, select

__all__ = ["AR1Config", "AR1Result", "acf", "fit_ar1", "gaussian_aic", "select_rho", "std_residuals", "whiten"]

DEFAULT_GRID = np.round(np.arange(-0.95, 0.951, 0.05), 10)


@dataclass(frozen=True)
class AR1Config:
    rho: float = 0.0
    start_flags: np.ndarray | None = None
    fixed: bool = True

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise ValueError(f"AR1 correlation must satisfy |rho| < 1, got {self.rho}")
        if self.start_flags is not None:
            f = np.asarray(self.start_flags, dtype=bool)
            if f.size and not f[0]:
                raise ValueError("first observation must start a block")
            object.__setattr__(self, "start_flags", f)

    def starts(self, n: int) -> np.ndarray:
        if self.start_flags is None:
            f = np.zeros(n, dtype=bool)
            f[0] = True
            return f
        if self.start_flags.size != n:
            raise ValueError(f"start flags have length {self.start_flags.size}, expected {n}")
        return self.start_flags

    def log_det(self, n: int) -> float:
        """``log |det T|``."""
        inner = n - int(self.starts(n).sum())
        return -0.5 * inner * np.log1p(-self.rho**2)


def whiten(y, X=None, cfg: AR1Config = AR1Config()):
    """Apply the whitening transform to ``y`` and to every column of ``X``.

    Returns ``(y_tilde, X_tilde)`` (``X_tilde`` is ``None`` when ``X`` is).
    """
    rho = cfg.rho
    if not abs(rho) < 1:
        raise ValueError(f"AR1 correlation must satisfy |rho| < 1, got {rho}")
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    inner = ~cfg.starts(n)
    inner_idx = np.flatnonzero(inner)
    c = 1.0 / np.sqrt(1.0 - rho**2)

    def apply(a):
        out = a.copy()
        out[inner_idx] = (a[inner_idx] - rho * a[inner_idx - 1]) * c
        return out

    yt = apply(y)
    Xt = None if X is None else apply(np.asarray(X, dtype=float))
    return yt, Xt


def std_residuals(y_tilde, X_tilde, beta_tilde) -> np.ndarray:
    """Residuals of the whitened regression, ``y_tilde - X_tilde beta_tilde``."""
    return np.asarray(y_tilde) - np.asarray(X_tilde) @ np.asarray(beta_tilde)


def acf(x, max_lag: int = 20, start_flags=None) -> np.ndarray:
    """Sample autocorrelation up to ``max_lag``.

    With ``start_flags`` only pairs inside the same block contribute.
    """
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    n = x.size
    block = np.zeros(n, dtype=int) if start_flags is None else np.cumsum(start_flags) - 1
    c0 = float(x @ x)
    out = np.ones(max_lag + 1)
    for k in range(1, max_lag + 1):
        if k >= n:
            out[k] = 0.0
            continue
        same = block[k:] == block[:-k]
        out[k] = float(np.sum(x[k:][same] * x[:-k][same])) / c0 if c0 > 0 else 0.0
    return out


@dataclass
class AR1Result:
    rho: float
    config: AR1Config
    selection: Selection
    y_tilde: np.ndarray
    X_tilde: np.ndarray
    aic: float
    table: list = field(default_factory=list)
    n_whiten: int = 1

    @property
    def fit(self):
        return self.selection.fit

    @property
    def std_residuals(self) -> np.ndarray:
        return std_residuals(self.y_tilde, self.X_tilde, self.fit.beta_tilde)


def _check_family(family, link=None):
    fam = get_family(family, link)
    if fam.name != "gaussian" or fam.link.name != "identity":
        raise ValueError("AR1 requires gaussian identity")
    return fam


def gaussian_aic(D: float, n: int, edf: float, log_det: float = 0.0) -> float:
    """Profile Gaussian AIC from the whitened deviance; ``log_det`` is ``log |det T|``.

    The scale counts as one extra parameter. A zero deviance gives ``-inf``.
    """
    if D <= 0:
        return -np.inf
    return n * np.log(2.0 * np.pi * D / n) + n + 2.0 * (edf + 1.0) - 2.0 * log_det


def _aic(D: float, n: int, edf: float, cfg: AR1Config) -> float:
    return gaussian_aic(D, n, edf, cfg.log_det(n))


def fit_ar1(am: AssembledModel, y=None, rho: float = 0.0, start_flags=None, family="gaussian",
            **select_opts) -> AR1Result:
    """Whiten once at a fixed ``rho`` and select smoothing parameters on the whitened data."""
    fam = _check_family(family)
    y = am.y if y is None else np.asarray(y, dtype=float)
    cfg = AR1Config(float(rho), start_flags, fixed=True)
    yt, Xt = whiten(y, am.X, cfg)
    sel = select(am, yt, fam, X=Xt, **select_opts)
    aic = _aic(sel.fit.deviance, y.size, sel.fit.edf, cfg)
    return AR1Result(cfg.rho, cfg, sel, yt, Xt, aic, [(cfg.rho, aic)], 1)


def _threads() -> int:
    env = os.environ.get("SCOPFIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"SCOPFIT_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def select_rho(am: AssembledModel, y=None, family="gaussian", rho_grid=None, start_flags=None,
               rho_criterion: str = "aic", threads: int | None = None, **select_opts) -> AR1Result:
    """Grid search over ``rho`` minimizing AIC; every trial refits from scratch."""
    fam = _check_family(family)
    if rho_criterion != "aic":
        raise ValueError(f"unsupported AR1 criterion {rho_criterion!r}")
    y = am.y if y is None else np.asarray(y, dtype=float)
    grid = DEFAULT_GRID if rho_grid is None else np.asarray(rho_grid, dtype=float)
    if np.any(np.abs(grid) >= 1):
        raise ValueError("rho grid must lie inside (-1, 1)")

    def trial(r):
        cfg = AR1Config(float(r), start_flags, fixed=False)
        yt, Xt = whiten(y, am.X, cfg)
        sel = select(am, yt, fam, X=Xt, **select_opts)
        return cfg, yt, Xt, sel, _aic(sel.fit.deviance, y.size, sel.fit.edf, cfg)

    workers = min(threads or _threads(), len(grid))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(trial, grid))
    else:
        results = [trial(r) for r in grid]
    table = [(cfg.rho, aic) for cfg, _, _, _, aic in results]
    best = int(np.argmin([aic for *_, aic in results]))
    cfg, yt, Xt, sel, aic = results[best]
    return AR1Result(cfg.rho, cfg, sel, yt, Xt, aic, table, len(results))
