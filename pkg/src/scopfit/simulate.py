"""Synthetic data sets mirroring three model structures.

* ``wesdr-like``: binary outcome driven by three covariates, with an
  interaction that is nondecreasing in ``bmi``.
* ``sitka-like``: grouped growth curves with an increasing mean trend, a
  treatment shift, random group intercepts and AR(1) errors within group.
* ``scalar-on-function``: scalar responses from the integral of a
  decreasing coefficient function against random smooth curves.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .assembly import trapezoid_weights
from .data import DataTable, Factor

__all__ = ["SCENARIOS", "scalar_on_function", "simulate", "sitka_like", "true_coefficient",
           "wesdr_like"]


def wesdr_like(n: int = 669, seed: int = 0) -> DataTable:
    rng = np.random.default_rng(seed)
    dur = rng.uniform(0.0, 50.0, n)
    gly = rng.uniform(7.0, 21.0, n)
    bmi = rng.uniform(16.0, 40.0, n)
    eta = (-0.6 + 0.8 * np.sin(dur / 12.0) + 0.25 * (gly - 14.0)
           + 0.7 * np.tanh((bmi - 28.0) / 5.0) * (1.0 + dur / 50.0))
    p = expit(eta)
    ret = (rng.uniform(size=n) < p).astype(float)
    return DataTable({"ret": ret, "dur": dur, "gly": gly, "bmi": bmi, "p_true": p})


def sitka_mean(days, ozone):
    return 2.0 + 4.0 * (1.0 - np.exp(-(days - 150.0) / 250.0)) - 0.25 * ozone


def sitka_like(groups: int = 79, per_group: int = 13, rho: float = 0.6, sigma: float = 0.15,
               sd_group: float = 0.3, seed: int = 0) -> DataTable:
    rng = np.random.default_rng(seed)
    days = np.linspace(150.0, 700.0, per_group)
    n_ctrl = max(1, round(groups * 25 / 79))
    rows = {k: [] for k in ("log_size", "days", "ozone", "id", "start", "mu_true")}
    for g in range(groups):
        oz = 0.0 if g < n_ctrl else 1.0
        b = rng.normal(0.0, sd_group)
        e = np.empty(per_group)
        e[0] = rng.normal(0.0, sigma / np.sqrt(1.0 - rho**2))
        for t in range(1, per_group):
            e[t] = rho * e[t - 1] + rng.normal(0.0, sigma)
        mu = sitka_mean(days, oz)
        rows["log_size"].append(mu + b + e)
        rows["days"].append(days)
        rows["ozone"].append(np.full(per_group, oz))
        rows["id"].extend([f"T{g + 1:03d}"] * per_group)
        rows["start"].append(np.r_[1.0, np.zeros(per_group - 1)])
        rows["mu_true"].append(mu)
    cols = {k: (Factor.from_values(v) if k == "id" else np.concatenate(v)) for k, v in rows.items()}
    return DataTable(cols)


def true_coefficient(t):
    """Decreasing coefficient function on [0, 1]."""
    t = np.asarray(t, dtype=float)
    return 2.0 * np.exp(-3.0 * t) - 0.5


def scalar_on_function(n: int = 200, J: int = 100, sigma: float = 0.2, seed: int = 0) -> DataTable:
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, J)
    K = 5
    a = rng.normal(0.0, 1.0, (n, K)) / np.arange(1, K + 1)
    c = rng.normal(0.0, 1.0, (n, K)) / np.arange(1, K + 1)
    k = np.arange(1, K + 1)[:, None]
    Z = (rng.normal(0.0, 1.0, (n, 1)) + a @ np.sin(np.pi * k * t) + c @ np.cos(np.pi * k * t))
    X = np.tile(t, (n, 1))
    signal = np.sum(trapezoid_weights(X) * Z * true_coefficient(t), axis=1)
    y = 1.0 + signal + rng.normal(0.0, sigma, n)
    return DataTable({"y": y, "Z": Z, "X": X})


SCENARIOS = {
    "wesdr-like": wesdr_like,
    "sitka-like": sitka_like,
    "scalar-on-function": scalar_on_function,
}


def simulate(scenario: str, seed: int = 0, n: int | None = None, **kw) -> DataTable:
    """Dispatch by scenario name; ``n`` is rows (wesdr-like, scalar-on-function) or groups (sitka-like)."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
    if n is not None:
        kw["groups" if scenario == "sitka-like" else "n"] = n
    return SCENARIOS[scenario](seed=seed, **kw)
