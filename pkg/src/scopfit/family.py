"""Exponential-family distributions and link functions."""
from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln, xlogy

__all__ = ["Family", "deviance", "get_family", "LINKS"]

MU_EPS = 1e-10


class Link:
    name = ""

    def link(self, mu):
        raise NotImplementedError

    def inverse(self, eta):
        raise NotImplementedError

    def mu_eta(self, eta):
        """d mu / d eta."""
        raise NotImplementedError

    def d1(self, mu):
        """g'(mu)."""
        raise NotImplementedError

    def d2(self, mu):
        """g''(mu)."""
        raise NotImplementedError


class IdentityLink(Link):
    name = "identity"

    def link(self, mu):
        return np.asarray(mu, dtype=float)

    def inverse(self, eta):
        return np.asarray(eta, dtype=float)

    def mu_eta(self, eta):
        return np.ones_like(eta, dtype=float)

    def d1(self, mu):
        return np.ones_like(mu, dtype=float)

    def d2(self, mu):
        return np.zeros_like(mu, dtype=float)


class LogLink(Link):
    name = "log"

    def link(self, mu):
        return np.log(mu)

    def inverse(self, eta):
        return np.exp(np.minimum(eta, 700.0))

    def mu_eta(self, eta):
        return np.exp(np.minimum(eta, 700.0))

    def d1(self, mu):
        return 1.0 / mu

    def d2(self, mu):
        return -1.0 / mu**2


class LogitLink(Link):
    name = "logit"

    def link(self, mu):
        return np.log(mu) - np.log1p(-mu)

    def inverse(self, eta):
        return expit(eta)

    def mu_eta(self, eta):
        p = expit(eta)
        return p * (1.0 - p)

    def d1(self, mu):
        return 1.0 / (mu * (1.0 - mu))

    def d2(self, mu):
        return (2.0 * mu - 1.0) / (mu * (1.0 - mu)) ** 2


LINKS = {"identity": IdentityLink, "log": LogLink, "logit": LogitLink}


class Family:
    """Response distribution with its link.

    Newton quantities are expressed per observation in terms of ``eta``:
    ``a = dl/deta = (y - mu) / (V g')`` and ``b = -d2l/deta2``.  For the
    canonical links ``b = 1 / (V g'^2)``; otherwise ``b`` carries the
    observed-information correction ``1 + (y - mu)(V'/V + g''/g')``.
    """

    name = ""
    scale_known = False
    canonical = ""

    def __init__(self, link: str | None = None):
        self.link = LINKS[link or self.canonical]()

    def __repr__(self) -> str:
        return f"{type(self).__name__}(link={self.link.name!r})"

    @property
    def is_canonical(self) -> bool:
        return self.link.name == self.canonical

    def variance(self, mu):
        raise NotImplementedError

    def dvariance(self, mu):
        raise NotImplementedError

    def unit_deviance(self, y, mu):
        raise NotImplementedError

    def valid_mu(self, mu) -> bool:
        return bool(np.all(np.isfinite(mu)))

    def clamp_mu(self, mu):
        return mu, False

    def initial_mu(self, y):
        return np.asarray(y, dtype=float).copy()

    def deviance(self, y, mu, weights=None) -> float:
        w = 1.0 if weights is None else weights
        return float(np.sum(w * self.unit_deviance(y, mu)))

    def loglik(self, y, mu, weights=None, scale: float = 1.0) -> float:
        raise NotImplementedError

    def newton_weights(self, y, eta):
        """Return ``(mu, a, b)`` at linear predictor ``eta``."""
        mu = self.link.inverse(eta)
        if self.is_canonical:
            return mu, y - mu, self.link.mu_eta(eta)
        mu_c, _ = self.clamp_mu(mu)
        V = self.variance(mu_c)
        g1 = self.link.d1(mu_c)
        a = (y - mu_c) / (V * g1)
        b = 1.0 / (V * g1**2)
        if not self.is_canonical:
            alpha = 1.0 + (y - mu_c) * (self.dvariance(mu_c) / V + self.link.d2(mu_c) / g1)
            b = b * alpha
        return mu, a, b

    def db_deta(self, y, eta):
        """d b / d eta, analytic for canonical links, central differences otherwise."""
        if self.is_canonical:
            return self._canonical_db(eta)
        h = 1e-5 * np.maximum(1.0, np.abs(eta))
        _, _, bp = self.newton_weights(y, eta + h)
        _, _, bm = self.newton_weights(y, eta - h)
        return (bp - bm) / (2.0 * h)

    def _canonical_db(self, eta):
        raise NotImplementedError


class Gaussian(Family):
    name = "gaussian"
    canonical = "identity"

    def variance(self, mu):
        return np.ones_like(mu, dtype=float)

    def dvariance(self, mu):
        return np.zeros_like(mu, dtype=float)

    def unit_deviance(self, y, mu):
        return (y - mu) ** 2

    def valid_mu(self, mu) -> bool:
        ok = np.all(np.isfinite(mu))
        if self.link.name == "log":
            ok = ok and np.all(mu > 0)
        return bool(ok)

    def initial_mu(self, y):
        y = np.asarray(y, dtype=float)
        if self.link.name == "log":
            return np.maximum(y, 0.1 * max(np.mean(np.abs(y)), 1e-3))
        return y.copy()

    def loglik(self, y, mu, weights=None, scale: float = 1.0) -> float:
        w = np.ones_like(y) if weights is None else weights
        n = np.sum(w > 0)
        return float(-0.5 * np.sum(w * (y - mu) ** 2) / scale
                     - 0.5 * n * np.log(2 * np.pi * scale) + 0.5 * np.sum(np.log(w[w > 0])))

    def _canonical_db(self, eta):
        return np.zeros_like(eta, dtype=float)


class Binomial(Family):
    name = "binomial"
    scale_known = True
    canonical = "logit"

    def variance(self, mu):
        return mu * (1.0 - mu)

    def dvariance(self, mu):
        return 1.0 - 2.0 * mu

    def clamp_mu(self, mu):
        clamped = bool(np.any((mu < MU_EPS) | (mu > 1.0 - MU_EPS)))
        return np.clip(mu, MU_EPS, 1.0 - MU_EPS), clamped

    def valid_mu(self, mu) -> bool:
        return bool(np.all(np.isfinite(mu)) and np.all((mu >= 0) & (mu <= 1)))

    def unit_deviance(self, y, mu):
        mu, _ = self.clamp_mu(mu)
        return 2.0 * (xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu)))

    def initial_mu(self, y):
        return (np.asarray(y, dtype=float) + 0.5) / 2.0

    def loglik(self, y, mu, weights=None, scale: float = 1.0) -> float:
        w = np.ones_like(y) if weights is None else weights
        mu, _ = self.clamp_mu(mu)
        k = np.round(w * y)
        return float(np.sum(gammaln(w + 1) - gammaln(k + 1) - gammaln(w - k + 1)
                            + xlogy(k, mu) + xlogy(w - k, 1.0 - mu)))

    def _canonical_db(self, eta):
        p = expit(eta)
        return p * (1.0 - p) * (1.0 - 2.0 * p)


class Poisson(Family):
    name = "poisson"
    scale_known = True
    canonical = "log"

    def variance(self, mu):
        return np.asarray(mu, dtype=float)

    def dvariance(self, mu):
        return np.ones_like(mu, dtype=float)

    def clamp_mu(self, mu):
        clamped = bool(np.any(mu < MU_EPS))
        return np.maximum(mu, MU_EPS), clamped

    def valid_mu(self, mu) -> bool:
        return bool(np.all(np.isfinite(mu)) and np.all(mu > 0))

    def unit_deviance(self, y, mu):
        mu, _ = self.clamp_mu(mu)
        return 2.0 * (xlogy(y, y / mu) - (y - mu))

    def initial_mu(self, y):
        return np.asarray(y, dtype=float) + 0.1

    def loglik(self, y, mu, weights=None, scale: float = 1.0) -> float:
        w = np.ones_like(y) if weights is None else weights
        mu, _ = self.clamp_mu(mu)
        return float(np.sum(w * (xlogy(y, mu) - mu - gammaln(y + 1))))

    def _canonical_db(self, eta):
        return np.exp(np.minimum(eta, 700.0))


_FAMILIES = {"gaussian": Gaussian, "binomial": Binomial, "poisson": Poisson}


def get_family(name: str | Family = "gaussian", link: str | None = None) -> Family:
    if isinstance(name, Family):
        return name
    try:
        return _FAMILIES[name](link)
    except KeyError:
        raise ValueError(f"unknown family {name!r}") from None


def deviance(family: Family, y, mu, weights=None, return_clamped: bool = False):
    """Sum of unit deviances; binomial/Poisson means are clamped away from the boundary."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    _, clamped = family.clamp_mu(mu)
    D = family.deviance(y, mu, weights)
    return (D, clamped) if return_clamped else D
