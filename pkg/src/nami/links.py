"""Inverse link distributions G used by the marginal transformation models.

Each link is a fixed, parameter-free CDF on the real line: probit (standard
normal), logit (standard logistic), and cloglog (minimum extreme value, whose
shift parameter acts as a log-hazard ratio).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_ndtr, logit as _logit, ndtr, ndtri

# keep G(h - tau w) away from 0/1 before applying the normal quantile
PROB_CLIP = 1e-12


class Link:
    name: str

    def cdf(self, x):
        raise NotImplementedError

    def density(self, x):
        raise NotImplementedError

    def log_density(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.density(x))

    def quantile(self, p):
        raise NotImplementedError

    def log_cdf(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.cdf(x))

    def log_survival(self, x):
        with np.errstate(divide="ignore"):
            return np.log1p(-np.clip(self.cdf(x), None, 1.0))

    def __repr__(self):
        return f"Link({self.name})"


class Probit(Link):
    name = "probit"

    def cdf(self, x):
        return ndtr(x)

    def density(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * x * x - 0.5 * np.log(2 * np.pi)

    def quantile(self, p):
        return ndtri(p)

    def log_cdf(self, x):
        return log_ndtr(np.asarray(x, dtype=float))

    def log_survival(self, x):
        return log_ndtr(-np.asarray(x, dtype=float))


class Logit(Link):
    name = "logit"

    def cdf(self, x):
        return expit(x)

    def density(self, x):
        p = expit(x)
        return p * (1.0 - p)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        # -x - 2 log(1 + e^-x), stable both tails
        return -np.abs(x) - 2.0 * np.log1p(np.exp(-np.abs(x)))

    def quantile(self, p):
        return _logit(p)

    def log_cdf(self, x):
        x = np.asarray(x, dtype=float)
        return -np.logaddexp(0.0, -x)

    def log_survival(self, x):
        x = np.asarray(x, dtype=float)
        # log(1 - expit(x)) = -log(1 + e^x)
        return -np.logaddexp(0.0, x)


class Cloglog(Link):
    """G(x) = 1 - exp(-exp(x)); complementary log-log inverse."""

    name = "cloglog"

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return -np.expm1(-np.exp(x))

    def density(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(x - np.exp(x))

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        return x - np.exp(x)

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        return np.log(-np.log1p(-p))

    def log_cdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return np.log(-np.expm1(-np.exp(x)))

    def log_survival(self, x):
        return -np.exp(np.asarray(x, dtype=float))


PROBIT = Probit()
LOGIT = Logit()
CLOGLOG = Cloglog()

_LINKS = {l.name: l for l in (PROBIT, LOGIT, CLOGLOG)}


def get_link(name) -> Link:
    if isinstance(name, Link):
        return name
    try:
        return _LINKS[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown link {name!r}; choose from {sorted(_LINKS)}") from None


def to_normal_scale(link: Link, x):
    """Phi^-1(G(x)): re-expresses a link-scale value on the latent normal scale."""
    if isinstance(link, Probit):
        return np.asarray(x, dtype=float)
    g = np.clip(link.cdf(x), PROB_CLIP, 1.0 - PROB_CLIP)
    return ndtri(g)
