"""Monotone transformation bases and their unconstrained parameterizations.

A transformation h(y) = a(y)' theta maps the outcome (or a covariate) to the
real line. Monotonicity of h is guaranteed by construction: the raw optimizer
vector gamma is mapped to coefficients theta through a cumulative-exponential
reparameterization, so any gamma in R^M yields a nondecreasing h.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import comb


class BasisDomainError(ValueError):
    """Argument outside the domain of a basis."""


@dataclass(frozen=True)
class Linear:
    """a(y) = (1, y)."""


@dataclass(frozen=True)
class LogLinear:
    """a(y) = (1, log y); only valid for y > 0."""


@dataclass(frozen=True)
class Bernstein:
    """Bernstein polynomial basis of given order on the interval [lo, hi].

    Arguments outside [lo, hi] are clamped to the boundary; callers that
    care can detect this via :func:`clamp_to_support`.
    """

    order: int
    lo: float
    hi: float

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("Bernstein order must be >= 1")
        if not self.lo < self.hi:
            raise ValueError("Bernstein support requires lo < hi")


@dataclass(frozen=True)
class DiscreteStep:
    """Step function over K ordered levels coded 1..K.

    The coefficient vector has K-1 entries; the top level carries an
    implicit +infinity handled by the likelihood layer.
    """

    levels: int

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("DiscreteStep needs at least 2 levels")


BasisSpec = Union[Linear, LogLinear, Bernstein, DiscreteStep]


def dimension(spec: BasisSpec) -> int:
    """Number of coefficients in the basis."""
    if isinstance(spec, (Linear, LogLinear)):
        return 2
    if isinstance(spec, Bernstein):
        return spec.order + 1
    if isinstance(spec, DiscreteStep):
        return spec.levels - 1
    raise TypeError(f"unknown basis spec {spec!r}")


def is_continuous(spec: BasisSpec) -> bool:
    return not isinstance(spec, DiscreteStep)


def default_bernstein_support(values: np.ndarray, margin: float = 0.05) -> tuple[float, float]:
    """Observed range extended by `margin` on each side."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise ValueError("no finite values to derive a Bernstein support from")
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    return lo - margin * span, hi + margin * span


def clamp_to_support(spec: Bernstein, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp values into [lo, hi]; second return flags the clamped entries."""
    y = np.asarray(y, dtype=float)
    clamped = (y < spec.lo) | (y > spec.hi)
    return np.clip(y, spec.lo, spec.hi), clamped


def evaluate_matrix(spec: BasisSpec, y: np.ndarray) -> np.ndarray:
    """Basis values a(y) for an array of arguments, shape (n, dimension)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if isinstance(spec, Linear):
        return np.column_stack([np.ones_like(y), y])
    if isinstance(spec, LogLinear):
        if np.any(y <= 0):
            raise BasisDomainError("LogLinear basis requires strictly positive arguments")
        return np.column_stack([np.ones_like(y), np.log(y)])
    if isinstance(spec, Bernstein):
        yc, _ = clamp_to_support(spec, y)
        t = (yc - spec.lo) / (spec.hi - spec.lo)
        m = np.arange(spec.order + 1)
        binom = comb(spec.order, m)
        # column m: C(M,m) t^m (1-t)^(M-m)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = binom * t[:, None] ** m * (1.0 - t[:, None]) ** (spec.order - m)
        # 0^0 at the endpoints
        out = np.where(np.isfinite(out), out, 0.0)
        out[t == 0.0, 0] = 1.0
        out[t == 1.0, -1] = 1.0
        return out
    if isinstance(spec, DiscreteStep):
        k = np.asarray(np.rint(y), dtype=int)
        if np.any((k < 1) | (k > spec.levels)):
            raise BasisDomainError(f"level outside 1..{spec.levels}")
        out = np.zeros((y.size, spec.levels - 1))
        inside = k <= spec.levels - 1
        out[np.nonzero(inside)[0], k[inside] - 1] = 1.0
        # level K has no finite coefficient; the caller supplies +inf
        return out
    raise TypeError(f"unknown basis spec {spec!r}")


def derivative_matrix(spec: BasisSpec, y: np.ndarray) -> np.ndarray:
    """Derivatives a'(y), shape (n, dimension); continuous bases only."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if isinstance(spec, Linear):
        return np.column_stack([np.zeros_like(y), np.ones_like(y)])
    if isinstance(spec, LogLinear):
        if np.any(y <= 0):
            raise BasisDomainError("LogLinear basis requires strictly positive arguments")
        return np.column_stack([np.zeros_like(y), 1.0 / y])
    if isinstance(spec, Bernstein):
        yc, _ = clamp_to_support(spec, y)
        t = (yc - spec.lo) / (spec.hi - spec.lo)
        M = spec.order
        m = np.arange(M + 1)
        binom = comb(M, m)
        with np.errstate(divide="ignore", invalid="ignore"):
            low = binom * np.where(m >= 1, m, 0) * t[:, None] ** np.maximum(m - 1, 0) \
                * (1.0 - t[:, None]) ** (M - m)
            high = binom * np.where(M - m >= 1, M - m, 0) * t[:, None] ** m \
                * (1.0 - t[:, None]) ** np.maximum(M - m - 1, 0)
        low = np.nan_to_num(low)
        high = np.nan_to_num(high)
        return (low - high) / (spec.hi - spec.lo)
    if isinstance(spec, DiscreteStep):
        raise BasisDomainError("derivative undefined for a step-function basis")
    raise TypeError(f"unknown basis spec {spec!r}")


def evaluate_basis(spec: BasisSpec, y: float) -> np.ndarray:
    """Basis vector a(y) at a single argument."""
    return evaluate_matrix(spec, np.array([y]))[0]


def constrain(spec: BasisSpec, gamma: np.ndarray) -> np.ndarray:
    """Map an unconstrained vector to monotone coefficients theta.

    theta_1 = gamma_1 and theta_m = theta_{m-1} + exp(gamma_m) for the
    Bernstein and step bases; for (log-)linear bases only the slope is
    exponentiated.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (dimension(spec),):
        raise ValueError(f"expected {dimension(spec)} coefficients, got {gamma.shape}")
    if isinstance(spec, (Linear, LogLinear)):
        return np.array([gamma[0], np.exp(gamma[1])])
    theta = gamma.copy()
    theta[1:] = np.exp(gamma[1:])
    return np.cumsum(theta)


def unconstrain(spec: BasisSpec, theta: np.ndarray) -> np.ndarray:
    """Inverse of :func:`constrain`."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (dimension(spec),):
        raise ValueError(f"expected {dimension(spec)} coefficients, got {theta.shape}")
    if isinstance(spec, (Linear, LogLinear)):
        if theta[1] <= 0:
            raise ValueError("slope must be positive")
        return np.array([theta[0], np.log(theta[1])])
    diffs = np.diff(theta)
    if theta.size > 1 and np.any(diffs <= 0):
        raise ValueError("coefficients must be strictly increasing")
    return np.concatenate([[theta[0]], np.log(diffs)])


@dataclass(frozen=True)
class MonotoneCoefficients:
    """Paired unconstrained/constrained coefficient vectors for one basis."""

    gamma: np.ndarray
    theta: np.ndarray

    @classmethod
    def from_unconstrained(cls, spec: BasisSpec, gamma) -> "MonotoneCoefficients":
        gamma = np.asarray(gamma, dtype=float)
        return cls(gamma=gamma, theta=constrain(spec, gamma))

    @classmethod
    def from_constrained(cls, spec: BasisSpec, theta) -> "MonotoneCoefficients":
        theta = np.asarray(theta, dtype=float)
        return cls(gamma=unconstrain(spec, theta), theta=theta)


def transformation(spec: BasisSpec, theta: np.ndarray, y) -> np.ndarray:
    """h(y) = a(y)' theta, vectorized over y."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (dimension(spec),):
        raise ValueError("coefficient dimension does not match basis")
    scalar = np.isscalar(y) or np.ndim(y) == 0
    out = evaluate_matrix(spec, y) @ theta
    return float(out[0]) if scalar else out


def transformation_derivative(spec: BasisSpec, theta: np.ndarray, y) -> np.ndarray:
    """dh/dy, vectorized over y; continuous bases only."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (dimension(spec),):
        raise ValueError("coefficient dimension does not match basis")
    scalar = np.isscalar(y) or np.ndim(y) == 0
    out = derivative_matrix(spec, y) @ theta
    return float(out[0]) if scalar else out
