"""Closed-form standard errors, expected Fisher matrices, and sample sizes.

These serve as analytic oracles for the likelihood machinery: the balanced
two-arm normal model with centered treatment coding admits exact expected
information matrices, from which the unadjusted and covariate-adjusted
standard errors of the standardized mean difference follow.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil
from typing import Optional

import numpy as np
from scipy.special import ndtri

from .copula import lambda_from_rho


@dataclass(frozen=True)
class DesignSpec:
    """Inputs for power-based sample size calculations (balanced by default)."""

    tau: float
    alpha: float = 0.05
    power: float = 0.6
    rho: Optional[float] = None
    lam: Optional[float] = None
    outcome: str = "continuous"
    p2: float = 0.5            # binary: control-arm success proportion
    p0: float = 0.3            # survival: noncensoring probability, control
    p1: float = 0.3            # survival: noncensoring probability, treated
    ratio: float = 1.0         # treated : control allocation

    def lambda_value(self) -> float:
        if self.lam is not None:
            return float(self.lam)
        if self.rho is not None:
            return lambda_from_rho(self.rho)
        return 0.0


def se_unadjusted(tau: float, n: int) -> float:
    """SE of the standardized mean difference in a balanced trial of total n."""
    if n <= 0:
        raise ValueError("n must be positive")
    return float(np.sqrt(2.0 / n * (tau**2 / 4.0 + 2.0)))


def se_adjusted(tau: float, lam: float, n: int) -> float:
    """Covariate-adjusted SE with a single latent-normal covariate.

    Decreases monotonically in |lam| and reduces to the unadjusted SE at
    lam = 0.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    l2 = lam * lam
    return float(np.sqrt(2.0 / n * ((1.0 + l2) * tau**2 + 8.0) / (4.0 * (1.0 + l2))))


def sample_size_fraction(tau: float, rho: float) -> float:
    """SE(tau, lambda(rho))^2 / SE(tau)^2: relative total sample size needed
    to match the power of the unadjusted analysis."""
    lam = lambda_from_rho(rho)
    return (se_adjusted(tau, lam, 2) / se_unadjusted(tau, 2)) ** 2


def expected_fisher_pair(theta1, theta2=None, tau: float = 0.0,
                         lam: Optional[float] = None) -> np.ndarray:
    """Expected information of one control + one treated observation.

    Without `lam`: the 3x3 matrix for the normal shift model with parameters
    (intercept, slope, effect) and centered treatment coding. With `lam`: the
    6x6 matrix for the model with one jointly latent-normal covariate, with
    parameter order (intercept_y, slope_y, effect, intercept_x, slope_x, lam);
    here `theta1` and `theta2` are the (intercept, slope) pairs of outcome
    and covariate.
    """
    if lam is None:
        t1, t2 = float(theta1), float(theta2)
        if t2 <= 0:
            raise ValueError("slope must be positive")
        return np.array([
            [2.0, -2.0 * t1 / t2, 0.0],
            [-2.0 * t1 / t2, (4.0 * t1**2 + tau**2 + 8.0) / (2.0 * t2**2),
             -tau / (2.0 * t2)],
            [0.0, -tau / (2.0 * t2), 0.5],
        ])
    t11, t12 = (float(theta1[0]), float(theta1[1]))
    t21, t22 = (float(theta2[0]), float(theta2[1]))
    if t12 <= 0 or t22 <= 0:
        raise ValueError("slopes must be positive")
    l2 = lam * lam
    H = np.zeros((6, 6))
    H[0, 0] = 2.0 * l2 + 2.0
    H[0, 1] = H[1, 0] = -(2.0 * l2 + 2.0) * t11 / t12
    H[0, 3] = H[3, 0] = 2.0 * lam
    H[0, 4] = H[4, 0] = -2.0 * lam * t21 / t22
    H[1, 1] = ((4.0 * l2 + 4.0) * t11**2 + (l2 + 1.0) * tau**2
               + 4.0 * l2 + 8.0) / (2.0 * t12**2)
    H[1, 2] = H[2, 1] = -(l2 + 1.0) * tau / (2.0 * t12)
    H[1, 3] = H[3, 1] = -2.0 * lam * t11 / t12
    H[1, 4] = H[4, 1] = (2.0 * lam * t11 * t21 - 2.0 * l2) / (t12 * t22)
    H[1, 5] = H[5, 1] = 2.0 * lam / t12
    H[2, 2] = (l2 + 1.0) / 2.0
    H[3, 3] = 2.0
    H[3, 4] = H[4, 3] = -2.0 * t21 / t22
    H[4, 4] = (2.0 * t21**2 + 2.0 * l2 + 4.0) / t22**2
    H[4, 5] = H[5, 4] = -2.0 * lam / t22
    H[5, 5] = 2.0
    return H


def pair_loglik(theta_y, theta_x, tau: float, lam: float, y, x, w):
    """Log-likelihood (up to constants) of the adjusted pair model; the oracle
    counterpart of :func:`expected_fisher_pair` for Monte Carlo checks."""
    zy = theta_y[0] + theta_y[1] * y + tau * (np.asarray(w) - 0.5)
    zx = theta_x[0] + theta_x[1] * x
    return (-0.5 * zy**2 + np.log(theta_y[1])
            - 0.5 * (lam * zy + zx) ** 2 + np.log(theta_x[1]))


def _z(alpha: float, power: float):
    if not 0.0 < alpha < 1.0 or not 0.0 < power < 1.0:
        raise ValueError("alpha and power must lie in (0, 1)")
    return ndtri(1.0 - alpha / 2.0), ndtri(power)


def sample_size_continuous(spec: DesignSpec) -> int:
    """Per-arm size for the unadjusted standardized-mean-difference test."""
    if spec.tau == 0:
        raise ValueError("tau must be nonzero")
    za, zb = _z(spec.alpha, spec.power)
    n1 = (spec.tau**2 / 4.0 + 2.0) * (za + zb) ** 2 / spec.tau**2
    return int(ceil(n1))


def binary_p1(tau: float, p2: float) -> float:
    """Treated-arm proportion implied by a log-odds ratio tau and control p2."""
    e = np.exp(tau)
    return float(p2 * e / (1.0 + p2 * (e - 1.0)))


def sample_size_binary(spec: DesignSpec) -> int:
    """Per-arm size for the two-proportion test (Fleiss-style normal approximation)."""
    if spec.tau == 0:
        raise ValueError("tau must be nonzero")
    if not 0.0 < spec.p2 < 1.0:
        raise ValueError("control proportion must lie in (0, 1)")
    r = spec.ratio
    if r <= 0:
        raise ValueError("allocation ratio must be positive")
    p1 = binary_p1(spec.tau, spec.p2)
    p2 = spec.p2
    za, zb = _z(spec.alpha, spec.power)
    num = (za * np.sqrt((p1 + p2) * (1.0 - (p1 + p2) / (r + 1.0)))
           + zb * np.sqrt(r * p1 * (1.0 - p1) + p2 * (1.0 - p2))) ** 2
    return int(ceil(num / (r * (p1 - p2) ** 2)))


def sample_size_survival(spec: DesignSpec) -> int:
    """Per-arm size for the log-hazard-ratio test given noncensoring probabilities."""
    if spec.tau == 0:
        raise ValueError("tau must be nonzero")
    if not (0.0 < spec.p0 <= 1.0 and 0.0 < spec.p1 <= 1.0):
        raise ValueError("noncensoring probabilities must lie in (0, 1]")
    r = spec.ratio
    za, zb = _z(spec.alpha, spec.power)
    n1 = (r + 1.0) ** 2 / r * (za + zb) ** 2 / (spec.tau**2 * (spec.p0 + r * spec.p1))
    return int(ceil(n1))


def sample_size(spec: DesignSpec) -> dict:
    """Dispatch on outcome kind; reports per-arm and total sizes."""
    fn = {"continuous": sample_size_continuous,
          "binary": sample_size_binary,
          "survival": sample_size_survival}.get(spec.outcome)
    if fn is None:
        raise ValueError(f"unknown outcome kind {spec.outcome!r}")
    n1 = fn(spec)
    return {"per_arm": n1, "total": 2 * n1}
