"""Gaussian-copula correlation machinery.

The J-dimensional correlation matrix is parameterized by the unconstrained
vector lambda (row-major lower triangle of a unit lower triangular matrix
Lambda). The working factor is

    Omega(lambda) = Lambda diag(Lambda^-1 Lambda^-T)^(1/2),

a lower triangular matrix with positive diagonal, chosen so that
Sigma = Omega^-1 Omega^-T has exactly unit diagonal. Its precision matrix is
Sigma^-1 = Omega' Omega, whose last row carries the latent-scale regression
coefficients of the outcome on the covariates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logit, ndtr, ndtri
from scipy.stats import qmc

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class CopulaStructure:
    """Dimension J plus the unconstrained lower-triangle vector lambda."""

    dim: int
    lam: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.dim * (self.dim - 1) // 2
        lam = np.zeros(n) if self.lam is None else np.asarray(self.lam, dtype=float)
        if lam.shape != (n,):
            raise ValueError(f"lambda must have length {n} for dimension {self.dim}")
        object.__setattr__(self, "lam", lam)


def _tril_indices(J: int):
    # row-major lower triangle: (2,1), (3,1), (3,2), ...
    rows, cols = [], []
    for j in range(1, J):
        for k in range(j):
            rows.append(j)
            cols.append(k)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def lambda_matrix(c: CopulaStructure) -> np.ndarray:
    """Unit lower triangular Lambda(lambda)."""
    J = c.dim
    L = np.eye(J)
    rows, cols = _tril_indices(J)
    L[rows, cols] = c.lam
    return L


def lambda_to_omega(c: CopulaStructure) -> np.ndarray:
    """Omega = Lambda diag(Lambda^-1 Lambda^-T)^(1/2), lower triangular."""
    L = lambda_matrix(c)
    Linv = solve_triangular(L, np.eye(c.dim), lower=True, unit_diagonal=True)
    d = np.sqrt(np.einsum("ij,ij->i", Linv, Linv))
    return L * d[None, :]


def omega_to_sigma(omega: np.ndarray) -> np.ndarray:
    """Sigma = Omega^-1 Omega^-T."""
    oinv = solve_triangular(omega, np.eye(omega.shape[0]), lower=True)
    return oinv @ oinv.T


def correlation_matrix(c: CopulaStructure) -> np.ndarray:
    return omega_to_sigma(lambda_to_omega(c))


def outcome_correlations(c: CopulaStructure) -> np.ndarray:
    """Last row of Sigma: latent correlations between each covariate and the outcome."""
    return correlation_matrix(c)[-1, :-1]


def lambda_from_rho(rho: float) -> float:
    """Single-covariate conversion lambda = -exp(logit(rho^2) / 2) for rho in [0, 1)."""
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must lie in [0, 1)")
    if rho == 0.0:
        return 0.0
    return float(-np.exp(logit(rho**2) / 2.0))


def lambda_from_correlation(R: np.ndarray) -> np.ndarray:
    """Recover the lambda vector reproducing a given correlation matrix.

    Omega = chol(R)^-1 and lambda_{jk} = Omega_{jk} / Omega_{kk}; used for
    warm starts from empirical latent correlations.
    """
    R = np.asarray(R, dtype=float)
    J = R.shape[0]
    chol = np.linalg.cholesky(R)
    omega = solve_triangular(chol, np.eye(J), lower=True)
    rows, cols = _tril_indices(J)
    return omega[rows, cols] / omega[cols, cols]


def marginalize(sigma: np.ndarray, keep) -> np.ndarray:
    """Principal submatrix of a correlation matrix on the kept coordinates."""
    keep = np.asarray(keep, dtype=int)
    if keep.size == 0:
        raise ValueError("cannot marginalize to an empty coordinate set")
    return sigma[np.ix_(keep, keep)]


def conditional_params(sigma: np.ndarray, z_given: np.ndarray):
    """Mean and sd of the last coordinate of N(0, Sigma) given the others.

    The mean equals -omega_JJ^-1 sum_j omega_Jj z_j and the sd omega_JJ^-1,
    with omega the rows of the factor from :func:`lambda_to_omega`.
    """
    sigma = np.asarray(sigma, dtype=float)
    z_given = np.atleast_1d(np.asarray(z_given, dtype=float))
    J = sigma.shape[0]
    if z_given.shape[-1] != J - 1:
        raise ValueError("conditioning vector must have length J - 1")
    s12 = sigma[-1, :-1]
    s11 = sigma[:-1, :-1]
    b = np.linalg.solve(s11, s12)
    mean = z_given @ b
    var = sigma[-1, -1] - s12 @ b
    return mean, float(np.sqrt(var))


def conditional_last_from_omega(omega: np.ndarray, z_given: np.ndarray):
    """Same as :func:`conditional_params` but from the Omega factor directly."""
    z_given = np.atleast_1d(np.asarray(z_given, dtype=float))
    sd = 1.0 / omega[-1, -1]
    mean = -sd * (z_given @ omega[-1, :-1])
    return mean, float(sd)


def mvn_logpdf(omega: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Log density of N(0, Sigma) with Sigma = Omega^-1 Omega^-T.

    Equals sum_j log phi((Omega z)_j) + sum_j log omega_jj; vectorized over
    rows of z.
    """
    z = np.asarray(z, dtype=float)
    one = z.ndim == 1
    z2 = np.atleast_2d(z)
    t = z2 @ omega.T
    out = -0.5 * np.sum(t * t, axis=1) - omega.shape[0] * LOG_SQRT_2PI \
        + np.sum(np.log(np.diag(omega)))
    return float(out[0]) if one else out


# --- batched variants used by the fitting machinery -----------------------

def omega_batch(J: int, lam: np.ndarray) -> np.ndarray:
    """Omega for a batch of lambda vectors, shape (K, J, J)."""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    K = lam.shape[0]
    L = np.broadcast_to(np.eye(J), (K, J, J)).copy()
    rows, cols = _tril_indices(J)
    L[:, rows, cols] = lam
    Linv = np.linalg.inv(L)
    d = np.sqrt(np.einsum("kij,kij->ki", Linv, Linv))
    return L * d[:, None, :]


def sigma_batch(omega: np.ndarray) -> np.ndarray:
    oinv = np.linalg.inv(omega)
    return oinv @ np.transpose(oinv, (0, 2, 1))


# --- rectangle probabilities ----------------------------------------------

DEFAULT_QMC_POINTS = 2**13


def _split_covariance(cov: np.ndarray, lower, upper):
    """Standardize a covariance to a correlation matrix and rescale bounds."""
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    return corr, np.asarray(lower, float) / sd, np.asarray(upper, float) / sd


def mvn_rectangle(sigma: np.ndarray, lower, upper, points: int = DEFAULT_QMC_POINTS) -> float:
    """P(lower < Z <= upper) for Z ~ N(0, Sigma).

    Sequential-conditioning quasi-random integration with a fixed,
    deterministic low-discrepancy point set. Variables are reordered so the
    tightest marginal interval is integrated first. Sigma may be any positive
    definite covariance; it is standardized internally.
    """
    sigma = np.asarray(sigma, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    J = sigma.shape[0]
    if np.any(lower >= upper):
        raise ValueError("need lower < upper componentwise")
    if not np.allclose(np.diag(sigma), 1.0):
        sigma, lower, upper = _split_covariance(sigma, lower, upper)

    if J == 1:
        return float(ndtr(upper[0]) - ndtr(lower[0]))

    # tightest interval first
    widths = ndtr(upper) - ndtr(lower)
    order = np.argsort(widths)
    sigma = sigma[np.ix_(order, order)]
    lower, upper = lower[order], upper[order]

    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ValueError("covariance matrix is not positive definite") from None

    # first coordinate separates out exactly
    d0 = ndtr(lower[0] / chol[0, 0])
    e0 = ndtr(upper[0] / chol[0, 0])

    sampler = qmc.Sobol(d=J - 1, scramble=False)
    u = sampler.random(points)
    # tent (baker) transform: periodizes the integrand, sharpening QMC rates
    u = 1.0 - np.abs(2.0 * u - 1.0)
    eps = 1e-12
    u = np.clip(u, eps, 1.0 - eps)

    n = u.shape[0]
    prob = np.full(n, e0 - d0)
    y = np.empty((n, J - 1))
    d, e = np.full(n, d0), np.full(n, e0)
    for i in range(1, J):
        y[:, i - 1] = ndtri(np.clip(d + u[:, i - 1] * (e - d), eps, 1.0 - eps))
        drift = y[:, : i] @ chol[i, :i]
        d = ndtr((lower[i] - drift) / chol[i, i])
        e = ndtr((upper[i] - drift) / chol[i, i])
        prob *= np.clip(e - d, 0.0, 1.0)
    return float(prob.mean())
