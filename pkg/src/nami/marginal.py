"""Univariate marginal transformation models F_w(y) = G(h(y) - tau w).

Holds the observation/dataset containers shared by the whole package and the
maximum-likelihood machinery for shift transformation models, which covers
the unadjusted marginal estimator (Cohen's d, log-odds ratio, proportional
odds, log-hazard ratio) and, with a covariate design matrix, the conditional
linear transformation model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from . import basis as bs
from . import _optim
from .links import Link, PROBIT, get_link, to_normal_scale

EXACT, INTERVAL, MISSING = 0, 1, 2
SEPARATION_BOUND = 20.0


class NonConvergenceError(RuntimeError):
    """Optimizer failed to locate a maximum."""


class DegenerateDataError(ValueError):
    """Data cannot identify the model (e.g. constant outcome)."""


# --- observations -----------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    """One recorded value: exact, right-censored, interval, or missing."""

    kind: int
    lower: float
    upper: float

    @classmethod
    def exact(cls, value: float) -> "Observation":
        v = float(value)
        return cls(EXACT, v, v)

    @classmethod
    def right_censored(cls, at: float) -> "Observation":
        return cls(INTERVAL, float(at), np.inf)

    @classmethod
    def interval(cls, lower: float, upper: float) -> "Observation":
        lower, upper = float(lower), float(upper)
        if not lower < upper:
            raise ValueError("interval requires lower < upper")
        return cls(INTERVAL, lower, upper)

    @classmethod
    def missing(cls) -> "Observation":
        return cls(MISSING, np.nan, np.nan)

    @property
    def is_right_censored(self) -> bool:
        return self.kind == INTERVAL and np.isinf(self.upper)


class ObservationColumn:
    """Column of observations stored as (lower, upper, kind) arrays."""

    def __init__(self, name: str, lower, upper, kind):
        self.name = name
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.kind = np.asarray(kind, dtype=np.int8)
        if not (self.lower.shape == self.upper.shape == self.kind.shape):
            raise ValueError("lower/upper/kind must have matching shapes")
        bad = (self.kind == INTERVAL) & ~(self.lower < self.upper)
        if np.any(bad):
            raise ValueError("interval observations require lower < upper")

    @classmethod
    def from_exact(cls, name: str, values) -> "ObservationColumn":
        values = np.asarray(values, dtype=float)
        kind = np.where(np.isnan(values), MISSING, EXACT).astype(np.int8)
        return cls(name, values, values, kind)

    @classmethod
    def from_survival(cls, name: str, time, event) -> "ObservationColumn":
        """Observed times with an event indicator (1 = event, 0 = censored)."""
        time = np.asarray(time, dtype=float)
        event = np.asarray(event)
        lower = time.copy()
        upper = np.where(event == 1, time, np.inf)
        kind = np.where(np.isnan(time), MISSING,
                        np.where(event == 1, EXACT, INTERVAL)).astype(np.int8)
        return cls(name, lower, upper, kind)

    @classmethod
    def from_observations(cls, name: str, obs: Sequence[Observation]) -> "ObservationColumn":
        return cls(name,
                   [o.lower for o in obs],
                   [o.upper for o in obs],
                   [o.kind for o in obs])

    def __len__(self):
        return self.lower.size

    def observation(self, i: int) -> Observation:
        return Observation(int(self.kind[i]), float(self.lower[i]), float(self.upper[i]))

    @property
    def n_missing(self) -> int:
        return int(np.sum(self.kind == MISSING))

    @property
    def has_censoring(self) -> bool:
        return bool(np.any(self.kind == INTERVAL))

    def finite_values(self) -> np.ndarray:
        """All finite recorded bounds; used for data-driven basis supports."""
        vals = np.concatenate([self.lower, self.upper])
        return vals[np.isfinite(vals)]


@dataclass
class Dataset:
    """Two-arm trial data: treatment, one outcome column, covariate columns."""

    w: np.ndarray
    outcome: ObservationColumn
    covariates: list = field(default_factory=list)

    def __post_init__(self):
        self.w = np.asarray(self.w)
        if np.any(np.isnan(self.w.astype(float))):
            raise ValueError("treatment indicator contains missing values")
        self.w = self.w.astype(int)
        if not np.all(np.isin(self.w, (0, 1))):
            raise ValueError("treatment indicator must be 0/1")
        n = self.w.size
        for col in [self.outcome, *self.covariates]:
            if len(col) != n:
                raise ValueError(f"column {col.name!r} length differs from treatment")

    @property
    def n(self) -> int:
        return self.w.size

    def covariate_names(self) -> list:
        return [c.name for c in self.covariates]


# --- prepared likelihood pieces ---------------------------------------------

@dataclass
class PreparedColumn:
    """Basis evaluations of one column, split by contribution type."""

    spec: bs.BasisSpec
    dens_idx: np.ndarray
    A_dens: np.ndarray
    Ad_dens: np.ndarray
    int_idx: np.ndarray
    A_lo: np.ndarray
    lo_inf: np.ndarray
    A_hi: np.ndarray
    hi_inf: np.ndarray
    miss_idx: np.ndarray
    n_clamped: int = 0


def prepare_column(col: ObservationColumn, spec: bs.BasisSpec) -> PreparedColumn:
    """Evaluate basis matrices for every observation of one column."""
    M = bs.dimension(spec)
    kind = col.kind
    discrete = isinstance(spec, bs.DiscreteStep)

    miss_idx = np.nonzero(kind == MISSING)[0]
    if discrete:
        # exact levels become latent intervals between step heights
        dens_idx = np.zeros(0, dtype=int)
        int_idx = np.nonzero(kind != MISSING)[0]
        A_dens = Ad_dens = np.zeros((0, M))
        if np.any(kind[int_idx] == INTERVAL):
            raise ValueError("interval censoring of discrete columns is not supported")
        k = np.rint(col.lower[int_idx]).astype(int)
        if np.any((k < 1) | (k > spec.levels)):
            raise ValueError(f"levels outside 1..{spec.levels} in column {col.name!r}")
        A_lo = np.zeros((int_idx.size, M))
        A_hi = np.zeros((int_idx.size, M))
        lo_inf = k == 1
        hi_inf = k == spec.levels
        rows = np.arange(int_idx.size)
        A_lo[rows[~lo_inf], k[~lo_inf] - 2] = 1.0
        A_hi[rows[~hi_inf], k[~hi_inf] - 1] = 1.0
    else:
        dens_idx = np.nonzero(kind == EXACT)[0]
        int_idx = np.nonzero(kind == INTERVAL)[0]
        A_dens = bs.evaluate_matrix(spec, col.lower[dens_idx]) if dens_idx.size \
            else np.zeros((0, M))
        Ad_dens = bs.derivative_matrix(spec, col.lower[dens_idx]) if dens_idx.size \
            else np.zeros((0, M))
        lo = col.lower[int_idx]
        hi = col.upper[int_idx]
        lo_inf = ~np.isfinite(lo)
        hi_inf = ~np.isfinite(hi)
        A_lo = np.zeros((int_idx.size, M))
        A_hi = np.zeros((int_idx.size, M))
        if int_idx.size:
            A_lo[~lo_inf] = bs.evaluate_matrix(spec, lo[~lo_inf])
            A_hi[~hi_inf] = bs.evaluate_matrix(spec, hi[~hi_inf])

    n_clamped = 0
    if isinstance(spec, bs.Bernstein):
        vals = col.finite_values()
        n_clamped = int(np.sum((vals < spec.lo) | (vals > spec.hi)))
    return PreparedColumn(spec, dens_idx, A_dens, Ad_dens, int_idx,
                          A_lo, lo_inf, A_hi, hi_inf, miss_idx, n_clamped)


def constrain_batch(spec: bs.BasisSpec, gamma: np.ndarray) -> np.ndarray:
    """Vectorized cumulative-exponential map for a (K, M) batch."""
    gamma = np.atleast_2d(gamma)
    if isinstance(spec, (bs.Linear, bs.LogLinear)):
        return np.column_stack([gamma[:, 0], np.exp(gamma[:, 1])])
    out = gamma.copy()
    out[:, 1:] = np.exp(gamma[:, 1:])
    return np.cumsum(out, axis=1)


def interval_logprob(link: Link, lo, hi, lo_inf, hi_inf):
    """log(G(hi) - G(lo)) with +-inf bounds, evaluated stably in both tails."""
    lo = np.where(lo_inf, -np.inf, lo)
    hi = np.where(hi_inf, np.inf, hi)
    out = np.empty(np.broadcast(lo, hi).shape)

    only_hi = lo_inf & ~hi_inf
    only_lo = hi_inf & ~lo_inf
    both = ~lo_inf & ~hi_inf
    none = lo_inf & hi_inf
    if np.any(only_hi):
        out[only_hi] = link.log_cdf(hi[only_hi])
    if np.any(only_lo):
        out[only_lo] = link.log_survival(lo[only_lo])
    if np.any(none):
        out[none] = 0.0
    if np.any(both):
        l, u = lo[both], hi[both]
        use_surv = link.cdf(u) > 0.5
        lc_u, lc_l = link.log_cdf(u), link.log_cdf(l)
        ls_u, ls_l = link.log_survival(u), link.log_survival(l)
        with np.errstate(divide="ignore", invalid="ignore"):
            via_cdf = lc_u + np.log1p(-np.exp(np.minimum(lc_l - lc_u, 0.0)))
            via_surv = ls_l + np.log1p(-np.exp(np.minimum(ls_u - ls_l, 0.0)))
        v = np.where(use_surv, via_surv, via_cdf)
        out[both] = np.where(np.isnan(v), -np.inf, v)
    return out


class ShiftModelProblem:
    """Batched log-likelihood of G(h(y) - tau w - x'beta) over (gamma, tau, beta).

    With w=None no treatment shift is estimated (covariate marginals).
    """

    def __init__(self, w, outcome: ObservationColumn, link: Link,
                 spec: bs.BasisSpec, xmat: Optional[np.ndarray] = None):
        self.link = link
        self.spec = spec
        self.has_tau = w is not None
        self.prep = prepare_column(outcome, spec)
        if self.prep.miss_idx.size:
            keep = outcome.kind != MISSING
            warnings.warn(f"dropping {self.prep.miss_idx.size} rows with a missing outcome")
            outcome = ObservationColumn(outcome.name, outcome.lower[keep],
                                        outcome.upper[keep], outcome.kind[keep])
            w = w[keep] if self.has_tau else None
            xmat = xmat[keep] if xmat is not None else None
            self.prep = prepare_column(outcome, spec)
        self.n = len(outcome)
        self.w = np.zeros(self.n) if w is None else np.asarray(w, dtype=float)
        self.xmat = xmat
        self.m = bs.dimension(spec)
        self.n_beta = 0 if xmat is None else xmat.shape[1]
        self.n_params = self.m + int(self.has_tau) + self.n_beta

    def shift(self, tau: np.ndarray, beta: Optional[np.ndarray], idx) -> np.ndarray:
        # (K, n_idx) shift values tau w + x'beta
        s = tau[:, None] * self.w[idx][None, :]
        if self.n_beta:
            s = s + beta @ self.xmat[idx].T
        return s

    def loglik_batch(self, params: np.ndarray) -> np.ndarray:
        params = np.atleast_2d(np.asarray(params, dtype=float))
        K = params.shape[0]
        theta = constrain_batch(self.spec, params[:, : self.m])
        if self.has_tau:
            tau = params[:, self.m]
            beta = params[:, self.m + 1:] if self.n_beta else None
        else:
            tau = np.zeros(K)
            beta = params[:, self.m:] if self.n_beta else None
        ll = np.zeros(K)
        p = self.prep

        if p.dens_idx.size:
            h = theta @ p.A_dens.T                      # (K, n_d)
            hp = theta @ p.Ad_dens.T
            u = h - self.shift(tau, beta, p.dens_idx)
            with np.errstate(divide="ignore", invalid="ignore"):
                ll += np.sum(self.link.log_density(u) + np.log(hp), axis=1)
        if p.int_idx.size:
            s = self.shift(tau, beta, p.int_idx)
            lo = theta @ p.A_lo.T - s
            hi = theta @ p.A_hi.T - s
            lp = interval_logprob(self.link, lo, hi,
                                  np.broadcast_to(p.lo_inf, lo.shape),
                                  np.broadcast_to(p.hi_inf, hi.shape))
            ll += np.sum(lp, axis=1)
        return np.where(np.isfinite(ll), ll, -np.inf)


# --- marginal outcome model ---------------------------------------------------

@dataclass(frozen=True)
class MarginalOutcomeModel:
    """F_w(y) = G(h(y) - tau w) with monotone h."""

    link: Link
    basis: bs.BasisSpec
    coef: bs.MonotoneCoefficients
    tau: float

    def transformation(self, y):
        return bs.transformation(self.basis, self.coef.theta, y)

    def cdf(self, y, w):
        h = bs.transformation(self.basis, self.coef.theta, y)
        return self.link.cdf(h - self.tau * np.asarray(w))

    def latent_score(self, y, w):
        """h_J(y | w) = Phi^-1[G(h(y) - tau w)], the latent normal scale."""
        h = bs.transformation(self.basis, self.coef.theta, y)
        return to_normal_scale(self.link, h - self.tau * np.asarray(w))

    def latent_interval(self, lower, upper, w):
        """Latent-scale bounds for an interval observation (lower, upper]."""
        lo = np.asarray(lower, dtype=float)
        hi = np.asarray(upper, dtype=float)
        w = np.asarray(w)
        if isinstance(self.basis, bs.DiscreteStep):
            theta = self.coef.theta
            k = np.rint(lo).astype(int)
            zlo = np.where(k == 1, -np.inf,
                           theta[np.clip(k - 2, 0, None)] - self.tau * w)
            zhi = np.where(k == self.basis.levels, np.inf,
                           theta[np.clip(k - 1, 0, theta.size - 1)] - self.tau * w)
            if self.link is not PROBIT:
                zlo = np.where(np.isfinite(zlo), to_normal_scale(self.link, zlo), zlo)
                zhi = np.where(np.isfinite(zhi), to_normal_scale(self.link, zhi), zhi)
            return zlo, zhi
        zlo = np.where(np.isfinite(lo),
                       self.latent_score(np.where(np.isfinite(lo), lo, 0.0), w), -np.inf)
        zhi = np.where(np.isfinite(hi),
                       self.latent_score(np.where(np.isfinite(hi), hi, 0.0), w), np.inf)
        return zlo, zhi


def marginal_cdf(model: MarginalOutcomeModel, y, w):
    return model.cdf(y, w)


def latent_normal_score(model: MarginalOutcomeModel, y, w):
    return model.latent_score(y, w)


def probabilistic_index(tau: float) -> float:
    """P(Y_0 < Y_1) = Phi(tau / sqrt(2)) for a probit-scale shift."""
    return float(ndtr(tau / np.sqrt(2.0)))


def effect_label(link: Link, spec: bs.BasisSpec) -> str:
    """Reporting label of the treatment effect implied by (G, h)."""
    name = get_link(link).name
    if name == "probit":
        if isinstance(spec, bs.Linear):
            return "Cohen's d"
        return "latent normal shift"
    if name == "logit":
        if isinstance(spec, bs.DiscreteStep):
            return "log-odds ratio" if spec.levels == 2 else "log-odds ratio (proportional odds)"
        return "log-odds ratio"
    if name == "cloglog":
        return "log-hazard ratio"
    return "shift effect"


# --- starting values ----------------------------------------------------------

def _pseudo_values(col: ObservationColumn) -> np.ndarray:
    vals = np.where(col.kind == EXACT, col.lower,
                    np.where(np.isfinite(col.upper), 0.5 * (col.lower + col.upper),
                             col.lower))
    return vals[col.kind != MISSING]


def start_values(col: ObservationColumn, link: Link, spec: bs.BasisSpec) -> np.ndarray:
    """Unconstrained starting vector for one column's transformation."""
    vals = _pseudo_values(col)
    if isinstance(spec, (bs.Linear, bs.LogLinear)):
        v = np.log(vals) if isinstance(spec, bs.LogLinear) else vals
        sd = float(np.std(v))
        if sd <= 0:
            raise DegenerateDataError("outcome has zero variance")
        theta = np.array([-np.mean(v) / sd, 1.0 / sd])
        return bs.unconstrain(spec, theta)
    if isinstance(spec, bs.DiscreteStep):
        K = spec.levels
        k = np.rint(vals).astype(int)
        cum = np.array([np.mean(k <= level) for level in range(1, K)])
        cum = np.clip(cum, 0.01, 0.99)
        cum = np.maximum.accumulate(cum + 1e-6 * np.arange(K - 1))
        theta = link.quantile(np.clip(cum, 0.01, 0.995))
        theta = np.maximum.accumulate(theta) + 1e-6 * np.arange(K - 1)
        return bs.unconstrain(spec, theta)
    if isinstance(spec, bs.Bernstein):
        anchors = np.linspace(spec.lo, spec.hi, spec.order + 1)
        sorted_vals = np.sort(vals)
        ecdf = np.searchsorted(sorted_vals, anchors, side="right") / (vals.size + 1.0)
        ecdf = np.clip(ecdf, 0.005, 0.995)
        theta = np.asarray(link.quantile(ecdf), dtype=float)
        theta = np.maximum.accumulate(theta)
        theta += 1e-3 * np.arange(theta.size)  # enforce strict increase
        return bs.unconstrain(spec, theta)
    raise TypeError(f"unknown basis spec {spec!r}")


# --- fitting -------------------------------------------------------------------

@dataclass
class MarginalFit:
    """MLE summary for a shift transformation model."""

    model: MarginalOutcomeModel
    params: np.ndarray            # constrained (theta, tau[, beta])
    covariance: np.ndarray
    loglik: float
    tau_hat: float
    se_tau: float
    effect: str
    beta: Optional[np.ndarray] = None
    iterations: int = 0
    grad_norm: float = np.nan
    converged: bool = False
    covariance_pseudo_inverse: bool = False
    separation_flag: bool = False
    n: int = 0
    warnings: list = field(default_factory=list)

    def wald_ci(self, level: float = 0.95):
        z = float(ndtri(0.5 + level / 2.0))
        return self.tau_hat - z * self.se_tau, self.tau_hat + z * self.se_tau

    @property
    def p_value(self) -> float:
        if not np.isfinite(self.se_tau) or self.se_tau <= 0:
            return np.nan
        return float(2.0 * ndtr(-abs(self.tau_hat) / self.se_tau))


def _validate_marginal_inputs(w, outcome: ObservationColumn, spec: bs.BasisSpec):
    present = outcome.kind != MISSING
    if isinstance(spec, bs.DiscreteStep):
        k = np.rint(outcome.lower[present]).astype(int)
        if np.unique(k).size < 2:
            raise DegenerateDataError("only one outcome class present")
    else:
        if w is not None:
            w = np.asarray(w)
            for arm in (0, 1):
                if np.sum(present & (w == arm)) < 2:
                    raise DegenerateDataError(f"fewer than 2 observations in arm {arm}")
        vals = outcome.lower[present & (outcome.kind == EXACT)]
        if vals.size and np.ptp(vals) == 0 and not outcome.has_censoring:
            raise DegenerateDataError("outcome has zero variance")


def fit_shift_model(w, outcome: ObservationColumn, link, spec: bs.BasisSpec,
                    xmat: Optional[np.ndarray] = None, maxiter: int = 500,
                    label: Optional[str] = None) -> MarginalFit:
    """MLE of G(h(y) - tau w - x'beta); xmat=None gives the marginal model."""
    link = get_link(link)
    _validate_marginal_inputs(w, outcome, spec)
    problem = ShiftModelProblem(w if w is None else np.asarray(w),
                                outcome, link, spec, xmat)
    x0 = np.concatenate([start_values(outcome, link, spec),
                         [0.0] if problem.has_tau else [],
                         np.zeros(problem.n_beta)])
    opt = _optim.maximize(problem.loglik_batch, x0, maxiter=maxiter)
    gnorm_tol = 1e-5 * max(1.0, problem.n)
    converged = np.isfinite(opt.loglik) and opt.grad_norm < gnorm_tol
    if not np.isfinite(opt.loglik):
        raise NonConvergenceError(
            f"marginal fit failed (grad norm {opt.grad_norm:.2e}, {opt.iterations} iterations)")

    cov_u, pseudo = _optim.covariance_from_hessian(problem.loglik_batch, opt.x)
    m = problem.m
    gamma_hat = opt.x[:m]
    theta_hat = bs.constrain(spec, gamma_hat)
    # delta method from the unconstrained to the monotone parameterization
    jac = np.eye(opt.x.size)
    jac[:m, :m] = _constrain_jacobian(spec, gamma_hat)
    cov = jac @ cov_u @ jac.T

    if problem.has_tau:
        tau_hat = float(opt.x[m])
        se_tau = float(np.sqrt(max(cov[m, m], 0.0)))
        beta = opt.x[m + 1:].copy() if problem.n_beta else None
    else:
        tau_hat, se_tau = 0.0, np.nan
        beta = opt.x[m:].copy() if problem.n_beta else None
    coef = bs.MonotoneCoefficients(gamma=gamma_hat, theta=theta_hat)
    model = MarginalOutcomeModel(link=link, basis=spec, coef=coef, tau=tau_hat)
    fit = MarginalFit(
        model=model,
        params=np.concatenate([theta_hat,
                               [tau_hat] if problem.has_tau else [],
                               beta if beta is not None else []]),
        covariance=cov, loglik=opt.loglik, tau_hat=tau_hat, se_tau=se_tau,
        effect=label or effect_label(link, spec), beta=beta,
        iterations=opt.iterations, grad_norm=opt.grad_norm, converged=converged,
        covariance_pseudo_inverse=pseudo,
        separation_flag=abs(tau_hat) > SEPARATION_BOUND, n=problem.n)
    if fit.separation_flag:
        fit.warnings.append(f"|tau| exceeds {SEPARATION_BOUND}; possible separation")
    if not converged:
        fit.warnings.append(
            f"gradient norm {opt.grad_norm:.2e} above {gnorm_tol:.2e} after {opt.iterations} iterations")
    return fit


def _constrain_jacobian(spec: bs.BasisSpec, gamma: np.ndarray) -> np.ndarray:
    """d theta / d gamma for the cumulative-exponential map."""
    m = gamma.size
    if isinstance(spec, (bs.Linear, bs.LogLinear)):
        return np.diag([1.0, np.exp(gamma[1])])
    J = np.zeros((m, m))
    J[:, 0] = 1.0
    for k in range(1, m):
        J[k:, k] = np.exp(gamma[k])
    return J


def fit_marginal(data, link, spec: bs.BasisSpec, maxiter: int = 500):
    """Unadjusted marginal MLE. `data` is a Dataset or a (w, outcome) pair.

    Returns (MarginalOutcomeModel, MarginalFit).
    """
    if isinstance(data, Dataset):
        w, outcome = data.w, data.outcome
    else:
        w, outcome = data
    fit = fit_shift_model(w, outcome, link, spec, xmat=None, maxiter=maxiter)
    return fit.model, fit
