"""Joint Gaussian-copula model over covariates and outcome, and its MLE.

Coordinates are ordered covariates 1..J-1 (probit marginals) followed by the
outcome (marginal shift model with link G). Exact continuous coordinates
contribute the latent normal density with transformation Jacobians; discrete,
censored, or interval coordinates contribute conditional normal rectangle
probabilities; missing coordinates are marginalized out.

Also provides the conditional linear transformation model (the classical
covariate-adjusted comparator whose treatment effect is conditional, not
marginal) and link-scale ECDF diagnostics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from . import basis as bs
from . import copula as cp
from . import _optim
from .links import Link, PROBIT, get_link, to_normal_scale
from .marginal import (
    EXACT, INTERVAL, MISSING,
    Dataset, MarginalFit, MarginalOutcomeModel, ObservationColumn,
    NonConvergenceError, constrain_batch, effect_label, fit_shift_model,
    interval_logprob, prepare_column, _constrain_jacobian,
)

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
DENS, INT = 0, 1


@dataclass(frozen=True)
class JointModel:
    """Covariate marginals (probit), outcome marginal, and copula structure."""

    covariate_specs: tuple
    covariate_coefs: tuple          # MonotoneCoefficients per covariate
    outcome: MarginalOutcomeModel
    copula: cp.CopulaStructure

    def __post_init__(self):
        if self.copula.dim != len(self.covariate_specs) + 1:
            raise ValueError("copula dimension must equal covariate count + 1")

    @property
    def dim(self) -> int:
        return self.copula.dim


@dataclass
class ThetaFull:
    """Concatenated parameter vector with a named block index map."""

    names: list
    sizes: list
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.size != sum(self.sizes):
            raise ValueError("value length does not match block sizes")

    @classmethod
    def pack(cls, blocks: Sequence[tuple]) -> "ThetaFull":
        names = [n for n, _ in blocks]
        vals = [np.atleast_1d(np.asarray(v, dtype=float)) for _, v in blocks]
        return cls(names=names, sizes=[v.size for v in vals],
                   values=np.concatenate(vals))

    def slices(self) -> dict:
        out, pos = {}, 0
        for name, size in zip(self.names, self.sizes):
            out[name] = slice(pos, pos + size)
            pos += size
        return out

    def block(self, name: str) -> np.ndarray:
        return self.values[self.slices()[name]]

    def unpack(self) -> list:
        sl = self.slices()
        return [(name, self.values[sl[name]]) for name in self.names]


@dataclass
class JointFitResult:
    """NAMI estimate: full parameter vector, covariance, and effect summaries."""

    theta: ThetaFull
    model: JointModel
    covariance: Optional[np.ndarray]
    loglik: float
    tau_hat: float
    se_tau: float
    r_squared: float
    prognostic_strengths: np.ndarray
    effect: str
    iterations: int = 0
    grad_norm: float = np.nan
    converged: bool = False
    covariance_pseudo_inverse: bool = False
    n: int = 0
    n_clamped: int = 0
    warnings: list = field(default_factory=list)

    def wald_ci(self, level: float = 0.95):
        z = float(ndtri(0.5 + level / 2.0))
        return self.tau_hat - z * self.se_tau, self.tau_hat + z * self.se_tau

    @property
    def p_value(self) -> float:
        if not np.isfinite(self.se_tau) or self.se_tau <= 0:
            return np.nan
        return float(2.0 * ndtr(-abs(self.tau_hat) / self.se_tau))


# --- batched joint likelihood -------------------------------------------------

class _Coord:
    """Basis matrices of one coordinate restricted to one pattern group."""

    def __init__(self, spec, col: ObservationColumn, rows: np.ndarray,
                 status: int, is_outcome: bool, link: Link):
        self.spec = spec
        self.status = status
        self.is_outcome = is_outcome
        self.link = link
        sub = ObservationColumn(col.name, col.lower[rows], col.upper[rows], col.kind[rows])
        prep = prepare_column(sub, spec)
        if status == DENS:
            self.A = prep.A_dens
            self.Ad = prep.Ad_dens
        else:
            self.A_lo, self.A_hi = prep.A_lo, prep.A_hi
            self.lo_inf, self.hi_inf = prep.lo_inf, prep.hi_inf

    def z_dens(self, theta: np.ndarray, shift: Optional[np.ndarray]):
        """Latent values and log Jacobians for exact rows, shape (K, n)."""
        h = theta @ self.A.T
        hp = theta @ self.Ad.T
        with np.errstate(divide="ignore", invalid="ignore"):
            log_hp = np.log(hp)
        if not self.is_outcome:
            return h, log_hp
        u = h - shift
        z = to_normal_scale(self.link, u)
        log_jac = self.link.log_density(u) + log_hp + 0.5 * z * z + LOG_SQRT_2PI
        return z, log_jac

    def bounds_int(self, theta: np.ndarray, shift: Optional[np.ndarray]):
        """Latent-scale interval bounds, shape (K, n) with inf masks."""
        lo = theta @ self.A_lo.T
        hi = theta @ self.A_hi.T
        if self.is_outcome:
            lo = lo - shift
            hi = hi - shift
            if self.link is not PROBIT:
                lo = np.where(self.lo_inf, -np.inf, to_normal_scale(self.link, lo))
                hi = np.where(self.hi_inf, np.inf, to_normal_scale(self.link, hi))
        lo = np.where(self.lo_inf, -np.inf, lo)
        hi = np.where(self.hi_inf, np.inf, hi)
        return lo, hi


class _Group:
    def __init__(self, rows, keep, dens_pos, int_pos, coords, w):
        self.rows = rows
        self.keep = keep          # coordinate indices kept (not missing)
        self.dens_pos = dens_pos  # positions within `keep` carrying densities
        self.int_pos = int_pos    # positions within `keep` carrying intervals
        self.coords = coords      # _Coord per kept coordinate
        self.w = w


class _FastExactProbitPath:
    """Gram-matrix evaluation of the all-exact, probit-outcome likelihood.

    Every latent column is linear in one coefficient block, so the quadratic
    form collapses to sum_rows |Omega z|^2 = <Omega'Omega, Z'Z> with Z'Z
    assembled from precomputed cross-Gram blocks. Finite-difference batches
    perturb at most two coefficient blocks per point, so the quadratic form
    is updated from a shared reference instead of recomputed.
    """

    def __init__(self, problem: "JointProblem"):
        data = problem.data
        self.problem = problem
        self.J = problem.J
        self.n = data.n
        designs, self.jac_blocks = [], []
        cols = []
        for j, spec in enumerate(problem.covariate_specs):
            vals = data.covariates[j].lower
            designs.append(bs.evaluate_matrix(spec, vals))
            self.jac_blocks.append((spec, bs.derivative_matrix(spec, vals)))
            cols.append(np.arange(problem.n_params)[problem.slices[f"x{j + 1}"]])
        y = data.outcome.lower
        A_y = bs.evaluate_matrix(problem.outcome_spec, y)
        designs.append(np.column_stack([A_y, -data.w.astype(float)]))
        self.jac_blocks.append((problem.outcome_spec,
                                bs.derivative_matrix(problem.outcome_spec, y)))
        cols.append(np.concatenate([
            np.arange(problem.n_params)[problem.slices["outcome"]],
            np.arange(problem.n_params)[problem.slices["tau"]]]))
        self.block_cols = cols                  # raw parameter columns per block
        self.specs = [*problem.covariate_specs, problem.outcome_spec]
        self.sizes = [d.shape[1] for d in designs]
        mmax = max(self.sizes)
        B = len(designs)
        self.gram = np.zeros((B, B, mmax, mmax))
        for i in range(B):
            for j in range(B):
                g = designs[i].T @ designs[j]
                self.gram[i, j, : g.shape[0], : g.shape[1]] = g
        self.mmax = mmax

    @staticmethod
    def _mode_split(sub: np.ndarray):
        """Rows equal to the batch's dominant row (finite-difference batches
        repeat the base point in most coordinates bit-identically)."""
        first = np.all(sub == sub[0], axis=1)
        last = np.all(sub == sub[-1], axis=1)
        return (first, sub[0]) if first.sum() >= last.sum() else (last, sub[-1])

    @staticmethod
    def _dedup_rows(rows: np.ndarray, ref: np.ndarray):
        """Collapse rows that differ from `ref` in a single coordinate; such
        rows dominate finite-difference batches and repeat heavily."""
        diff = rows != ref[None, :]
        single = diff.sum(axis=1) == 1
        inverse = np.empty(rows.shape[0], dtype=int)
        chunks = []
        base = 0
        sidx = np.nonzero(single)[0]
        if sidx.size:
            coord = np.argmax(diff[sidx], axis=1)
            pairs = np.column_stack([coord.astype(float), rows[sidx, coord]])
            u, inv = np.unique(pairs, axis=0, return_inverse=True)
            urows = np.repeat(ref[None, :], u.shape[0], axis=0)
            urows[np.arange(u.shape[0]), u[:, 0].astype(int)] = u[:, 1]
            chunks.append(urows)
            inverse[sidx] = inv.ravel()
            base = u.shape[0]
        midx = np.nonzero(~single)[0]
        if midx.size:
            chunks.append(rows[midx])
            inverse[midx] = base + np.arange(midx.size)
        return np.vstack(chunks), inverse

    def _block_coeff(self, b: int, raw: np.ndarray) -> np.ndarray:
        """Gram-block coefficients from raw parameters (outcome block
        appends the treatment effect for its -w design column)."""
        if b < self.J - 1:
            return constrain_batch(self.specs[b], raw)
        theta = constrain_batch(self.specs[b], raw[:, :-1])
        return np.column_stack([theta, raw[:, -1]])

    def _gram_quad_full(self, C: list) -> np.ndarray:
        """S[k] = Z'Z from per-block coefficients, via per-block GEMMs."""
        K = C[0].shape[0]
        J, mm = self.J, self.mmax
        T = np.zeros((K, J, mm))
        for b in range(J):
            T[:, b, : self.sizes[b]] = C[b]
        W = np.empty((K, J, J, mm))
        for j in range(J):
            Gj = self.gram[:, j].reshape(J * mm, mm)
            W[:, j] = (T[:, j] @ Gj.T).reshape(K, J, mm)
        return np.einsum("kim,kjim->kij", T, W)

    def _jac_sum(self, b: int, coeff: np.ndarray) -> np.ndarray:
        """Sum of log transformation derivatives for one block."""
        spec, Ad = self.jac_blocks[b]
        theta = coeff[:, :-1] if b == self.J - 1 else coeff
        if isinstance(spec, bs.Linear):
            return self.n * np.log(theta[:, 1])
        hp = theta @ Ad.T
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.sum(np.log(hp), axis=1)

    def loglik_batch(self, X: np.ndarray) -> np.ndarray:
        prob = self.problem
        X = np.atleast_2d(np.asarray(X, dtype=float))
        K = X.shape[0]
        J = self.J
        lam = X[:, prob.slices["lambda"]]
        lam_same, lam_ref = self._mode_split(lam)

        # per-block references and difference masks
        refs, diff = [], np.zeros((K, J), dtype=bool)
        for b in range(J):
            same_b, ref_b = self._mode_split(X[:, self.block_cols[b]])
            refs.append(ref_b)
            diff[:, b] = ~same_b
        ndiff = diff.sum(axis=1)
        delta_rows = ndiff <= 2
        full_rows = np.nonzero(~delta_rows)[0]

        c_ref = [self._block_coeff(b, refs[b][None, :])[0] for b in range(J)]
        S_ref = self._gram_quad_full([c[None, :] for c in c_ref])[0]
        omega_ref = cp.omega_batch(J, lam_ref[None, :])[0]
        psi_ref = omega_ref.T @ omega_ref
        logdiag_ref = float(np.sum(np.log(np.diag(omega_ref))))
        quad_ref = float(np.sum(psi_ref * S_ref))

        logdiag = np.full(K, logdiag_ref)
        base_quad = np.full(K, quad_ref)           # <Psi_k, S_ref>
        psi_lookup = np.full(K, -1, dtype=int)     # index into psi_u, -1 = reference
        psi_u = None
        lam_diff_idx = np.nonzero(~lam_same)[0]
        if lam_diff_idx.size:
            uniq, inv = self._dedup_rows(lam[lam_diff_idx], lam_ref)
            omega_u = cp.omega_batch(J, uniq)
            logdiag[lam_diff_idx] = np.sum(
                np.log(np.diagonal(omega_u, axis1=1, axis2=2)), axis=1)[inv]
            OS = omega_u @ S_ref
            base_quad[lam_diff_idx] = np.einsum("kij,kij->k", omega_u, OS)[inv]
            psi_u = np.matmul(np.transpose(omega_u, (0, 2, 1)), omega_u)
            psi_lookup[lam_diff_idx] = inv

        def psi_rows(b: int, rows: np.ndarray) -> np.ndarray:
            """Psi[b, :] per row, honoring per-row lambda."""
            out = np.repeat(psi_ref[b][None, :], rows.size, axis=0)
            if psi_u is not None:
                lk = psi_lookup[rows]
                has = lk >= 0
                if np.any(has):
                    out[has] = psi_u[lk[has], b, :]
            return out

        # quadratic-form deltas from perturbed blocks, plus log Jacobians
        quad_delta = np.zeros(K)
        R = []       # R[b][j] = gram[b, j] c_ref[j], for the linear delta term
        for b in range(J):
            Rb = np.empty((J, self.sizes[b]))
            for j in range(J):
                Rb[j] = self.gram[b, j, : self.sizes[b], : self.sizes[j]] @ c_ref[j]
            R.append(Rb)
        jac_ref = [float(self._jac_sum(b, c_ref[b][None, :])[0]) for b in range(J)]

        dc_store = [None] * J
        dc_index = [None] * J
        for b in range(J):
            rows_b = np.nonzero(delta_rows & diff[:, b])[0]
            if rows_b.size == 0:
                continue
            c_new = self._block_coeff(b, X[np.ix_(rows_b, self.block_cols[b])])
            dc = c_new - c_ref[b][None, :]
            dc_store[b] = dc
            idx_map = np.full(K, -1, dtype=int)
            idx_map[rows_b] = np.arange(rows_b.size)
            dc_index[b] = idx_map
            v = dc @ R[b].T                                    # (n_b, J)
            Gbb = self.gram[b, b, : self.sizes[b], : self.sizes[b]]
            wq = np.einsum("km,mn,kn->k", dc, Gbb, dc)
            prows = psi_rows(b, rows_b)
            quad_delta[rows_b] += 2.0 * np.sum(prows * v, axis=1) + prows[:, b] * wq

        # cross term for points perturbing two distinct blocks
        two_idx = np.nonzero(delta_rows & (ndiff == 2))[0]
        if two_idx.size:
            b1 = diff[two_idx].argmax(axis=1)
            b2 = (J - 1) - diff[two_idx][:, ::-1].argmax(axis=1)
            for key in np.unique(np.column_stack([b1, b2]), axis=0):
                kb1, kb2 = int(key[0]), int(key[1])
                sel = two_idx[(b1 == kb1) & (b2 == kb2)]
                d1 = dc_store[kb1][dc_index[kb1][sel]]
                d2 = dc_store[kb2][dc_index[kb2][sel]]
                G12 = self.gram[kb1, kb2, : self.sizes[kb1], : self.sizes[kb2]]
                cross = np.einsum("km,mn,kn->k", d1, G12, d2)
                pr = psi_rows(kb1, sel)
                quad_delta[sel] += 2.0 * pr[:, kb2] * cross

        # log Jacobians: reference value plus per-block recomputation where needed
        jac = np.full(K, sum(jac_ref))
        for b in range(J):
            rows_b = np.nonzero(diff[:, b])[0]
            if rows_b.size == 0:
                continue
            coeff = self._block_coeff(b, X[np.ix_(rows_b, self.block_cols[b])])
            jac[rows_b] += self._jac_sum(b, coeff) - jac_ref[b]

        quad = base_quad + quad_delta

        # arbitrary points (line-search iterates etc.): recompute outright
        if full_rows.size:
            C = [self._block_coeff(b, X[np.ix_(full_rows, self.block_cols[b])])
                 for b in range(J)]
            S_full = self._gram_quad_full(C)
            lam_f = lam[full_rows]
            omega_f = cp.omega_batch(J, lam_f)
            psi_f = np.matmul(np.transpose(omega_f, (0, 2, 1)), omega_f)
            quad[full_rows] = np.einsum("kij,kij->k", psi_f, S_full)
            logdiag[full_rows] = np.sum(
                np.log(np.diagonal(omega_f, axis1=1, axis2=2)), axis=1)
            jac[full_rows] = sum(self._jac_sum(b, C[b]) for b in range(J))

        ll = (self.n * logdiag - 0.5 * quad
              - self.n * J * LOG_SQRT_2PI + jac)
        return np.where(np.isfinite(ll), ll, -np.inf)


class JointProblem:
    """Batched joint log-likelihood over the unconstrained parameter vector."""

    def __init__(self, data: Dataset, covariate_specs, outcome_spec, link,
                 qmc_points: int = cp.DEFAULT_QMC_POINTS):
        self.data = data
        self.link = get_link(link)
        self.covariate_specs = list(covariate_specs)
        self.outcome_spec = outcome_spec
        self.J = len(covariate_specs) + 1
        self.qmc_points = qmc_points
        self.n_dropped = 0

        cols = [*data.covariates, data.outcome]
        specs = [*self.covariate_specs, outcome_spec]
        status = np.empty((data.n, self.J), dtype=np.int8)
        for j, (col, spec) in enumerate(zip(cols, specs)):
            discrete = isinstance(spec, bs.DiscreteStep)
            s = np.where(col.kind == MISSING, 2,
                         np.where((col.kind == INTERVAL) | discrete, INT, DENS))
            status[:, j] = s

        all_missing = np.all(status == 2, axis=1)
        if np.any(all_missing):
            self.n_dropped = int(all_missing.sum())
            warnings.warn(f"skipping {self.n_dropped} rows with no observed coordinates")

        self.groups = []
        usable = np.nonzero(~all_missing)[0]
        patterns = {}
        for i in usable:
            patterns.setdefault(tuple(status[i]), []).append(i)
        for pat, rows in patterns.items():
            rows = np.asarray(rows, dtype=int)
            keep = np.array([j for j in range(self.J) if pat[j] != 2], dtype=int)
            dens_pos = np.array([p for p, j in enumerate(keep) if pat[j] == DENS], dtype=int)
            int_pos = np.array([p for p, j in enumerate(keep) if pat[j] == INT], dtype=int)
            coords = [
                _Coord(specs[j], cols[j], rows, pat[j],
                       is_outcome=(j == self.J - 1), link=self.link)
                for j in keep
            ]
            self.groups.append(_Group(rows, keep, dens_pos, int_pos, coords,
                                      data.w[rows].astype(float)))

        # parameter layout: covariate blocks, outcome block, tau, lambda
        self.block_sizes = [bs.dimension(s) for s in self.covariate_specs]
        self.m_out = bs.dimension(outcome_spec)
        self.n_lam = self.J * (self.J - 1) // 2
        self.n_params = sum(self.block_sizes) + self.m_out + 1 + self.n_lam
        self.slices = {}
        pos = 0
        for j, m in enumerate(self.block_sizes):
            self.slices[f"x{j + 1}"] = slice(pos, pos + m)
            pos += m
        self.slices["outcome"] = slice(pos, pos + self.m_out)
        pos += self.m_out
        self.slices["tau"] = slice(pos, pos + 1)
        pos += 1
        self.slices["lambda"] = slice(pos, pos + self.n_lam)
        self.n_clamped = sum(prepare_column(c, s).n_clamped
                             for c, s in zip(cols, specs))

        self._fast = None
        if (len(self.groups) == 1 and self.groups[0].int_pos.size == 0
                and self.groups[0].keep.size == self.J
                and self.link is PROBIT and self.n_dropped == 0):
            self._fast = _FastExactProbitPath(self)

    # -- parameter handling

    def unpack(self, X: np.ndarray):
        X = np.atleast_2d(X)
        thetas = [constrain_batch(s, X[:, self.slices[f"x{j + 1}"]])
                  for j, s in enumerate(self.covariate_specs)]
        theta_y = constrain_batch(self.outcome_spec, X[:, self.slices["outcome"]])
        tau = X[:, self.slices["tau"]][:, 0]
        lam = X[:, self.slices["lambda"]]
        return thetas, theta_y, tau, lam

    def block_names(self):
        return [f"x{j + 1}" for j in range(self.J - 1)] + ["outcome", "tau", "lambda"]

    # -- likelihood

    def loglik_batch(self, X: np.ndarray) -> np.ndarray:
        if self._fast is not None:
            return self._fast.loglik_batch(X)
        return self.loglik_batch_generic(X)

    def loglik_batch_generic(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        K = X.shape[0]
        thetas, theta_y, tau, lam = self.unpack(X)
        theta_by_coord = {**{j: thetas[j] for j in range(self.J - 1)},
                          self.J - 1: theta_y}
        omega = cp.omega_batch(self.J, lam) if self.n_lam else np.ones((K, 1, 1))
        sigma = None
        ll = np.zeros(K)

        for g in self.groups:
            shift = tau[:, None] * g.w[None, :]
            zs, ljs, bounds = {}, {}, {}
            for p, j in enumerate(g.keep):
                coord = g.coords[p]
                th = theta_by_coord[j]
                s = shift if coord.is_outcome else None
                if coord.status == DENS:
                    zs[p], ljs[p] = coord.z_dens(th, s)
                else:
                    bounds[p] = coord.bounds_int(th, s)

            e, i = g.dens_pos.size, g.int_pos.size
            n = g.rows.size
            contrib = np.zeros((K, n))

            if e:
                zE = np.stack([zs[p] for p in g.dens_pos], axis=2)  # (K, n, e)
                contrib += sum(ljs[p] for p in g.dens_pos)
                if e == self.J:
                    t = np.einsum("kij,knj->kni", omega, zE)
                    logdiag = np.sum(np.log(np.diagonal(omega, axis1=1, axis2=2)), axis=1)
                    contrib += (-0.5 * np.sum(t * t, axis=2)
                                - self.J * LOG_SQRT_2PI + logdiag[:, None])
                else:
                    if sigma is None:
                        sigma = cp.sigma_batch(omega)
                    SEE = sigma[:, g.keep[g.dens_pos], :][:, :, g.keep[g.dens_pos]]
                    L = np.linalg.cholesky(SEE)
                    t = np.linalg.solve(L, np.transpose(zE, (0, 2, 1)))  # (K, e, n)
                    logdet = np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
                    contrib += (-0.5 * np.sum(t * t, axis=1)
                                - e * LOG_SQRT_2PI - logdet[:, None])

            if i:
                if sigma is None:
                    sigma = cp.sigma_batch(omega)
                keepE = g.keep[g.dens_pos]
                keepI = g.keep[g.int_pos]
                SII = sigma[:, keepI, :][:, :, keepI]
                lo = np.stack([bounds[p][0] for p in g.int_pos], axis=2)  # (K, n, i)
                hi = np.stack([bounds[p][1] for p in g.int_pos], axis=2)
                if e:
                    SEE = sigma[:, keepE, :][:, :, keepE]
                    SEI = sigma[:, keepE, :][:, :, keepI]
                    B = np.linalg.solve(SEE, SEI)                  # (K, e, i)
                    mu = np.einsum("kne,kei->kni", zE, B)
                    C = SII - np.einsum("kei,kej->kij", SEI, B)
                else:
                    mu = np.zeros((K, n, i))
                    C = SII
                if i == 1:
                    sd = np.sqrt(np.clip(C[:, 0, 0], 1e-300, None))[:, None]
                    zlo = (lo[:, :, 0] - mu[:, :, 0]) / sd
                    zhi = (hi[:, :, 0] - mu[:, :, 0]) / sd
                    contrib += interval_logprob(
                        PROBIT, zlo, zhi, np.isneginf(zlo), np.isposinf(zhi))
                else:
                    for k in range(K):
                        for r in range(n):
                            p = cp.mvn_rectangle(C[k], lo[k, r] - mu[k, r],
                                                 hi[k, r] - mu[k, r],
                                                 points=self.qmc_points)
                            contrib[k, r] += np.log(max(p, 1e-300))
            ll += np.sum(contrib, axis=1)
        return np.where(np.isfinite(ll), ll, -np.inf)

    def model_from_params(self, x: np.ndarray) -> JointModel:
        thetas, theta_y, tau, lam = self.unpack(x[None, :])
        coefs = tuple(
            bs.MonotoneCoefficients(gamma=np.asarray(x[self.slices[f"x{j + 1}"]]),
                                    theta=thetas[j][0])
            for j in range(self.J - 1))
        out_coef = bs.MonotoneCoefficients(gamma=np.asarray(x[self.slices["outcome"]]),
                                           theta=theta_y[0])
        outcome = MarginalOutcomeModel(link=self.link, basis=self.outcome_spec,
                                       coef=out_coef, tau=float(tau[0]))
        return JointModel(covariate_specs=tuple(self.covariate_specs),
                          covariate_coefs=coefs, outcome=outcome,
                          copula=cp.CopulaStructure(self.J, lam[0]))


def joint_loglik(model: JointModel, data: Dataset,
                 qmc_points: int = cp.DEFAULT_QMC_POINTS) -> float:
    """Joint log-likelihood of a fitted model on a dataset."""
    problem = JointProblem(data, model.covariate_specs, model.outcome.basis,
                           model.outcome.link, qmc_points=qmc_points)
    x = _pack_unconstrained(problem, model)
    return float(problem.loglik_batch(x[None, :])[0])


def _pack_unconstrained(problem: JointProblem, model: JointModel) -> np.ndarray:
    x = np.empty(problem.n_params)
    for j, (spec, coef) in enumerate(zip(model.covariate_specs, model.covariate_coefs)):
        x[problem.slices[f"x{j + 1}"]] = bs.unconstrain(spec, coef.theta)
    x[problem.slices["outcome"]] = bs.unconstrain(model.outcome.basis,
                                                  model.outcome.coef.theta)
    x[problem.slices["tau"]] = model.outcome.tau
    x[problem.slices["lambda"]] = model.copula.lam
    return x


# --- NAMI fitting ---------------------------------------------------------------

def _latent_correlation_start(data: Dataset, marginal_models, outcome_model) -> Optional[np.ndarray]:
    """Lambda vector matching the empirical correlation of the marginal-fit
    latent scores, computed on rows where every coordinate is exact."""
    mask = data.outcome.kind == EXACT
    for c in data.covariates:
        mask &= c.kind == EXACT
    J = len(data.covariates) + 1
    if isinstance(outcome_model.basis, bs.DiscreteStep) or mask.sum() < J + 2:
        return None
    cols = [bs.transformation(m.basis, m.coef.theta, c.lower[mask])
            for m, c in zip(marginal_models, data.covariates)]
    if any(isinstance(m.basis, bs.DiscreteStep) for m in marginal_models):
        return None
    cols.append(outcome_model.latent_score(data.outcome.lower[mask], data.w[mask]))
    Z = np.column_stack(cols)
    R = np.corrcoef(Z, rowvar=False)
    # shrink slightly toward independence so the Cholesky always exists
    R = 0.98 * R + 0.02 * np.eye(J)
    try:
        return cp.lambda_from_correlation(R)
    except np.linalg.LinAlgError:
        return None


def fit_nami(data: Dataset, covariate_specs, outcome_spec, link,
             maxiter: int = 500, freeze_marginals: bool = False,
             min_n_factor: float = 10.0,
             qmc_points: int = cp.DEFAULT_QMC_POINTS) -> JointFitResult:
    """Joint MLE: marginal fits for starting values, a copula-only stage, then
    simultaneous optimization of the full parameter vector."""
    if not data.covariates:
        raise ValueError("nami requires >=1 covariate")
    link = get_link(link)
    problem = JointProblem(data, covariate_specs, outcome_spec, link,
                           qmc_points=qmc_points)
    warns = []
    if data.n < min_n_factor * problem.n_params:
        warns.append(
            f"N = {data.n} below {min_n_factor:g} x dim(theta) = "
            f"{min_n_factor * problem.n_params:g}; inference may be liberal")
        warnings.warn(warns[-1])

    # stage 1: marginal fits
    x0 = np.zeros(problem.n_params)
    marginal_models = []
    for j, spec in enumerate(covariate_specs):
        mfit = fit_shift_model(None, data.covariates[j], PROBIT, spec,
                               maxiter=maxiter)
        marginal_models.append(mfit.model)
        x0[problem.slices[f"x{j + 1}"]] = mfit.model.coef.gamma
    out_fit = fit_shift_model(data.w, data.outcome, link, outcome_spec,
                              maxiter=maxiter)
    x0[problem.slices["outcome"]] = out_fit.model.coef.gamma
    x0[problem.slices["tau"]] = out_fit.tau_hat

    # stage 2: copula parameters only, warm-started at the latent correlation
    lam_warm = _latent_correlation_start(data, marginal_models, out_fit.model)
    if lam_warm is not None and np.all(np.isfinite(lam_warm)):
        x0[problem.slices["lambda"]] = lam_warm
    lam_idx = np.arange(problem.n_params)[problem.slices["lambda"]]
    opt_lam = _optim.maximize(problem.loglik_batch, x0, maxiter=maxiter, free=lam_idx)

    # stage 3: everything free
    if freeze_marginals:
        free = np.concatenate([np.arange(problem.n_params)[problem.slices["tau"]], lam_idx])
        opt = _optim.maximize(problem.loglik_batch, opt_lam.x, maxiter=maxiter, free=free)
        hess_idx = free
    else:
        opt = _optim.maximize(problem.loglik_batch, opt_lam.x, maxiter=maxiter)
        hess_idx = np.arange(problem.n_params)

    gnorm_tol = 1e-5 * max(1.0, data.n)
    converged = np.isfinite(opt.loglik) and opt.grad_norm < gnorm_tol
    if not np.isfinite(opt.loglik):
        raise NonConvergenceError(
            f"joint fit failed (grad norm {opt.grad_norm:.2e}, {opt.iterations} iterations)")
    if not converged:
        warns.append(f"gradient norm {opt.grad_norm:.2e} above {gnorm_tol:.2e} "
                     f"after {opt.iterations} iterations")

    # observed Fisher in the constrained parameterization via the block Jacobian
    def f_sub(Xs):
        full = np.repeat(opt.x[None, :], Xs.shape[0], axis=0)
        full[:, hess_idx] = Xs
        return problem.loglik_batch(full)

    cov_u, pseudo = _optim.covariance_from_hessian(f_sub, opt.x[hess_idx])
    jac = np.eye(problem.n_params)
    for j, spec in enumerate(covariate_specs):
        sl = problem.slices[f"x{j + 1}"]
        jac[sl, sl] = _constrain_jacobian(spec, opt.x[sl])
    sl = problem.slices["outcome"]
    jac[sl, sl] = _constrain_jacobian(outcome_spec, opt.x[sl])
    jac_sub = jac[np.ix_(hess_idx, hess_idx)]
    cov_sub = jac_sub @ cov_u @ jac_sub.T
    covariance = np.zeros((problem.n_params, problem.n_params))
    covariance[np.ix_(hess_idx, hess_idx)] = cov_sub

    model = problem.model_from_params(opt.x)
    tau_hat = float(model.outcome.tau)
    itau = problem.slices["tau"].start
    se_tau = float(np.sqrt(max(covariance[itau, itau], 0.0)))

    omega = cp.lambda_to_omega(model.copula)
    r2 = float(1.0 - omega[-1, -1] ** (-2))
    strengths = np.abs(omega[-1, :-1])

    blocks = [(name, opt.x[problem.slices[name]]) for name in problem.block_names()]
    theta_blocks = []
    for j, spec in enumerate(covariate_specs):
        theta_blocks.append((f"x{j + 1}", model.covariate_coefs[j].theta))
    theta_blocks += [("outcome", model.outcome.coef.theta),
                     ("tau", [tau_hat]), ("lambda", model.copula.lam)]
    theta = ThetaFull.pack(theta_blocks)

    res = JointFitResult(
        theta=theta, model=model, covariance=covariance, loglik=opt.loglik,
        tau_hat=tau_hat, se_tau=se_tau, r_squared=r2,
        prognostic_strengths=strengths,
        effect=effect_label(link, outcome_spec),
        iterations=opt.iterations, grad_norm=opt.grad_norm, converged=converged,
        covariance_pseudo_inverse=pseudo, n=data.n,
        n_clamped=problem.n_clamped, warnings=warns)
    if pseudo:
        res.warnings.append("observed Fisher information ill-conditioned; "
                            "covariance from pseudo-inverse")
    return res


# --- conditional linear transformation model ------------------------------------

def covariate_coding(data: Dataset, discrete: Optional[dict] = None):
    """Numeric coding matrix for the conditional comparator.

    Continuous covariates enter as-is; columns listed in `discrete` (name ->
    number of levels) are expanded into indicator contrasts for levels 2..K.
    Rows with any missing covariate are flagged for complete-case analysis.
    """
    discrete = discrete or {}
    cols, names = [], []
    ok = np.ones(data.n, dtype=bool)
    for c in data.covariates:
        ok &= c.kind != MISSING
        if c.name in discrete:
            K = discrete[c.name]
            k = np.rint(c.lower).astype(int)
            for level in range(2, K + 1):
                cols.append((k == level).astype(float))
                names.append(f"{c.name}=={level}")
        else:
            cols.append(c.lower.astype(float))
            names.append(c.name)
    xmat = np.column_stack(cols) if cols else np.zeros((data.n, 0))
    xmat[~ok] = 0.0
    return xmat, names, ok


def fit_ltm(data: Dataset, outcome_spec, link, discrete: Optional[dict] = None,
            maxiter: int = 500) -> MarginalFit:
    """Conditional linear transformation model G(h(y) - tau_x w - x'beta).

    The returned effect is the conditional tau_x; for noncollapsible effect
    measures it is not comparable to the marginal tau.
    """
    link = get_link(link)
    xmat, names, ok = covariate_coding(data, discrete)
    if not np.all(ok):
        warnings.warn(f"dropping {int((~ok).sum())} rows with missing covariates "
                      "(complete-case conditional model)")
    outcome = ObservationColumn(data.outcome.name, data.outcome.lower[ok],
                                data.outcome.upper[ok], data.outcome.kind[ok])
    fit = fit_shift_model(data.w[ok], outcome, link, outcome_spec,
                          xmat=xmat[ok] if xmat.shape[1] else None,
                          maxiter=maxiter,
                          label=f"conditional {effect_label(link, outcome_spec)}")
    return fit


# --- conditional outcome distribution -------------------------------------------

def conditional_outcome_cdf(model: JointModel, y, w, x) -> np.ndarray:
    """P(Y <= y | W = w, X = x) = Phi(sum_j omega_Jj h_j(x_j) + omega_JJ h_J(y|w))."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != model.dim - 1:
        raise ValueError("need one exact value per covariate")
    if np.any(np.isnan(x)):
        raise ValueError("conditional CDF requires exact covariate values")
    omega = cp.lambda_to_omega(model.copula)
    zx = np.array([
        bs.transformation(spec, coef.theta, xj)
        for spec, coef, xj in zip(model.covariate_specs, model.covariate_coefs, x)
    ])
    hy = model.outcome.latent_score(y, w)
    return ndtr(omega[-1, :-1] @ zx + omega[-1, -1] * hy)


# --- diagnostics ------------------------------------------------------------------

@dataclass
class LinkScaleEcdf:
    """Per-arm table of (y, ECDF, G^-1(ECDF)) suitable for overlay plots."""

    arm: np.ndarray
    y: np.ndarray
    cdf: np.ndarray
    link_scale: np.ndarray
    link_name: str = ""


def kaplan_meier_cdf(col: ObservationColumn):
    """Product-limit CDF estimate honoring right censoring.

    Returns (event times, cdf at those times). Without censoring this is the
    usual ECDF. Ties between events and censorings count the event first.
    """
    if np.any(col.kind == INTERVAL):
        if np.any(np.isfinite(col.upper[col.kind == INTERVAL])):
            raise ValueError("Kaplan-Meier handles right censoring only")
    present = col.kind != MISSING
    times = col.lower[present]
    events = (col.kind[present] == EXACT).astype(int)
    if events.sum() == 0:
        raise ValueError("arm contains no events")
    order = np.lexsort((1 - events, times))   # events before censorings at ties
    times, events = times[order], events[order]
    uniq = np.unique(times[events == 1])
    surv, out = 1.0, []
    for t in uniq:
        at_risk = np.sum(times >= t)
        d = np.sum((times == t) & (events == 1))
        surv *= 1.0 - d / at_risk
        out.append(1.0 - surv)
    return uniq, np.asarray(out)


def diagnostics_link_ecdf(data, link) -> LinkScaleEcdf:
    """Treatment-specific ECDFs transformed by G^-1.

    Parallel curves across arms support the link-scale shift assumption (for
    the cloglog link this is the classical log-log Kaplan-Meier check).
    """
    if isinstance(data, Dataset):
        w, outcome = data.w, data.outcome
    else:
        w, outcome = data
    link = get_link(link)
    arms, ys, cdfs, trans = [], [], [], []
    for arm in (0, 1):
        sub = ObservationColumn(outcome.name, outcome.lower[w == arm],
                                outcome.upper[w == arm], outcome.kind[w == arm])
        t, cdf = kaplan_meier_cdf(sub)
        g = np.asarray(link.quantile(np.clip(cdf, 0.0, 1.0)), dtype=float)
        keep = np.isfinite(g)
        arms.append(np.full(keep.sum(), arm))
        ys.append(t[keep])
        cdfs.append(cdf[keep])
        trans.append(g[keep])
    return LinkScaleEcdf(arm=np.concatenate(arms), y=np.concatenate(ys),
                         cdf=np.concatenate(cdfs), link_scale=np.concatenate(trans),
                         link_name=link.name)
