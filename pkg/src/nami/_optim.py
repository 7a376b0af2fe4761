"""Quasi-Newton maximization with batched finite-difference derivatives.

Objectives expose a batched evaluator f(X) mapping a (K, p) block of
parameter vectors to (K,) log-likelihood values; gradients and Hessians are
central differences evaluated through that batch interface, which keeps the
per-evaluation overhead small even for a few hundred parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

EPS_THIRD = float(np.finfo(float).eps ** (1.0 / 3.0))
MAX_BATCH = 4096


@dataclass
class OptResult:
    x: np.ndarray
    loglik: float
    grad_norm: float
    iterations: int
    converged: bool
    message: str = ""
    warnings: list = field(default_factory=list)


def _steps(x: np.ndarray) -> np.ndarray:
    return EPS_THIRD * np.maximum(1.0, np.abs(x))


def fd_gradient(fbatch, x: np.ndarray, free: np.ndarray | None = None) -> np.ndarray:
    """Central-difference gradient via one batched evaluation."""
    x = np.asarray(x, dtype=float)
    p = x.size
    idx = np.arange(p) if free is None else np.asarray(free, dtype=int)
    h = _steps(x)[idx]
    pts = np.repeat(x[None, :], 2 * idx.size, axis=0)
    rows = np.arange(idx.size)
    pts[2 * rows, idx] += h
    pts[2 * rows + 1, idx] -= h
    vals = _eval_chunked(fbatch, pts)
    g = np.zeros(p)
    g[idx] = (vals[2 * rows] - vals[2 * rows + 1]) / (2.0 * h)
    return g if free is None else g[idx]


def _eval_chunked(fbatch, pts: np.ndarray) -> np.ndarray:
    if pts.shape[0] <= MAX_BATCH:
        return np.asarray(fbatch(pts), dtype=float)
    out = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], MAX_BATCH):
        out[start:start + MAX_BATCH] = fbatch(pts[start:start + MAX_BATCH])
    return out


def fd_hessian(fbatch, x: np.ndarray) -> np.ndarray:
    """Symmetrized central-difference Hessian, step eps^(1/3) max(1, |x_i|)."""
    x = np.asarray(x, dtype=float)
    p = x.size
    h = _steps(x)
    f0 = float(_eval_chunked(fbatch, x[None, :])[0])

    # diagonal: f(x +/- h_i e_i)
    pts = np.repeat(x[None, :], 2 * p, axis=0)
    rows = np.arange(p)
    pts[2 * rows, rows] += h
    pts[2 * rows + 1, rows] -= h
    dvals = _eval_chunked(fbatch, pts)
    H = np.zeros((p, p))
    H[rows, rows] = (dvals[2 * rows] - 2.0 * f0 + dvals[2 * rows + 1]) / h**2

    # off-diagonal: f(x +/- h_i e_i +/- h_j e_j), built and evaluated in chunks
    ii, jj = np.triu_indices(p, k=1)
    signs = np.array([(1, 1), (1, -1), (-1, 1), (-1, -1)], dtype=float)
    chunk = max(1, MAX_BATCH // 4)
    for start in range(0, ii.size, chunk):
        ci, cj = ii[start:start + chunk], jj[start:start + chunk]
        m = ci.size
        pts = np.repeat(x[None, :], 4 * m, axis=0)
        rep = np.arange(m)
        for s, (si, sj) in enumerate(signs):
            pts[4 * rep + s, ci] += si * h[ci]
            pts[4 * rep + s, cj] += sj * h[cj]
        vals = _eval_chunked(fbatch, pts).reshape(m, 4)
        Hij = (vals[:, 0] - vals[:, 1] - vals[:, 2] + vals[:, 3]) / (4.0 * h[ci] * h[cj])
        H[ci, cj] = Hij
        H[cj, ci] = Hij
    return 0.5 * (H + H.T)


def _curvature_scale(fbatch, x: np.ndarray, f0: float) -> np.ndarray:
    """Diagonal-curvature preconditioner sqrt(-d2f/dx_i^2), clipped to sane values."""
    p = x.size
    h = _steps(x)
    pts = np.repeat(x[None, :], 2 * p, axis=0)
    rows = np.arange(p)
    pts[2 * rows, rows] += h
    pts[2 * rows + 1, rows] -= h
    vals = _eval_chunked(fbatch, pts)
    d2 = (vals[2 * rows] - 2.0 * f0 + vals[2 * rows + 1]) / h**2
    s = np.sqrt(np.maximum(-d2, 0.0))
    good = s[np.isfinite(s) & (s > 0)]
    fill = float(np.median(good)) if good.size else 1.0
    s = np.where(np.isfinite(s) & (s > 0), s, fill)
    return np.clip(s, fill * 1e-4, fill * 1e4)


def maximize(fbatch, x0: np.ndarray, maxiter: int = 500,
             free: np.ndarray | None = None, prescale: bool = True) -> OptResult:
    """Maximize a batched log-likelihood with (dense) BFGS.

    Coordinates are rescaled by estimated diagonal curvature before
    optimization. Stops when the gradient infinity-norm falls below
    1e-8 max(1, |loglik|) or after `maxiter` iterations. `free` restricts
    optimization to a subset of coordinates, holding the rest at x0.
    """
    x0 = np.asarray(x0, dtype=float)
    if free is not None:
        free = np.asarray(free, dtype=int)
        template = x0.copy()

        def embed(xf):
            full = template.copy()
            full[free] = xf
            return full

        def fbatch_sub(X):
            full = np.repeat(template[None, :], X.shape[0], axis=0)
            full[:, free] = X
            return fbatch(full)

        sub = maximize(fbatch_sub, x0[free], maxiter=maxiter, prescale=prescale)
        return OptResult(x=embed(sub.x), loglik=sub.loglik, grad_norm=sub.grad_norm,
                         iterations=sub.iterations, converged=sub.converged,
                         message=sub.message, warnings=sub.warnings)

    f0 = float(_eval_chunked(fbatch, x0[None, :])[0])
    if not np.isfinite(f0):
        raise FloatingPointError("log-likelihood not finite at the starting values")
    gtol = 1e-8 * max(1.0, abs(f0))

    scale = _curvature_scale(fbatch, x0, f0) if prescale else np.ones(x0.size)

    def fbatch_scaled(Y):
        return fbatch(Y / scale)

    def neg(y):
        v = float(_eval_chunked(fbatch_scaled, y[None, :])[0])
        return np.inf if np.isnan(v) else -v

    def neg_grad(y):
        return -fd_gradient(fbatch_scaled, y)

    y0 = x0 * scale
    with np.errstate(invalid="ignore", over="ignore"):
        res = minimize(neg, y0, jac=neg_grad, method="BFGS",
                       options={"maxiter": maxiter, "gtol": gtol})
    x, nit = res.x / scale, res.nit
    gnorm = float(np.max(np.abs(fd_gradient(fbatch, x))))
    if gnorm > gtol:
        x, steps, gnorm = _newton_polish(fbatch, x, gtol)
        nit += steps
    ll = float(_eval_chunked(fbatch, x[None, :])[0])
    return OptResult(x=x, loglik=ll, grad_norm=gnorm, iterations=int(nit),
                     converged=bool(np.isfinite(ll)), message=str(res.message))


def _newton_polish(fbatch, x: np.ndarray, gtol: float,
                   max_steps: int = 40, max_rounds: int = 2):
    """Newton refinement with the finite-difference Hessian.

    Steps are accepted on a clear gradient-norm contraction or a clear
    objective gain; the best-gradient iterate seen is returned, so the
    result is never worse than the input.
    """
    p = x.size
    f = float(_eval_chunked(fbatch, x[None, :])[0])
    g = fd_gradient(fbatch, x)
    gnorm = float(np.max(np.abs(g)))
    best = (x, gnorm)
    ftol = 1e-9 * max(1.0, abs(f))
    steps = 0
    for _ in range(max_rounds):
        if gnorm <= gtol or steps >= max_steps:
            break
        A = -fd_hessian(fbatch, x)
        # floor the spectrum so the step direction stays a descent direction
        # even where the observed information is indefinite
        evals = np.linalg.eigvalsh(A)
        floor = max(1e-8 * evals[-1], 1e-8)
        shift = max(0.0, floor - evals[0])
        try:
            low = np.linalg.cholesky(A + shift * np.eye(p))
        except np.linalg.LinAlgError:
            break
        round_progress = False
        while steps < max_steps and gnorm > gtol:
            dx = np.linalg.solve(low.T, np.linalg.solve(low, g))
            accepted = False
            t = 1.0
            while t >= 1.0 / 64.0:
                xn = x + t * dx
                fn = float(_eval_chunked(fbatch, xn[None, :])[0])
                if np.isfinite(fn):
                    gn = fd_gradient(fbatch, xn)
                    gnn = float(np.max(np.abs(gn)))
                    if gnn < 0.8 * gnorm or fn > f + ftol:
                        x, f, g, gnorm = xn, fn, gn, gnn
                        accepted = True
                        break
                t *= 0.25
            steps += 1
            if not accepted:
                break
            round_progress = True
            if gnorm < best[1]:
                best = (x, gnorm)
        if not round_progress:
            break
    if gnorm <= best[1]:
        best = (x, gnorm)
    return best[0], steps, best[1]


def covariance_from_hessian(fbatch, x: np.ndarray, cond_limit: float = 1e12):
    """Inverse observed Fisher information at the optimum.

    Returns (covariance, used_pseudo_inverse); falls back to the
    Moore-Penrose inverse when the Hessian condition number exceeds
    `cond_limit`.
    """
    H = -fd_hessian(fbatch, x)
    pseudo = False
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > cond_limit:
        cov = np.linalg.pinv(H)
        pseudo = True
    else:
        try:
            cov = np.linalg.inv(H)
        except np.linalg.LinAlgError:
            cov = np.linalg.pinv(H)
            pseudo = True
    return 0.5 * (cov + cov.T), pseudo
