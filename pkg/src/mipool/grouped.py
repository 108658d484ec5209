"""Majorization-minimization solver for the heterogeneous (grouped) objective.

Each imputed dataset keeps its own intercept and coefficient vector; a group
penalty over the cross-imputation blocks (beta_{1,j}, ..., beta_{D,j}) forces
uniform selection.  Binary outcomes are handled by a fixed-curvature
majorizer (curvature 0.25 per row); gaussian outcomes use the exact quadratic
loss (curvature 1, no majorization needed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import expit

from .stacked import soft_threshold


@dataclass(frozen=True)
class GroupedControls:
    tol: float = 1e-7
    max_mm: int = 200
    max_sweeps: int = 1_000


@dataclass
class GroupedFit:
    mu: np.ndarray  # (D,)
    beta: np.ndarray  # (D, p)
    lam: float
    objective_trace: list[float]
    n_iter: int
    converged: bool

    @property
    def active_groups(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.beta != 0.0, axis=0))


def mm_curvature(family: str) -> float:
    return 0.25 if family == "binomial" else 1.0


def mm_working_response(y: np.ndarray, eta: np.ndarray, family: str):
    """Per-dataset working responses at fixed curvature; gaussian passes y through."""
    if family == "gaussian":
        return np.broadcast_to(y, eta.shape)
    return eta + (y[None, :] - expit(eta)) / 0.25


def grouped_objective(
    X: np.ndarray,
    y: np.ndarray,
    mu: np.ndarray,
    beta: np.ndarray,
    family: str,
    lam: float,
    a: np.ndarray,
) -> float:
    """(1/n) sum_d sum_i nll + lam * sum_j a_j ||beta_.j||."""
    n = X.shape[1]
    eta = mu[:, None] + np.einsum("dnp,dp->dn", X, beta)
    if family == "gaussian":
        loss = 0.5 * np.sum((y[None, :] - eta) ** 2) / n
    else:
        loss = np.sum(np.logaddexp(0.0, eta) - y[None, :] * eta) / n
    pen = float(np.sum(a * np.sqrt((beta**2).sum(axis=0))))
    return float(loss + lam * pen)


def majorizer_value(
    X: np.ndarray,
    yt: np.ndarray,
    mu: np.ndarray,
    beta: np.ndarray,
    v: float,
    lam: float,
    a: np.ndarray,
) -> float:
    """Penalized majorizing surrogate (v/2n) sum (ytilde - eta)^2 + lam * P."""
    n = X.shape[1]
    eta = mu[:, None] + np.einsum("dnp,dp->dn", X, beta)
    pen = float(np.sum(a * np.sqrt((beta**2).sum(axis=0))))
    return float(0.5 * v * np.sum((yt - eta) ** 2) / n + lam * pen)


def group_update(z: np.ndarray, lam_a: float, v: float, n: int) -> np.ndarray:
    """Closed-form block update for a standardized column group.

    ``z`` is the length-D score block z_j; the minimizer is
    (1/v) S((v/n)||z||, lam_a) z/||z|| — a nonnegative multiple of z, zero
    exactly when (v/n)||z|| <= lam_a.  At lam_a = 0 this is z/n scaled by 1/v.
    """
    z = np.asarray(z, dtype=float)
    zn = float(np.sqrt(z @ z))
    if zn == 0.0:
        return np.zeros_like(z)
    return soft_threshold(v * zn / n, lam_a) / v * (z / zn)


def lambda_max_grouped(X: np.ndarray, y: np.ndarray, family: str, a: np.ndarray) -> float:
    """Smallest lambda shrinking every block to zero at the null model."""
    D, n, p = X.shape
    v = mm_curvature(family)
    ybar = float(y.mean())
    if family == "binomial":
        if not 0.0 < ybar < 1.0:
            raise ValueError("intercept-only logistic fit is degenerate (single-class outcome)")
        resid = (y - ybar) / v  # null-model working residual
    else:
        resid = y - ybar
    z = np.einsum("dnj,n->dj", X, resid)  # (D, p) null-model score blocks
    norms = np.sqrt((z**2).sum(axis=0))
    # Relative nudge against floating-point ties at the argmax block.
    return float(np.max(v * norms / (n * a))) * (1.0 + 1e-12)


@njit(cache=True)
def _block_kernel(XT, r, mu, beta, cj, thr, v, n, tol, max_sweeps):
    """Block coordinate descent on the majorizer.

    ``XT`` is the (D, p, n) transpose of the design for contiguous column
    access; residuals, intercepts, and coefficients update in place.  Each
    block takes a prox step at its curvature bound, so the surrogate is
    non-increasing.  First sweep covers all blocks, later sweeps the active
    set; convergence is only declared after a converged full sweep.
    """
    D, p, N = XT.shape
    working = np.arange(p)
    n_working = p
    u = np.empty(D)
    sweeps = 0
    full = True
    while sweeps < max_sweeps:
        delta = 0.0
        for d in range(D):
            s = 0.0
            for i in range(N):
                s += r[d, i]
            dmu = s / N
            mu[d] += dmu
            for i in range(N):
                r[d, i] -= dmu
            if abs(dmu) > delta:
                delta = abs(dmu)
        for t in range(n_working):
            j = working[t]
            nu2 = 0.0
            for d in range(D):
                s = 0.0
                for i in range(N):
                    s += XT[d, j, i] * r[d, i]
                u[d] = beta[d, j] + v * s / (n * cj[j])
                nu2 += u[d] * u[d]
            nu = np.sqrt(nu2)
            tj = thr[j] / cj[j]
            shrink = 0.0 if nu <= tj else 1.0 - tj / nu
            for d in range(D):
                bnew = shrink * u[d]
                db = bnew - beta[d, j]
                if db != 0.0:
                    for i in range(N):
                        r[d, i] -= XT[d, j, i] * db
                    beta[d, j] = bnew
                    if abs(db) > delta:
                        delta = abs(db)
        sweeps += 1
        if delta < tol:
            if full:
                break
            # The active set converged; confirm on a full sweep so that
            # blocks outside it can still enter.
            full = True
            n_working = p
            for j in range(p):
                working[j] = j
        else:
            full = False
            n_working = 0
            for j in range(p):
                active = False
                for d in range(D):
                    if beta[d, j] != 0.0:
                        active = True
                        break
                if active:
                    working[n_working] = j
                    n_working += 1
    return sweeps


def fit_grouped(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    family: str,
    a: np.ndarray | None = None,
    warm: tuple[np.ndarray, np.ndarray] | None = None,
    controls: GroupedControls = GroupedControls(),
) -> GroupedFit:
    """Fit the grouped objective at one lambda via MM + block coordinate descent.

    Within each MM iteration the majorizer is minimized by cyclic block
    updates (first sweep over all blocks, later sweeps over the active set),
    which keeps the true objective non-increasing by the MM argument.
    """
    D, n, p = X.shape
    if a is None:
        a = np.ones(p)
    v = mm_curvature(family)
    if warm is None:
        if family == "binomial":
            ybar = float(y.mean())
            if not 0.0 < ybar < 1.0:
                raise ValueError("single-class outcome")
            mu = np.full(D, np.log(ybar / (1.0 - ybar)))
        else:
            mu = np.full(D, float(y.mean()))
        beta = np.zeros((D, p))
    else:
        mu = np.array(warm[0], dtype=float)
        beta = np.array(warm[1], dtype=float)

    # Block curvature bound: exact v on standardized columns, an upper bound
    # otherwise (e.g. CV subsets), so every prox step still majorizes.
    cj = np.maximum(v * np.einsum("dnj,dnj->dj", X, X).max(axis=0) / n, 1e-12)
    XT = np.ascontiguousarray(X.transpose(0, 2, 1))
    thr = np.ascontiguousarray(lam * a)

    trace: list[float] = []
    converged = False
    n_iter = 0
    for it in range(controls.max_mm):
        n_iter = it + 1
        eta = mu[:, None] + np.einsum("dnp,dp->dn", X, beta)
        yt = mm_working_response(y, eta, family)
        r = np.ascontiguousarray(yt - eta)
        mu_prev, beta_prev = mu.copy(), beta.copy()
        sweeps = _block_kernel(
            XT, r, mu, beta, cj, thr, v, float(n), controls.tol, controls.max_sweeps
        )
        trace.append(grouped_objective(X, y, mu, beta, family, lam, a))
        change = max(
            float(np.max(np.abs(mu - mu_prev), initial=0.0)),
            float(np.max(np.abs(beta - beta_prev), initial=0.0)),
        )
        if family == "gaussian":
            converged = sweeps < controls.max_sweeps
            break
        if change < controls.tol:
            converged = True
            break
    return GroupedFit(
        mu=mu, beta=beta, lam=lam, objective_trace=trace, n_iter=n_iter, converged=converged
    )


def kkt_residual_grouped(
    fit: GroupedFit,
    X: np.ndarray,
    y: np.ndarray,
    family: str,
    a: np.ndarray | None = None,
) -> float:
    """Max group-KKT violation at the fit, with the majorizer anchored there.

    Active blocks: (v/n) z_j = v beta_.j + lam a_j beta_.j / ||beta_.j||.
    Inactive blocks: (v/n) ||z_j|| <= lam a_j.
    """
    D, n, p = X.shape
    if a is None:
        a = np.ones(p)
    v = mm_curvature(family)
    mu, beta, lam = fit.mu, fit.beta, fit.lam
    eta = mu[:, None] + np.einsum("dnp,dp->dn", X, beta)
    yt = mm_working_response(y, eta, family)
    r = yt - eta
    z = np.einsum("dnj,dn->dj", X, r) + n * beta  # (D, p)
    norms = np.sqrt((beta**2).sum(axis=0))
    worst = 0.0
    for j in range(p):
        if norms[j] > 0.0:
            vec = v * z[:, j] / n - v * beta[:, j] - lam * a[j] * beta[:, j] / norms[j]
            worst = max(worst, float(np.max(np.abs(vec))))
        else:
            zn = float(np.sqrt(z[:, j] @ z[:, j]))
            worst = max(worst, max(0.0, v * zn / n - lam * a[j]))
    return worst


def pool_grouped_coefficients(beta: np.ndarray) -> np.ndarray:
    """Average the D per-dataset coefficient vectors; zero blocks stay zero."""
    return np.asarray(beta, dtype=float).mean(axis=0)
