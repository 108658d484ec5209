"""Coordinate-descent solver for the homogeneous (stacked) pooled objective.

One shared parameter vector (mu, beta) is fit to the D imputed datasets
stacked on top of one another, with per-subject observation weights.  Binary
outcomes go through an outer quadratic approximation (working responses and
row weights) and an inner cyclic coordinate descent with residual updates and
per-cycle active-set shrinking; gaussian outcomes are the exact single-pass
special case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import expit


@dataclass(frozen=True)
class SolverControls:
    tol: float = 1e-7
    max_outer: int = 100
    max_sweeps: int = 10_000
    weight_floor: float = 1e-5


@dataclass
class StackedFit:
    mu: float
    beta: np.ndarray
    lam: float
    alpha: float
    objective_trace: list[float]
    n_outer: int
    n_inner: int
    converged: bool

    @property
    def active_set(self) -> np.ndarray:
        return np.flatnonzero(self.beta != 0.0)


def soft_threshold(z: float, lam: float) -> float:
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


def stack_rows(view_data: np.ndarray, y: np.ndarray, o: np.ndarray):
    """Flatten a (D, n, p) view into stacked rows with repeated y and o."""
    D, n, p = view_data.shape
    Xf = view_data.reshape(D * n, p)
    return Xf, np.tile(y, D), np.tile(o, D)


def working_response(y: np.ndarray, eta: np.ndarray, family: str, floor: float):
    """IRLS row weights and working responses at the current linear predictor."""
    if family == "gaussian":
        return np.ones_like(y), y
    pt = expit(eta)
    w = np.maximum(pt * (1.0 - pt), floor)
    return w, eta + (y - pt) / w


def stacked_objective(
    Xf: np.ndarray,
    yf: np.ndarray,
    of: np.ndarray,
    n: int,
    mu: float,
    beta: np.ndarray,
    family: str,
    lam: float,
    alpha: float,
    a: np.ndarray,
) -> float:
    """Penalized pooled loss: (1/n) sum o * nll + lam * P_alpha(beta)."""
    eta = mu + Xf @ beta
    if family == "gaussian":
        loss = 0.5 * np.sum(of * (yf - eta) ** 2) / n
    else:
        loss = np.sum(of * (np.logaddexp(0.0, eta) - yf * eta)) / n
    pen = alpha * np.sum(a * np.abs(beta)) + (1.0 - alpha) * np.sum(beta**2)
    return float(loss + lam * pen)


def quadratic_objective(Xf, yf_tilde, w, of, n, mu, beta, lam, alpha, a) -> float:
    """Quadratic surrogate O_Q at fixed working responses and weights."""
    r = yf_tilde - mu - Xf @ beta
    pen = alpha * np.sum(a * np.abs(beta)) + (1.0 - alpha) * np.sum(beta**2)
    return float(0.5 * np.sum(of * w * r**2) / n + lam * pen)


def null_intercept(yf: np.ndarray, of: np.ndarray, family: str) -> float:
    """Weighted intercept-only solution (closed form for both families)."""
    ybar = float(np.sum(of * yf) / np.sum(of))
    if family == "gaussian":
        return ybar
    if not 0.0 < ybar < 1.0:
        raise ValueError("intercept-only logistic fit is degenerate (single-class outcome)")
    return float(np.log(ybar / (1.0 - ybar)))


def lambda_max_stacked(
    Xf: np.ndarray,
    yf: np.ndarray,
    of: np.ndarray,
    n: int,
    family: str,
    alpha: float,
    a: np.ndarray,
) -> float:
    """Smallest lambda at which the null model satisfies the KKT conditions.

    At the null model, o*w*(ytilde - mu0) collapses to o*(y - ybar) for both
    families, so the score reduces to a weighted covariance with each column.
    """
    if alpha <= 0.0:
        raise ValueError("lambda_max is unbounded at alpha = 0; floor alpha at 0.001")
    ybar = np.sum(of * yf) / np.sum(of)
    score = Xf.T @ (of * (yf - ybar)) / n
    # Relative nudge so the argmax coordinate lands exactly in the dead zone
    # despite floating-point ties.
    return float(np.max(np.abs(score) / (alpha * a))) * (1.0 + 1e-12)


@njit(cache=True)
def _cd_kernel(Xf, Xow, xsq, ow, ow_sum, r, n, mu, beta, thr, denom, tol, max_sweeps):
    """Cyclic coordinate descent with residual updates and per-cycle
    active-set shrinking; the first sweep visits every coordinate, and
    convergence is only declared after a converged full sweep."""
    N, p = Xf.shape
    working = np.arange(p)
    n_working = p
    sweeps = 0
    full = True
    while sweeps < max_sweeps:
        s = 0.0
        for i in range(N):
            s += ow[i] * r[i]
        dmu = s / ow_sum
        mu += dmu
        if dmu != 0.0:
            for i in range(N):
                r[i] -= dmu
        delta = abs(dmu)
        for t in range(n_working):
            j = working[t]
            bj = beta[j]
            z = 0.0
            for i in range(N):
                z += Xow[i, j] * r[i]
            z = (z + xsq[j] * bj) / n
            tj = thr[j]
            if z > tj:
                bnew = (z - tj) / denom[j]
            elif z < -tj:
                bnew = (z + tj) / denom[j]
            else:
                bnew = 0.0
            if bnew != bj:
                db = bnew - bj
                for i in range(N):
                    r[i] -= Xf[i, j] * db
                beta[j] = bnew
                if abs(db) > delta:
                    delta = abs(db)
        sweeps += 1
        if delta < tol:
            if full:
                break
            # The active set converged; confirm on a full sweep so that
            # coordinates outside it can still enter.
            full = True
            n_working = p
            for j in range(p):
                working[j] = j
        else:
            full = False
            n_working = 0
            for j in range(p):
                if beta[j] != 0.0:
                    working[n_working] = j
                    n_working += 1
    return mu, sweeps


def solve_quadratic(
    Xf: np.ndarray,
    yf_tilde: np.ndarray,
    w: np.ndarray,
    of: np.ndarray,
    n: int,
    mu: float,
    beta: np.ndarray,
    lam: float,
    alpha: float,
    a: np.ndarray,
    controls: SolverControls,
    quad_trace: list[float] | None = None,
):
    """Cyclic coordinate descent on the quadratic surrogate.

    The stay-at-zero rule applies per cycle: the first sweep visits all
    coordinates, subsequent sweeps only the current active set.
    """
    p = Xf.shape[1]
    ow = of * w
    Xow = np.asfortranarray(Xf * ow[:, None])
    xsq = np.einsum("ij,ij->j", Xow, Xf)  # sum o*w*x^2 per column
    ow_sum = float(ow.sum())
    denom = xsq / n + 2.0 * lam * (1.0 - alpha)
    thr = lam * alpha * a
    r = np.ascontiguousarray(yf_tilde - mu - Xf @ beta)
    if quad_trace is None:
        Xff = Xf if Xf.flags.f_contiguous else np.asfortranarray(Xf)
        mu, sweeps = _cd_kernel(
            Xff, Xow, xsq, np.ascontiguousarray(ow), ow_sum, r,
            float(n), mu, beta, np.ascontiguousarray(thr), denom,
            controls.tol, controls.max_sweeps,
        )
        return mu, beta, r, sweeps
    working = np.arange(p)
    full = True
    sweeps = 0
    while sweeps < controls.max_sweeps:
        mu, delta = _cd_pass_traced(
            Xf, Xow, xsq, ow, ow_sum, r, n, mu, beta, thr, denom, working,
            of, w, yf_tilde, lam, alpha, a, quad_trace,
        )
        sweeps += 1
        if delta < controls.tol:
            if full:
                break
            working = np.arange(p)
            full = True
        else:
            working = np.flatnonzero(beta != 0.0)
            full = False
    return mu, beta, r, sweeps


def _cd_pass_traced(Xf, Xow, xsq, ow, ow_sum, r, n, mu, beta, thr, denom, working,
                    of, w, yf_tilde, lam, alpha, a, quad_trace):
    """Same as _cd_pass, recording O_Q after every single update (tests only)."""
    mu_new = mu + float(ow @ r) / ow_sum
    if mu_new != mu:
        r -= mu_new - mu
    delta = abs(mu_new - mu)
    quad_trace.append(quadratic_objective(Xf, yf_tilde, w, of, n, mu_new, beta, lam, alpha, a))
    for j in working:
        bj = beta[j]
        zj = Xow[:, j] @ r + xsq[j] * bj
        bnew = soft_threshold(zj / n, thr[j]) / denom[j]
        if bnew != bj:
            r -= Xf[:, j] * (bnew - bj)
            beta[j] = bnew
            delta = max(delta, abs(bnew - bj))
        quad_trace.append(
            quadratic_objective(Xf, yf_tilde, w, of, n, mu_new, beta, lam, alpha, a)
        )
    return mu_new, delta


def fit_stacked(
    Xf: np.ndarray,
    yf: np.ndarray,
    of: np.ndarray,
    n: int,
    family: str,
    lam: float,
    alpha: float = 1.0,
    a: np.ndarray | None = None,
    warm: tuple[float, np.ndarray] | None = None,
    controls: SolverControls = SolverControls(),
    quad_trace: list[float] | None = None,
) -> StackedFit:
    """Fit the stacked objective at one (alpha, lambda).

    ``Xf, yf, of`` are the stacked rows (length nD); ``n`` is the subject
    count.  ``a`` holds adaptive weights (defaults to ones).  ``warm`` is an
    optional (mu, beta) start.
    """
    p = Xf.shape[1]
    Xf = Xf if Xf.flags.f_contiguous else np.asfortranarray(Xf)
    if a is None:
        a = np.ones(p)
    if warm is None:
        mu = null_intercept(yf, of, family)
        beta = np.zeros(p)
    else:
        mu = float(warm[0])
        beta = np.array(warm[1], dtype=float)

    def objective(m, b):
        return stacked_objective(Xf, yf, of, n, m, b, family, lam, alpha, a)

    trace: list[float] = []
    total_sweeps = 0
    converged = False
    n_outer = 0
    max_outer = 1 if family == "gaussian" else controls.max_outer
    for outer in range(max_outer):
        n_outer = outer + 1
        eta = mu + Xf @ beta
        w, yt = working_response(yf, eta, family, controls.weight_floor)
        mu_prev, beta_prev = mu, beta.copy()
        mu, beta, _, sweeps = solve_quadratic(
            Xf, yt, w, of, n, mu, beta, lam, alpha, a, controls, quad_trace
        )
        total_sweeps += sweeps
        inner_converged = sweeps < controls.max_sweeps
        obj = objective(mu, beta)
        if trace and obj > trace[-1]:
            # IRLS steps are not guaranteed descent steps; halve toward the
            # previous iterate until the penalized objective stops increasing.
            for _ in range(50):
                mu = 0.5 * (mu + mu_prev)
                beta = 0.5 * (beta + beta_prev)
                obj = objective(mu, beta)
                if obj <= trace[-1]:
                    break
            if obj > trace[-1]:
                mu, beta, obj = mu_prev, beta_prev, trace[-1]
        trace.append(obj)
        change = max(abs(mu - mu_prev), float(np.max(np.abs(beta - beta_prev), initial=0.0)))
        if family == "gaussian":
            converged = inner_converged
            break
        if change < controls.tol:
            converged = True
            break
    return StackedFit(
        mu=mu,
        beta=beta,
        lam=lam,
        alpha=alpha,
        objective_trace=trace,
        n_outer=n_outer,
        n_inner=total_sweeps,
        converged=converged,
    )


def kkt_residual_stacked(
    fit: StackedFit,
    Xf: np.ndarray,
    yf: np.ndarray,
    of: np.ndarray,
    n: int,
    family: str,
    a: np.ndarray | None = None,
    controls: SolverControls = SolverControls(),
) -> float:
    """Max first-order violation of the quadratic subproblem anchored at the fit.

    Active coordinates check stationarity; inactive ones check that the score
    stays inside the dead zone.
    """
    p = Xf.shape[1]
    if a is None:
        a = np.ones(p)
    mu, beta, lam, alpha = fit.mu, fit.beta, fit.lam, fit.alpha
    eta = mu + Xf @ beta
    w, yt = working_response(yf, eta, family, controls.weight_floor)
    ow = of * w
    r = yt - eta
    xsq = np.einsum("i,ij,ij->j", ow, Xf, Xf)
    z = Xf.T @ (ow * r) + xsq * beta
    denom = xsq / n + 2.0 * lam * (1.0 - alpha)
    thr = lam * alpha * a
    active = beta != 0.0
    viol_active = np.abs(z / n - denom * beta - thr * np.sign(beta))[active]
    viol_zero = np.maximum(0.0, np.abs(z / n) - thr)[~active]
    return float(max(viol_active.max(initial=0.0), viol_zero.max(initial=0.0)))
