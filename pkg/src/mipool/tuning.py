"""Grid construction, subject-coherent cross-validation, one-standard-error
selection, and the two-stage adaptive pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grouped as grp
from . import stacked as stk
from .data import MultipleImputationSet, ObservationWeights, StandardizedView, back_transform, observation_weights, standardize
from .penalty import (
    MethodSpec,
    adaptive_weights_grouped,
    adaptive_weights_stacked,
    gamma_rule,
    parse_method,
)

NONADAPTIVE_MIN_RATIO = 1e-3
ADAPTIVE_MIN_RATIO = 1e-6
DEFAULT_GRID_SIZE = 100
DEFAULT_FOLDS = 5

# alpha = 0 has no finite lambda_max (pure ridge), so the lower endpoint of
# the mixing grid is floored.
ALPHA_GRID = (0.001, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass(frozen=True)
class TuningGrid:
    """Descending log-spaced lambda path per candidate alpha."""

    alphas: tuple[float, ...]
    lambdas: np.ndarray  # (n_alpha, n_lambda), each row descending
    lambda_min_ratio: float

    @property
    def n_lambda(self) -> int:
        return self.lambdas.shape[1]


def lambda_path(lambda_max: float, ratio: float, size: int) -> np.ndarray:
    if lambda_max <= 0.0:
        raise ValueError("lambda_max must be positive")
    return np.geomspace(lambda_max, lambda_max * ratio, size)


def build_grid_stacked(
    Xf, yf, of, n, family, alphas, a, ratio: float, size: int = DEFAULT_GRID_SIZE
) -> TuningGrid:
    lams = np.empty((len(alphas), size))
    for ia, alpha in enumerate(alphas):
        lmax = stk.lambda_max_stacked(Xf, yf, of, n, family, alpha, a)
        lams[ia] = lambda_path(lmax, ratio, size)
    return TuningGrid(alphas=tuple(alphas), lambdas=lams, lambda_min_ratio=ratio)


def build_grid_grouped(X, y, family, a, ratio: float, size: int = DEFAULT_GRID_SIZE) -> TuningGrid:
    lmax = grp.lambda_max_grouped(X, y, family, a)
    return TuningGrid(
        alphas=(1.0,), lambdas=lambda_path(lmax, ratio, size)[None, :], lambda_min_ratio=ratio
    )


def assign_folds(n: int, K: int, seed) -> np.ndarray:
    """Random near-equal partition of subjects; all D rows of a subject share
    the fold (stacking duplicates rows per subject, so folds key on subjects)."""
    if K > n:
        raise ValueError(f"cannot split {n} subjects into {K} folds")
    rng = np.random.default_rng(seed)
    fold = np.arange(n) % K
    return fold[rng.permutation(n)]


@dataclass
class CvResult:
    alphas: tuple[float, ...]
    lambdas: np.ndarray  # (n_alpha, n_lambda)
    mean_error: np.ndarray  # (n_alpha, n_lambda)
    se_error: np.ndarray  # (n_alpha, n_lambda)
    fold_of: np.ndarray  # subject -> fold id
    selected: tuple[int, int]  # (alpha index, lambda index)
    rule: str

    @property
    def selected_alpha(self) -> float:
        return self.alphas[self.selected[0]]

    @property
    def selected_lambda(self) -> float:
        return float(self.lambdas[self.selected])


def _deviance_rows(y, eta, family):
    if family == "gaussian":
        return (y - eta) ** 2
    return 2.0 * (np.logaddexp(0.0, eta) - y * eta)


def _check_fold_classes(y, fold_of, K, family):
    if family != "binomial":
        return
    for k in range(K):
        for part, sel in (("training", fold_of != k), ("validation", fold_of == k)):
            ys = y[sel]
            if ys.min() == ys.max():
                raise ValueError(
                    f"fold {k} has a single-class {part} outcome; "
                    "re-run with a different seed or fewer folds"
                )


def cross_validate_stacked(
    view: StandardizedView,
    y: np.ndarray,
    oweights: ObservationWeights,
    family: str,
    grid: TuningGrid,
    fold_of: np.ndarray,
    a: np.ndarray | None = None,
    controls: stk.SolverControls = stk.SolverControls(),
) -> CvResult:
    """Per-fold warm-started lambda paths; error is the o-weighted mean
    deviance (binomial) or squared error (gaussian) over validation rows."""
    D, n, p = view.data.shape
    if a is None:
        a = np.ones(p)
    K = int(fold_of.max()) + 1
    _check_fold_classes(y, fold_of, K, family)
    na, nl = len(grid.alphas), grid.n_lambda
    errors = np.empty((K, na, nl))
    for k in range(K):
        tr = fold_of != k
        va = ~tr
        Xt, yt, ot = stk.stack_rows(view.data[:, tr, :], y[tr], oweights.o[tr])
        Xt = np.asfortranarray(Xt)  # column access dominates the inner loop
        Xv, yv, ov = stk.stack_rows(view.data[:, va, :], y[va], oweights.o[va])
        n_tr = int(tr.sum())
        ov_sum = ov.sum()
        for ia, alpha in enumerate(grid.alphas):
            warm = None
            for il, lam in enumerate(grid.lambdas[ia]):
                fit = stk.fit_stacked(
                    Xt, yt, ot, n_tr, family, lam, alpha, a, warm=warm, controls=controls
                )
                warm = (fit.mu, fit.beta)
                eta_v = fit.mu + Xv @ fit.beta
                errors[k, ia, il] = np.sum(ov * _deviance_rows(yv, eta_v, family)) / ov_sum
    mean = errors.mean(axis=0)
    se = errors.std(axis=0, ddof=1) / np.sqrt(K)
    result = CvResult(grid.alphas, grid.lambdas, mean, se, fold_of, (0, 0), "")
    result.selected, result.rule = select_one_se(result)
    return result


def cross_validate_grouped(
    view: StandardizedView,
    y: np.ndarray,
    family: str,
    grid: TuningGrid,
    fold_of: np.ndarray,
    a: np.ndarray | None = None,
    controls: grp.GroupedControls = grp.GroupedControls(),
) -> CvResult:
    """Grouped-method CV error: mean over the D per-dataset validation deviances."""
    D, n, p = view.data.shape
    if a is None:
        a = np.ones(p)
    K = int(fold_of.max()) + 1
    _check_fold_classes(y, fold_of, K, family)
    nl = grid.n_lambda
    errors = np.empty((K, 1, nl))
    for k in range(K):
        tr = fold_of != k
        va = ~tr
        Xt, Xv = view.data[:, tr, :], view.data[:, va, :]
        yt, yv = y[tr], y[va]
        warm = None
        for il, lam in enumerate(grid.lambdas[0]):
            fit = grp.fit_grouped(Xt, yt, lam, family, a, warm=warm, controls=controls)
            warm = (fit.mu, fit.beta)
            eta_v = fit.mu[:, None] + np.einsum("dnp,dp->dn", Xv, fit.beta)
            errors[k, 0, il] = _deviance_rows(yv[None, :], eta_v, family).mean()
    mean = errors.mean(axis=0)
    se = errors.std(axis=0, ddof=1) / np.sqrt(K)
    result = CvResult(grid.alphas, grid.lambdas, mean, se, fold_of, (0, 0), "")
    result.selected, result.rule = select_one_se(result)
    return result


def select_one_se(result: CvResult) -> tuple[tuple[int, int], str]:
    """One-standard-error rule.

    Single-lambda families: largest lambda whose mean error is within one SE
    of the minimum.  (alpha, lambda) grids: among all qualifying pairs, the
    one maximizing the L1 strength lambda*alpha; ties break toward larger
    lambda, then larger alpha.
    """
    mean, se = result.mean_error, result.se_error
    ia_min, il_min = np.unravel_index(np.argmin(mean), mean.shape)
    threshold = mean[ia_min, il_min] + se[ia_min, il_min]
    qualify = np.argwhere(mean <= threshold)
    if len(result.alphas) == 1:
        il = int(qualify[:, 1].min())  # rows are descending in lambda
        return (0, il), "one-se:max-lambda"
    best = None
    for ia, il in qualify:
        lam = float(result.lambdas[ia, il])
        alpha = result.alphas[ia]
        key = (lam * alpha, lam, alpha)
        if best is None or key > best[0]:
            best = (key, (int(ia), int(il)))
    return best[1], "one-se:max-lambda-alpha"


def fit_full_path(view, y, oweights, family, alpha, lambdas, stop_index, a, controls):
    """Warm-started path on the full data down to the selected lambda."""
    Xf, yf, of = stk.stack_rows(view.data, y, oweights.o)
    n = view.data.shape[1]
    warm = None
    fit = None
    for il in range(stop_index + 1):
        fit = stk.fit_stacked(
            Xf, yf, of, n, family, float(lambdas[il]), alpha, a, warm=warm, controls=controls
        )
        warm = (fit.mu, fit.beta)
    return fit


def fit_full_path_grouped(view, y, family, lambdas, stop_index, a, controls):
    warm = None
    fit = None
    for il in range(stop_index + 1):
        fit = grp.fit_grouped(view.data, y, float(lambdas[il]), family, a, warm=warm, controls=controls)
        warm = (fit.mu, fit.beta)
    return fit


@dataclass
class StageResult:
    """One tuned fit: its CV record, the full-data fit, and both coordinate scales."""

    method: str
    cv: CvResult
    fit: object  # StackedFit | GroupedFit
    mu_original: float | np.ndarray
    beta_original: np.ndarray  # pooled length-p, original scale
    beta_original_per_dataset: np.ndarray | None = None
    mu_original_per_dataset: np.ndarray | None = None

    @property
    def selected(self) -> np.ndarray:
        return self.beta_pooled_std != 0.0

    @property
    def beta_pooled_std(self) -> np.ndarray:
        beta = self.fit.beta
        return beta if beta.ndim == 1 else grp.pool_grouped_coefficients(beta)


@dataclass
class PipelineResult:
    method: MethodSpec
    stage1: StageResult
    stage2: StageResult | None = None
    gamma: int | None = None
    adaptive_weights: np.ndarray | None = None

    @property
    def final(self) -> StageResult:
        return self.stage2 if self.stage2 is not None else self.stage1


def _alphas_for(spec: MethodSpec) -> tuple[float, ...]:
    return ALPHA_GRID if spec.family == "enet" else (1.0,)


def fit_adaptive_pipeline(
    mi_set: MultipleImputationSet,
    method: str | MethodSpec,
    seed=0,
    family: str | None = None,
    K: int = DEFAULT_FOLDS,
    grid_size: int = DEFAULT_GRID_SIZE,
    min_ratio_nonadaptive: float = NONADAPTIVE_MIN_RATIO,
    min_ratio_adaptive: float = ADAPTIVE_MIN_RATIO,
    stacked_controls: stk.SolverControls = stk.SolverControls(),
    grouped_controls: grp.GroupedControls = grp.GroupedControls(),
) -> PipelineResult:
    """Tune and fit a method; adaptive methods run the two-stage pipeline.

    Stage 1 tunes and fits the non-adaptive initializer (elastic net with
    matching observation weights for stacked methods, group LASSO for
    grouped).  Stage 2 builds adaptive weights from the stage-1 coefficients,
    rebuilds the grid with the wider 1e-6 ratio, and tunes the requested
    adaptive method.  Fold assignment is shared by both stages.
    """
    spec = parse_method(method) if isinstance(method, str) else method
    if family is None:
        family = mi_set.family()
    if family == "binomial" and not mi_set.is_binary:
        raise ValueError("binomial family requires a {0,1}-coded outcome")
    y = mi_set.y
    n, p, D = mi_set.n, mi_set.p, mi_set.D
    fold_of = assign_folds(n, K, seed)

    if spec.grouped:
        view = standardize(mi_set, "per-dataset")
        stage1_spec = spec.nonadaptive_initializer
        grid1 = build_grid_grouped(view.data, y, family, np.ones(p), min_ratio_nonadaptive, grid_size)
        cv1 = cross_validate_grouped(view, y, family, grid1, fold_of, controls=grouped_controls)
        fit1 = fit_full_path_grouped(
            view, y, family, grid1.lambdas[0], cv1.selected[1], np.ones(p), grouped_controls
        )
        stage1 = _grouped_stage(stage1_spec.name, cv1, fit1, view)
        if not spec.adaptive:
            return PipelineResult(method=spec, stage1=stage1)
        gamma = gamma_rule(p, n, D, grouped=True)
        a_hat = adaptive_weights_grouped(fit1.beta, n, D, gamma)
        grid2 = build_grid_grouped(view.data, y, family, a_hat, min_ratio_adaptive, grid_size)
        cv2 = cross_validate_grouped(view, y, family, grid2, fold_of, a_hat, controls=grouped_controls)
        fit2 = fit_full_path_grouped(
            view, y, family, grid2.lambdas[0], cv2.selected[1], a_hat, grouped_controls
        )
        stage2 = _grouped_stage(spec.name, cv2, fit2, view)
        return PipelineResult(spec, stage1, stage2, gamma=gamma, adaptive_weights=a_hat)

    view = standardize(mi_set, "stacked")
    oweights = observation_weights(mi_set, spec.weight_scheme)
    Xf, yf, of = stk.stack_rows(view.data, y, oweights.o)
    stage1_spec = spec.nonadaptive_initializer
    alphas1 = _alphas_for(stage1_spec)
    grid1 = build_grid_stacked(
        Xf, yf, of, n, family, alphas1, np.ones(p), min_ratio_nonadaptive, grid_size
    )
    cv1 = cross_validate_stacked(view, y, oweights, family, grid1, fold_of, controls=stacked_controls)
    ia, il = cv1.selected
    fit1 = fit_full_path(
        view, y, oweights, family, grid1.alphas[ia], grid1.lambdas[ia], il, np.ones(p), stacked_controls
    )
    stage1 = _stacked_stage(stage1_spec.name, cv1, fit1, view)
    if not spec.adaptive:
        return PipelineResult(method=spec, stage1=stage1)

    gamma = gamma_rule(p, n, D, grouped=False)
    a_hat = adaptive_weights_stacked(fit1.beta, n, D, gamma)
    alphas2 = _alphas_for(spec)
    grid2 = build_grid_stacked(Xf, yf, of, n, family, alphas2, a_hat, min_ratio_adaptive, grid_size)
    cv2 = cross_validate_stacked(
        view, y, oweights, family, grid2, fold_of, a_hat, controls=stacked_controls
    )
    ia, il = cv2.selected
    fit2 = fit_full_path(
        view, y, oweights, family, grid2.alphas[ia], grid2.lambdas[ia], il, a_hat, stacked_controls
    )
    stage2 = _stacked_stage(spec.name, cv2, fit2, view)
    return PipelineResult(spec, stage1, stage2, gamma=gamma, adaptive_weights=a_hat)


def _stacked_stage(name, cv, fit, view) -> StageResult:
    mu_o, beta_o = back_transform(fit.mu, fit.beta, view)
    return StageResult(method=name, cv=cv, fit=fit, mu_original=mu_o, beta_original=beta_o)


def _grouped_stage(name, cv, fit, view) -> StageResult:
    mu_o, beta_o = back_transform(fit.mu, fit.beta, view)
    return StageResult(
        method=name,
        cv=cv,
        fit=fit,
        mu_original=float(np.mean(mu_o)),
        beta_original=grp.pool_grouped_coefficients(beta_o),
        beta_original_per_dataset=beta_o,
        mu_original_per_dataset=mu_o,
    )
