"""Containers for multiply-imputed data, observation weights, and standardization.

The canonical on-disk layout is a long-format CSV with columns
``imputation_id, subject_id, y, <covariate names...>`` plus an optional
companion mask CSV (``subject_id, <covariate names...>`` with 0/1 entries,
1 marking an originally-missing cell).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Raised when input data violates a structural requirement."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MultipleImputationSet:
    """D imputed copies of an n x p design plus a shared outcome and mask.

    ``X`` has shape (D, n, p); subject i occupies row i in every imputation.
    ``mask`` is True where the original value was missing.  Immutable after
    construction and safe to share across concurrent fits.
    """

    X: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    subject_id: np.ndarray
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if X.ndim != 3:
            raise DataError("X must have shape (D, n, p)")
        D, n, p = X.shape
        if D < 1 or n < 2 or p < 1:
            raise DataError(f"need D >= 1, n >= 2, p >= 1, got D={D}, n={n}, p={p}")
        if y.shape != (n,):
            raise DataError(f"outcome length {y.shape} does not match n={n}")
        if mask.shape != (n, p):
            raise DataError(f"mask shape {mask.shape} does not match (n, p)=({n}, {p})")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise DataError("non-finite values in X or y")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise DataError("covariate_names length does not match p")
        sid = np.asarray(self.subject_id)
        if sid.shape != (n,):
            raise DataError("subject_id length does not match n")
        # Observed cells must agree across imputations.
        obs = ~mask
        for d in range(1, D):
            bad = obs & (X[d] != X[0])
            if np.any(bad):
                i, j = np.argwhere(bad)[0]
                raise DataError(
                    f"observed value for subject {sid[i]}, covariate {names[j]} "
                    f"differs between imputations"
                )
        object.__setattr__(self, "X", _freeze(X))
        object.__setattr__(self, "y", _freeze(y))
        object.__setattr__(self, "mask", _freeze(mask))
        object.__setattr__(self, "subject_id", _freeze(sid))
        object.__setattr__(self, "covariate_names", names)

    @property
    def D(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[2]

    @property
    def is_binary(self) -> bool:
        return bool(np.all(np.isin(self.y, (0.0, 1.0))))

    def family(self) -> str:
        """Default model family implied by the outcome coding."""
        return "binomial" if self.is_binary else "gaussian"


@dataclass(frozen=True)
class ObservationWeights:
    """Per-subject weights for the stacked loss: 1/D or f_i/D."""

    o: np.ndarray
    scheme: str

    def __post_init__(self):
        object.__setattr__(self, "o", _freeze(np.asarray(self.o, dtype=float)))


def observation_weights(mi_set: MultipleImputationSet, scheme: str = "equal") -> ObservationWeights:
    """Build observation weights from the missingness mask.

    ``equal`` gives o_i = 1/D; ``observed`` gives o_i = f_i/D where f_i is the
    fraction of the subject's predictors that were observed.
    """
    D = mi_set.D
    if scheme == "equal":
        o = np.full(mi_set.n, 1.0 / D)
    elif scheme == "observed":
        f = 1.0 - mi_set.mask.sum(axis=1) / mi_set.p
        o = f / D
    else:
        raise ValueError(f"unknown weight scheme {scheme!r}")
    return ObservationWeights(o=o, scheme=scheme)


@dataclass(frozen=True)
class StandardizedView:
    """Standardized copy of the imputed designs plus back-transform parameters.

    ``stacked`` mode: columns centered and scaled jointly over all D
    imputations so that sum_d sum_i x = 0 and (1/n) sum_d sum_i x^2 = 1
    (divisor n, not nD).  ``per-dataset`` mode: the same per imputation.
    Centers/scales have shape (p,) in stacked mode and (D, p) otherwise.
    """

    mode: str
    centers: np.ndarray
    scales: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "centers", _freeze(np.asarray(self.centers, float)))
        object.__setattr__(self, "scales", _freeze(np.asarray(self.scales, float)))
        object.__setattr__(self, "data", _freeze(np.asarray(self.data, float)))


def standardize(mi_set: MultipleImputationSet, mode: str = "stacked") -> StandardizedView:
    X = mi_set.X
    D, n, p = X.shape
    if mode == "stacked":
        centers = X.mean(axis=(0, 1))
        centered = X - centers
        # (1/n) sum over d and i of x^2 == 1  =>  scale^2 = D * mean(x^2)
        scales = np.sqrt(D * (centered**2).mean(axis=(0, 1)))
        _check_scales(scales, mi_set.covariate_names)
        data = centered / scales
    elif mode == "per-dataset":
        centers = X.mean(axis=1)
        centered = X - centers[:, None, :]
        scales = np.sqrt((centered**2).mean(axis=1))
        _check_scales(scales, mi_set.covariate_names)
        data = centered / scales[:, None, :]
    else:
        raise ValueError(f"unknown standardization mode {mode!r}")
    return StandardizedView(mode=mode, centers=centers, scales=scales, data=data)


def _check_scales(scales: np.ndarray, names: tuple[str, ...]) -> None:
    flat = np.atleast_2d(scales)
    bad = np.argwhere(flat < 1e-12)
    if bad.size:
        j = bad[0][-1]
        raise DataError(f"covariate {names[j]} is constant; cannot standardize")


def back_transform(mu: float, beta: np.ndarray, view: StandardizedView):
    """Map (intercept, coefficients) from the standardized to the raw scale.

    Fitted linear predictors are identical on both scales.  For per-dataset
    views pass per-imputation parameters: mu of shape (D,), beta (D, p).
    """
    beta = np.asarray(beta, dtype=float)
    if view.mode == "stacked":
        beta_orig = beta / view.scales
        mu_orig = mu - float(np.sum(beta * view.centers / view.scales))
        return mu_orig, beta_orig
    beta_orig = beta / view.scales
    mu_orig = np.asarray(mu, dtype=float) - np.sum(beta * view.centers / view.scales, axis=1)
    return mu_orig, beta_orig


def load_csv(path, mask_path=None) -> MultipleImputationSet:
    """Read a long-format imputation CSV (plus optional 0/1 mask CSV).

    Without a mask file, a cell is marked missing when its imputed values
    disagree across imputations (all-false for D=1).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 4:
            raise DataError("expected columns imputation_id, subject_id, y, x1..xp")
        if [h.strip() for h in header[:3]] != ["imputation_id", "subject_id", "y"]:
            raise DataError("first three columns must be imputation_id, subject_id, y")
        names = tuple(h.strip() for h in header[3:])
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                d = int(row[0])
                sid = int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise DataError(f"line {lineno}: could not parse row: {exc}") from exc
            if len(vals) != len(names) + 1:
                raise DataError(f"line {lineno}: wrong number of fields")
            if (d, sid) in rows:
                raise DataError(f"duplicate (imputation {d}, subject {sid})")
            rows[(d, sid)] = vals

    imp_ids = sorted({d for d, _ in rows})
    subj_ids = sorted({s for _, s in rows})
    D, n, p = len(imp_ids), len(subj_ids), len(names)
    if len(rows) != D * n:
        for d in imp_ids:
            for s in subj_ids:
                if (d, s) not in rows:
                    raise DataError(f"missing row for subject {s} in imputation {d}")
    X = np.empty((D, n, p))
    y = np.empty(n)
    for di, d in enumerate(imp_ids):
        for si, s in enumerate(subj_ids):
            vals = rows[(d, s)]
            if di == 0:
                y[si] = vals[0]
            elif vals[0] != y[si]:
                raise DataError(f"outcome differs across imputations for subject {s}")
            X[di, si] = vals[1:]

    if mask_path is not None:
        mask = _load_mask(mask_path, names, subj_ids)
    else:
        mask = np.zeros((n, p), dtype=bool)
        for d in range(1, D):
            mask |= X[d] != X[0]
    return MultipleImputationSet(
        X=X, y=y, mask=mask, subject_id=np.asarray(subj_ids), covariate_names=names
    )


def _load_mask(mask_path, names, subj_ids) -> np.ndarray:
    with open(mask_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError("empty mask file")
        header = [h.strip() for h in header]
        if header[0] != "subject_id" or tuple(header[1:]) != names:
            raise DataError("mask header must be subject_id plus the covariate names")
        entries = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid = int(row[0])
                flags = [int(v) for v in row[1:]]
            except ValueError as exc:
                raise DataError(f"mask line {lineno}: {exc}") from exc
            if any(v not in (0, 1) for v in flags) or len(flags) != len(names):
                raise DataError(f"mask line {lineno}: entries must be 0/1 per covariate")
            entries[sid] = flags
    try:
        return np.array([entries[s] for s in subj_ids], dtype=bool)
    except KeyError as exc:
        raise DataError(f"mask file has no row for subject {exc.args[0]}") from exc
