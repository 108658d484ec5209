"""Penalty specifications: stacked LASSO/ENET variants, grouped variants,
adaptive weight construction, and the fixed-exponent rule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Adaptive weights at a zero initial estimate grow like (nD)^gamma; cap them so
# that downstream lambda_max stays finite in floating point.
WEIGHT_CAP = 1e15

STACKED_METHODS = ("slasso", "salasso", "senet", "saenet")
GROUPED_METHODS = ("glasso", "galasso")


@dataclass(frozen=True)
class MethodSpec:
    """Parsed method string, e.g. 'saenet:w' or 'glasso'."""

    name: str
    family: str  # lasso | enet | group-lasso
    adaptive: bool
    weight_scheme: str  # equal | observed

    @property
    def grouped(self) -> bool:
        return self.family == "group-lasso"

    @property
    def nonadaptive_initializer(self) -> "MethodSpec":
        """Method whose tuned fit seeds the adaptive weights.

        Adaptive stacked methods initialize from the elastic net with matching
        observation weights; the adaptive grouped method from the plain group
        LASSO.
        """
        if not self.adaptive:
            return self
        if self.grouped:
            return parse_method("glasso")
        suffix = ":w" if self.weight_scheme == "observed" else ""
        return parse_method("senet" + suffix)

    @property
    def nonadaptive_self(self) -> "MethodSpec":
        """Same penalty family with adaptive shrinkage turned off."""
        name = self.name.replace("sa", "s").replace("ga", "g")
        suffix = ":w" if self.weight_scheme == "observed" else ""
        return parse_method(name + suffix)


def parse_method(method: str) -> MethodSpec:
    base, _, suffix = method.lower().partition(":")
    if suffix not in ("", "w"):
        raise ValueError(f"unknown method modifier {suffix!r} in {method!r}")
    scheme = "observed" if suffix == "w" else "equal"
    if base in GROUPED_METHODS:
        if suffix:
            raise ValueError("observation weights are not defined for grouped methods")
        return MethodSpec(base, "group-lasso", base == "galasso", "equal")
    if base not in STACKED_METHODS:
        raise ValueError(f"unknown method {method!r}")
    family = "enet" if base.endswith("enet") else "lasso"
    adaptive = base in ("salasso", "saenet")
    return MethodSpec(base, family, adaptive, scheme)


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family, mixing parameter, and per-covariate adaptive weights."""

    family: str  # lasso | enet | group-lasso
    alpha: float = 1.0
    adaptive: bool = False
    weights: np.ndarray | None = None
    gamma: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(~np.isfinite(w)) or np.any(w <= 0):
                raise ValueError("adaptive weights must be finite and positive")
            object.__setattr__(self, "weights", w)
        if not self.adaptive and self.weights is not None and np.any(self.weights != 1.0):
            raise ValueError("non-adaptive spec requires unit weights")

    @property
    def effective_alpha(self) -> float:
        return 1.0 if self.family in ("lasso", "group-lasso") else self.alpha

    def weight_vector(self, p: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(p)
        if len(self.weights) != p:
            raise ValueError("weight vector length does not match p")
        return self.weights


def gamma_rule(p: int, n: int, D: int, grouped: bool = False) -> int:
    """Fixed penalty exponent: ceil(2v/(1-v)) + 1.

    Stacked methods use v = log(p)/log(nD); grouped methods use
    v = log(pD)/log(nD).  Requires v < 1.
    """
    n_params = p * D if grouped else p
    v = math.log(n_params) / math.log(n * D)
    if v >= 1.0:
        raise ValueError(f"cannot fix gamma: log-dimension ratio v={v:.4f} >= 1")
    return math.ceil(2.0 * v / (1.0 - v)) + 1


def adaptive_weights_stacked(initial_beta: np.ndarray, n: int, D: int, gamma: float) -> np.ndarray:
    """a_j = (|beta_j| + 1/(nD))^-gamma from a tuned non-adaptive stacked fit."""
    b = np.abs(np.asarray(initial_beta, dtype=float))
    return np.minimum((b + 1.0 / (n * D)) ** (-float(gamma)), WEIGHT_CAP)


def adaptive_weights_grouped(initial_betas: np.ndarray, n: int, D: int, gamma: float) -> np.ndarray:
    """a_j = (||beta_.j||_2 + 1/(nD))^-gamma from a tuned group-LASSO fit."""
    B = np.asarray(initial_betas, dtype=float)
    norms = np.sqrt((B**2).sum(axis=0))
    return np.minimum((norms + 1.0 / (n * D)) ** (-float(gamma)), WEIGHT_CAP)


def penalty_value(spec: PenaltySpec, beta: np.ndarray) -> float:
    """Penalty term evaluated at beta (length p stacked, D x p grouped).

    Stacked: alpha * sum a_j |beta_j| + (1 - alpha) * sum beta_j^2 (the ridge
    term carries no 1/2 factor).  Grouped: sum a_j ||beta_.j||_2.  The
    intercept is never part of beta here.
    """
    beta = np.asarray(beta, dtype=float)
    if spec.family == "group-lasso":
        if beta.ndim != 2:
            raise ValueError("group-lasso penalty expects a D x p coefficient matrix")
        a = spec.weight_vector(beta.shape[1])
        return float(np.sum(a * np.sqrt((beta**2).sum(axis=0))))
    if beta.ndim != 1:
        raise ValueError("stacked penalty expects a length-p coefficient vector")
    a = spec.weight_vector(beta.shape[0])
    alpha = spec.effective_alpha
    return float(alpha * np.sum(a * np.abs(beta)) + (1.0 - alpha) * np.sum(beta**2))
