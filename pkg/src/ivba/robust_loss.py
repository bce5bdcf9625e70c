"""Huber loss on squared (Mahalanobis) errors and the cost-to-delta mapping.

The loss acts on ``x = eps^T Sigma^-1 eps``::

    L(x) = x                          x < delta**2
    L(x) = 2 delta (sqrt(x) - delta/2)  otherwise

which is continuous at ``x = delta**2``.  ``branch="literal"`` switches the
inlier test to ``x < delta`` for side-by-side comparison; that variant is
discontinuous and is not used by the solvers by default.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DELTA_MAX = 7.82
BASE_SIGMA = 1.0
SCALE_FACTOR = 1.2

BRANCHES = ("continuous", "literal")


@dataclass(frozen=True)
class LossParams:
    delta: float
    delta_max: float = DELTA_MAX

    def __post_init__(self) -> None:
        if self.delta_max <= 0:
            raise ValueError("delta_max must be positive")
        if not 0.0 <= self.delta <= self.delta_max:
            raise ValueError(f"delta={self.delta} outside [0, {self.delta_max}]")


@dataclass(frozen=True)
class ObservationCovariance:
    """Isotropic per-axis variance for a feature at a pyramid level."""

    level: int = 0
    base_sigma: float = BASE_SIGMA
    scale_factor: float = SCALE_FACTOR

    @property
    def sigma2(self) -> float:
        return level_sigma2(self.level, self.base_sigma, self.scale_factor)

    def matrix(self) -> np.ndarray:
        return self.sigma2 * np.eye(3)


def level_sigma2(level, base_sigma: float = BASE_SIGMA, scale_factor: float = SCALE_FACTOR):
    return base_sigma**2 * np.power(scale_factor, 2 * np.asarray(level, dtype=float))


def _threshold(delta, branch: str):
    if branch == "continuous":
        return np.square(delta)
    if branch == "literal":
        return delta
    raise ValueError(f"unknown branch {branch!r}; expected one of {BRANCHES}")


def huber_eval(x, delta, branch: str = "continuous"):
    """Robust loss of squared error(s) ``x``; broadcasts over arrays."""
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(x < 0):
        raise ValueError("squared error must be non-negative")
    if np.any(delta < 0):
        raise ValueError("delta must be non-negative")
    inlier = x < _threshold(delta, branch)
    out = np.where(inlier, x, 2.0 * delta * (np.sqrt(x) - 0.5 * delta))
    return out if out.ndim else float(out)


def huber_weight(x, delta, branch: str = "continuous"):
    """IRLS weight dL/dx; in [0, 1] on the continuous branch.

    ``delta == 0`` gives weight 0, including at ``x == 0``.
    """
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(x < 0):
        raise ValueError("squared error must be non-negative")
    if np.any(delta < 0):
        raise ValueError("delta must be non-negative")
    inlier = x < _threshold(delta, branch)
    with np.errstate(divide="ignore", invalid="ignore"):
        outer = np.where(x > 0, delta / np.sqrt(x), 0.0)
    out = np.where(inlier, 1.0, outer)
    return out if out.ndim else float(out)


def delta_from_cost(c_hat, delta_max: float = DELTA_MAX):
    """Per-observation Huber parameter ``(1 - c) / (1 + c) * delta_max``.

    Costs outside [0, 1] are clamped with a warning.
    """
    c = np.asarray(c_hat, dtype=float)
    if np.any((c < 0) | (c > 1)):
        log.warning("predicted cost outside [0, 1] clamped (min=%g, max=%g)", c.min(), c.max())
        c = np.clip(c, 0.0, 1.0)
    out = (1.0 - c) / (1.0 + c) * delta_max
    return out if out.ndim else float(out)
