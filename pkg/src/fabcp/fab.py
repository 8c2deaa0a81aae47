"""Exact FAB conformal prediction interval under the normal working model.

Scoring candidates by the posterior predictive density makes every
per-observation acceptance region an interval ``[min(y_i, g(y_i)),
max(y_i, g(y_i))]``, where ``g`` is an affine reflection whose fixed point
is the posterior mean estimator ``theta_tilde``. The conformal region is
then determined by order statistics of the pooled endpoint candidates
``{y_i} U {g(y_i)}``: with ``k = floor(alpha*(n+1))`` the interval runs
from the k-th to the (2n-k+1)-th order statistic. The whole construction
is O(n log n) and does not depend on the inverse-gamma hyperparameters
(a, b), which cancel from every score comparison.

A diffuse prior is expressed by the explicit ``precision = 0`` entry point
rather than an infinite ``tau2``, which keeps the arithmetic free of
floating-point infinities; with zero precision the reflection reduces
exactly to the distance-to-average one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .intervals import PredictionInterval
from .working_model import WorkingModelParams

__all__ = ["SubRegion", "g_map", "fab_interval", "fab_interval_from_precision", "sub_regions"]


@dataclass(frozen=True)
class SubRegion:
    """Acceptance region contributed by one observation.

    The set of candidates scoring at least as well as observation ``i``;
    always an interval containing the posterior mean estimator.
    """

    index: int
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise ValueError("sub-region bounds out of order")


def _check_sample(sample: Sequence[float] | np.ndarray) -> np.ndarray:
    y = np.asarray(sample, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("sample must be a nonempty one-dimensional vector")
    if not np.all(np.isfinite(y)):
        raise ValueError("sample contains non-finite values")
    return y


def _reflect(y_i: float, s_prior: float, c: float) -> float:
    """Reflection of ``y_i`` with fixed point ``s_prior / (c - 1)``.

    ``s_prior`` is the precision-weighted prior mean plus the sample sum
    and ``c = precision + n + 1``. Evaluation order matches
    ``baselines.dta_g`` so the zero-precision limit is bit-exact.
    """
    return (2.0 * s_prior - c * y_i) / (c - 2.0)


def g_map(y_i: float, sample_sum: float, n: int, mu: float, tau2: float) -> float:
    """Reflection of ``y_i`` about the posterior mean estimator.

    Parameters
    ----------
    y_i : float
        Observation to reflect.
    sample_sum : float
        Sum of the full sample (including ``y_i``).
    n : int
        Sample size, at least 1.
    mu, tau2 : float
        Prior mean and variance ratio; ``tau2 > 0``.

    Notes
    -----
    The reflection solves the score tie between ``y_i`` and a candidate
    under the augmented-sample predictive density. Its denominator
    ``precision + n - 1`` is positive for every ``tau2 > 0``, ``n >= 1``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if tau2 <= 0.0:
        raise ValueError(f"tau2 must be positive, got {tau2}")
    precision = 1.0 / tau2
    c = precision + (n + 1.0)
    assert c > 2.0, "reflection denominator must be positive"
    return _reflect(y_i, mu * precision + sample_sum, c)


def fab_interval_from_precision(
    sample: Sequence[float] | np.ndarray,
    mu: float,
    precision: float,
    alpha: float,
) -> PredictionInterval:
    """Exact FAB interval parameterized by the prior precision ``1/tau2``.

    ``precision = 0`` gives the diffuse prior (``mu`` is then irrelevant)
    and requires ``n >= 2``; any positive precision works from ``n = 1``.
    """
    y = _check_sample(sample)
    n = y.size
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if precision < 0.0 or not math.isfinite(precision):
        raise ValueError(f"precision must be finite and nonnegative, got {precision}")
    if precision == 0.0 and n < 2:
        raise ValueError("the diffuse prior requires n >= 2")

    k = int(math.floor(alpha * (n + 1)))
    achieved = 1.0 - k / (n + 1)
    if k == 0:
        # Every candidate's own score already satisfies <=, so the region
        # with k = 0 accepts the whole real line.
        return PredictionInterval(-math.inf, math.inf, alpha, achieved, k=0)

    s_prior = mu * precision + math.fsum(y)
    c = precision + (n + 1.0)
    v = np.concatenate([y, np.array([_reflect(v_i, s_prior, c) for v_i in y])])
    v.sort()
    return PredictionInterval(float(v[k - 1]), float(v[2 * n - k]), alpha, achieved, k=k)


def fab_interval(
    sample: Sequence[float] | np.ndarray,
    params: WorkingModelParams,
    alpha: float,
) -> PredictionInterval:
    """Exact FAB conformal interval for a sample under a normal working model.

    Builds the pooled endpoint candidates ``{y_i} U {g(y_i)}``, sorts them,
    and returns the k-th and (2n-k+1)-th order statistics with
    ``k = floor(alpha*(n+1))``; ``k = 0`` yields the whole real line. The
    result contains the posterior mean estimator and is unchanged by the
    inverse-gamma hyperparameters (a, b).
    """
    return fab_interval_from_precision(sample, params.mu, 1.0 / params.tau2, alpha)


def sub_regions(sample: Sequence[float] | np.ndarray, params: WorkingModelParams) -> list[SubRegion]:
    """Per-observation acceptance intervals ``[min(y_i, g(y_i)), max(y_i, g(y_i))]``."""
    y = _check_sample(sample)
    n = y.size
    precision = 1.0 / params.tau2
    s_prior = params.mu * precision + math.fsum(y)
    c = precision + (n + 1.0)
    out = []
    for i, y_i in enumerate(y):
        g_i = _reflect(float(y_i), s_prior, c)
        out.append(SubRegion(index=i, lo=min(float(y_i), g_i), hi=max(float(y_i), g_i)))
    return out
