"""Generic conformal machinery: measures, p-values, and a grid region oracle.

The grid oracle evaluates the conformal rank count at every point of a
candidate grid directly from a conformity measure's definition. It is a
test instrument for the exact O(n log n) interval algorithms, not part of
the user-facing prediction path.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .working_model import (
    WorkingModelParams,
    _log_t_density,
    _predictive_blocks,
    log_predictive_density,
    posterior_params,
)

__all__ = [
    "ConformityMeasure",
    "FABMeasure",
    "DTAMeasure",
    "GridSpec",
    "GridRegion",
    "default_grid",
    "conformal_pvalue",
    "grid_region",
    "step_profile",
]


class ConformityMeasure(ABC):
    """Scores how well a point conforms to a conditioning multiset.

    Implementations must be deterministic and permutation-invariant in the
    conditioning multiset. ``augmented`` selects which conditioning set
    the conformal algorithm hands to :meth:`score` for observation ``i``
    of the augmented sample: the full augmented bag when True, or the bag
    with that observation removed when False. Only score *orderings*
    matter, so a measure may return any strictly increasing transform of
    its defining score (e.g. a log density).
    """

    augmented: bool = False

    @abstractmethod
    def score(self, conditioning: np.ndarray, point: float) -> float:
        """Conformity score of ``point`` against ``conditioning``."""

    def grid_score_matrix(self, sample: np.ndarray, xs: np.ndarray) -> np.ndarray | None:
        """Optional vectorized scorer for the grid oracle.

        Returns an array of shape ``(len(xs), n+1)`` whose row for
        candidate ``x`` holds the scores ``c_1(x), ..., c_n(x), c_{n+1}(x)``,
        or ``None`` to fall back to per-point :meth:`score` calls.
        """
        return None


class FABMeasure(ConformityMeasure):
    """Posterior predictive log density of the normal working model."""

    def __init__(self, params: WorkingModelParams, augmented: bool = True):
        self.params = params
        self.augmented = augmented

    def score(self, conditioning: np.ndarray, point: float) -> float:
        return log_predictive_density(point, posterior_params(conditioning, self.params))

    def grid_score_matrix(self, sample: np.ndarray, xs: np.ndarray) -> np.ndarray:
        n = sample.size
        s = float(np.sum(sample))
        ssq = float(np.sum(sample**2))
        out = np.empty((xs.size, n + 1))
        if self.augmented:
            # One parameter block per candidate; all n+1 scores share it.
            loc, nu, _, scale = _predictive_blocks(s + xs, ssq + xs**2, n + 1, self.params)
            for i in range(n):
                out[:, i] = _log_t_density(sample[i], loc, nu, scale)
            out[:, n] = _log_t_density(xs, loc, nu, scale)
        else:
            for i in range(n):
                loc, nu, _, scale = _predictive_blocks(
                    s - sample[i] + xs, ssq - sample[i] ** 2 + xs**2, n, self.params
                )
                out[:, i] = _log_t_density(sample[i], loc, nu, scale)
            loc, nu, _, scale = _predictive_blocks(s, ssq, n, self.params)
            out[:, n] = _log_t_density(xs, loc, nu, scale)
        return out


class DTAMeasure(ConformityMeasure):
    """Negative distance to the average of the conditioning multiset."""

    def __init__(self, augmented: bool = True):
        self.augmented = augmented

    def score(self, conditioning: np.ndarray, point: float) -> float:
        m = math.fsum(np.asarray(conditioning, dtype=float)) / len(conditioning)
        return -abs(point - m)

    def grid_score_matrix(self, sample: np.ndarray, xs: np.ndarray) -> np.ndarray:
        n = sample.size
        s = float(np.sum(sample))
        out = np.empty((xs.size, n + 1))
        if self.augmented:
            m = (s + xs) / (n + 1)
            for i in range(n):
                out[:, i] = -np.abs(sample[i] - m)
            out[:, n] = -np.abs(xs - m)
        else:
            for i in range(n):
                out[:, i] = -np.abs(sample[i] - (s - sample[i] + xs) / n)
            out[:, n] = -np.abs(xs - s / n)
        return out


# -- p-value ------------------------------------------------------------------


def _scores_at(sample: np.ndarray, x: float, measure: ConformityMeasure) -> np.ndarray:
    """Scores ``c_1(x), ..., c_{n+1}(x)`` per the measure's conditioning form."""
    bag = np.append(sample, x)
    n = sample.size
    if measure.augmented:
        return np.array([measure.score(bag, float(bag[i])) for i in range(n + 1)])
    scores = np.empty(n + 1)
    for i in range(n + 1):
        scores[i] = measure.score(np.delete(bag, i), float(bag[i]))
    return scores


def _count_leq(scores: np.ndarray, c_last: float, tie_rtol: float) -> int:
    if tie_rtol == 0.0:
        return int(np.count_nonzero(scores <= c_last))
    tol = tie_rtol * max(1.0, abs(c_last))
    return int(np.count_nonzero(scores <= c_last + tol))


def conformal_pvalue(
    sample: Sequence[float] | np.ndarray,
    y_cand: float,
    measure: ConformityMeasure,
    tie_rtol: float = 0.0,
) -> float:
    """Conformal p-value ``#{i : c_i <= c_{n+1}} / (n+1)``.

    Always at least ``1/(n+1)``: the candidate's own score satisfies
    ``<=`` against itself. Score ties use exact ``<=`` by default;
    ``tie_rtol`` widens the comparison to
    ``c_i <= c_{n+1} + tie_rtol * max(1, |c_{n+1}|)`` for robustness
    studies.
    """
    y = np.asarray(sample, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("sample must be a nonempty one-dimensional vector")
    scores = _scores_at(y, float(y_cand), measure)
    count = _count_leq(scores, float(scores[-1]), tie_rtol)
    return count / (y.size + 1)


# -- grid oracle --------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """A uniform candidate grid ``lo, lo+res, ..., hi``."""

    lo: float
    hi: float
    num: int = 4001

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError("grid bounds must be finite")
        if self.lo >= self.hi:
            raise ValueError(f"degenerate grid: lo={self.lo} >= hi={self.hi}")
        if self.num < 2:
            raise ValueError("grid needs at least two points")

    @property
    def resolution(self) -> float:
        return (self.hi - self.lo) / (self.num - 1)

    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.num)


def default_grid(
    sample: Sequence[float] | np.ndarray,
    num: int = 4001,
    anchors: Sequence[float] = (),
) -> GridSpec:
    """Grid spanning the hull of sample and anchors, padded by 5 spans.

    Reflection-map candidates satisfy ``|g(y_i) - center| <= 3 * diam``
    where the hull contains the sample and the measure's center of
    shrinkage, so padding that hull by five of its spans provably covers
    the conformal region. Pass the prior mean as an anchor when the
    measure shrinks toward it; the distance-to-average measure needs no
    anchor.
    """
    pts = np.concatenate([np.asarray(sample, dtype=float), np.asarray(anchors, dtype=float)])
    span = float(np.max(pts) - np.min(pts))
    if span == 0.0:
        span = 1.0
    return GridSpec(float(np.min(pts)) - 5.0 * span, float(np.max(pts)) + 5.0 * span, num)


@dataclass(frozen=True)
class GridRegion:
    """Acceptance mask of a conformal region evaluated on a uniform grid."""

    grid_lo: float
    grid_hi: float
    resolution: float
    accepted: np.ndarray
    intervals: list[tuple[float, float]] = field(default_factory=list)

    def points(self) -> np.ndarray:
        return self.grid_lo + self.resolution * np.arange(self.accepted.size)


def _counts_on_grid(
    sample: np.ndarray,
    measure: ConformityMeasure,
    xs: np.ndarray,
    tie_rtol: float,
) -> np.ndarray:
    matrix = measure.grid_score_matrix(sample, xs)
    if matrix is None:
        counts = np.empty(xs.size, dtype=np.int64)
        for j, x in enumerate(xs):
            scores = _scores_at(sample, float(x), measure)
            counts[j] = _count_leq(scores, float(scores[-1]), tie_rtol)
        return counts
    c_last = matrix[:, -1]
    if tie_rtol == 0.0:
        thresh = c_last
    else:
        thresh = c_last + tie_rtol * np.maximum(1.0, np.abs(c_last))
    return np.count_nonzero(matrix <= thresh[:, None], axis=1).astype(np.int64)


def step_profile(
    sample: Sequence[float] | np.ndarray,
    measure: ConformityMeasure,
    grid: GridSpec,
    tie_rtol: float = 0.0,
) -> np.ndarray:
    """Rank count ``#{i : c_i(x) <= c_{n+1}(x)}`` at each grid point.

    Under a reflection-map measure this is a unimodal staircase rising
    1, 2, ..., n+1 and falling back to 1.
    """
    y = np.asarray(sample, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("sample must be a nonempty one-dimensional vector")
    return _counts_on_grid(y, measure, grid.points(), tie_rtol)


def grid_region(
    sample: Sequence[float] | np.ndarray,
    measure: ConformityMeasure,
    alpha: float,
    grid: GridSpec,
    tie_rtol: float = 0.0,
) -> GridRegion:
    """Conformal region on a grid: points where the rank count exceeds ``k``.

    ``k = floor(alpha*(n+1))``. Contiguous accepted runs are reported as
    closed intervals between their first and last grid points.
    """
    y = np.asarray(sample, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("sample must be a nonempty one-dimensional vector")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    xs = grid.points()
    counts = _counts_on_grid(y, measure, xs, tie_rtol)
    k = int(math.floor(alpha * (y.size + 1)))
    accepted = counts > k

    intervals: list[tuple[float, float]] = []
    in_run = False
    start = 0.0
    for j, ok in enumerate(accepted):
        if ok and not in_run:
            in_run, start = True, float(xs[j])
        elif not ok and in_run:
            in_run = False
            intervals.append((start, float(xs[j - 1])))
    if in_run:
        intervals.append((start, float(xs[-1])))

    return GridRegion(
        grid_lo=grid.lo,
        grid_hi=grid.hi,
        resolution=grid.resolution,
        accepted=accepted,
        intervals=intervals,
    )
