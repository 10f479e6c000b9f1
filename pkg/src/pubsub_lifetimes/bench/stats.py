"""Exact pooled percentiles and linear scaling fits."""

from __future__ import annotations

import math
import statistics
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from ..errors import EmptySampleSet, InsufficientPoints

MIN_FIT_POINTS = 3


def percentile(samples: Iterable[float], q: float) -> float:
    """Nearest-rank percentile: the ``ceil(q*n)``-th smallest sample (1-indexed)."""
    if not 0 < q < 1:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    data = sorted(samples)
    if not data:
        raise EmptySampleSet("percentile of an empty sample set")
    # exact rational arithmetic: ceil(0.999 * 1000) must be 999, not 1000
    rank = math.ceil(Fraction(str(q)) * len(data))
    return data[max(rank, 1) - 1]


def pooled_percentile(streams: Iterable[Iterable[float]], q: float) -> float:
    """Percentile over the union of all streams (never an average of per-stream values)."""
    return percentile((x for s in streams for x in s), q)


@dataclass(frozen=True)
class Aggregate:
    sweep: str
    metric: str
    mode: str
    backend: str
    T: int
    S: int
    R: float
    n: int
    p50_us: float
    p99_9_us: float

    def coord(self, axis: str) -> float:
        return getattr(self, axis)


def aggregate(samples, sweep: str = "custom") -> list[Aggregate]:
    """Pool every iteration and process of a configuration, per metric."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for s in samples:
        groups[(s.metric, s.mode, s.backend, s.T, s.S, s.R)].append(s.value_us)
    out = []
    for (metric, mode, backend, T, S, R), values in sorted(groups.items()):
        out.append(
            Aggregate(sweep, metric, mode, backend, T, S, R, len(values), percentile(values, 0.5), percentile(values, 0.999))
        )
    return out


@dataclass(frozen=True)
class Fit:
    slope: float
    intercept: float
    r2: float
    n: int


def fit_points(points: Sequence[tuple[float, float]]) -> Fit:
    if len(points) < MIN_FIT_POINTS:
        raise InsufficientPoints(f"need at least {MIN_FIT_POINTS} points, got {len(points)}")
    xs = [float(x) for x, _ in points]
    ys = [float(y) for _, y in points]
    try:
        slope, intercept = statistics.linear_regression(xs, ys)
    except statistics.StatisticsError as exc:
        raise InsufficientPoints(str(exc)) from None
    mean = statistics.fmean(ys)
    ss_tot = sum((y - mean) ** 2 for y in ys)
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    if ss_tot == 0:
        r2 = 1.0 if ss_res == 0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return Fit(slope, intercept, r2, len(points))


def scaling_fit(aggregates, axis: str | None = None, metric: str = "Publish", stat: str = "p50_us") -> Fit:
    """Least-squares fit of a percentile against one sweep axis.

    ``aggregates`` is either a list of :class:`Aggregate` rows (filtered by
    ``metric``, x taken from ``axis``) or plain ``(x, y)`` pairs.
    """
    rows = list(aggregates)
    if rows and isinstance(rows[0], Aggregate):
        if axis is None:
            raise ValueError("axis is required for aggregate rows")
        points = [(r.coord(axis), getattr(r, stat)) for r in rows if r.metric == metric]
    else:
        points = [(x, y) for x, y in rows]
    return fit_points(sorted(points))
