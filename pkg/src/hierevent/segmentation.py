"""Splitting event sequences into contiguous time groups.

Adaptive segmentation picks at most ``M`` groups so that the largest
within-group time span is as small as possible: binary search over the
span bound, with a greedy left-to-right packing as the feasibility test.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .events import EventSequence

DEFAULT_MAX_GROUPS = 32


@dataclass(frozen=True)
class Segmentation:
    """An ordered partition of a sequence into contiguous groups.

    ``groups`` are half-open ``(start, stop)`` index ranges. ``boundaries``
    has one entry per group (its first event time) plus a closing entry one
    second after the last event.
    """

    boundaries: tuple[int, ...]
    groups: tuple[tuple[int, int], ...]
    max_span: int

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> list[int]:
        return [b - a for a, b in self.groups]

    def group_index(self) -> np.ndarray:
        """Group number of every event."""
        return np.repeat(np.arange(self.n_groups), self.sizes)

    def to_dict(self) -> dict:
        return {
            "n_groups": self.n_groups,
            "boundaries": list(self.boundaries),
            "group_sizes": self.sizes,
            "groups": [list(g) for g in self.groups],
            "max_span": self.max_span,
        }


def _as_times(events) -> np.ndarray:
    if isinstance(events, EventSequence):
        return events.times
    times = np.asarray(events, dtype=np.int64)
    if times.ndim != 1:
        raise ValueError("times must be one-dimensional")
    if len(times) > 1 and np.any(np.diff(times) < 0):
        raise ValueError("times must be sorted non-decreasing")
    return times


def _greedy_starts(times: list[int], bound: int, limit: int | None = None) -> list[int]:
    # a group starting at index i absorbs every event with time <= times[i] + bound
    starts = []
    i, n = 0, len(times)
    while i < n:
        starts.append(i)
        if limit is not None and len(starts) > limit:
            break
        i = bisect_right(times, times[i] + bound, i)
    return starts


def min_groups_for_bound(times, bound: int) -> int:
    """Minimum number of contiguous groups whose spans are all <= ``bound``."""
    if bound < 0:
        raise ValueError("bound must be >= 0")
    times = _as_times(times)
    return len(_greedy_starts(times.tolist(), int(bound)))


def _build(times: np.ndarray, starts: list[int]) -> Segmentation:
    stops = starts[1:] + [len(times)]
    groups = tuple(zip(starts, stops))
    max_span = max(int(times[b - 1] - times[a]) for a, b in groups)
    boundaries = tuple(int(times[a]) for a in starts) + (int(times[-1]) + 1,)
    return Segmentation(boundaries=boundaries, groups=groups, max_span=max_span)


def segment_adaptive(events, max_groups: int = DEFAULT_MAX_GROUPS) -> Segmentation:
    """Minimax-span segmentation into at most ``max_groups`` groups.

    Accepts an :class:`EventSequence` or a sorted array of integer times.
    The returned packing is the greedy one at the optimal bound, so it may
    use fewer than ``max_groups`` groups.
    """
    if max_groups < 1:
        raise ValueError("max_groups must be >= 1")
    times = _as_times(events)
    if len(times) == 0:
        raise ValueError("cannot segment an empty sequence")
    tl = times.tolist()
    lo, hi = 0, tl[-1] - tl[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if len(_greedy_starts(tl, mid, limit=max_groups)) <= max_groups:
            hi = mid
        else:
            lo = mid + 1
    return _build(times, _greedy_starts(tl, lo))


def segment_fixed(events, group_size: int) -> Segmentation:
    """Consecutive chunks of ``group_size`` events; the last may be shorter."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    times = _as_times(events)
    if len(times) == 0:
        raise ValueError("cannot segment an empty sequence")
    return _build(times, list(range(0, len(times), group_size)))


class AdaptiveSegmenter(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping sequences to adaptive segmentations."""

    def __init__(self, max_groups: int = DEFAULT_MAX_GROUPS):
        self.max_groups = max_groups

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [segment_adaptive(s, self.max_groups) for s in X]


class FixedSegmenter(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping sequences to fixed-size chunks."""

    def __init__(self, group_size: int = 8):
        self.group_size = group_size

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [segment_fixed(s, self.group_size) for s in X]


def make_segmenter(kind: str = "adaptive", max_groups: int = DEFAULT_MAX_GROUPS, group_size: int = 8):
    if kind == "adaptive":
        return AdaptiveSegmenter(max_groups=max_groups)
    if kind == "fixed":
        return FixedSegmenter(group_size=group_size)
    raise ValueError(f"unknown segmentation kind {kind!r}; expected 'adaptive' or 'fixed'")
