"""Streaming per-dimension mean/variance with batch merges.

Counts, means and population variances are merged with the pairwise
(Chan et al.) update, so a running triple absorbed batch by batch agrees
with the two-pass statistics of the concatenated stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .numerics import uniform_mean

DEFAULT_EPSILON = 1e-8
# counts are divided as float64; beyond 2**53 they stop being exact
COUNT_LIMIT = 2**53


class StatsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RunningStats:
    count: int
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if mean.ndim != 1 or mean.shape != var.shape:
            raise StatsError(f"mean/var shape mismatch: {mean.shape} vs {var.shape}")
        if self.count < 0:
            raise StatsError("count must be non-negative")
        if np.any(var < 0):
            raise StatsError("variance must be non-negative")
        if self.count == 0 and (np.any(mean != 0) or np.any(var != 0)):
            raise StatsError("empty stats must have zero mean and variance")
        mean.flags.writeable = False
        var.flags.writeable = False
        object.__setattr__(self, "count", int(self.count))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @classmethod
    def empty(cls, dim: int) -> "RunningStats":
        return cls(0, np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def equals(self, other: "RunningStats") -> bool:
        """Bit-exact equality."""
        return (
            self.count == other.count
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.var, other.var)
        )

    def to_dict(self) -> dict[str, Any]:
        return {"count": self.count, "mean": self.mean.tolist(), "var": self.var.tolist()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunningStats":
        return cls(int(d["count"]), np.array(d["mean"], dtype=np.float64), np.array(d["var"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class BatchSummary:
    count: int
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self) -> None:
        if self.count < 1:
            raise StatsError("batch count must be >= 1")


def summarize_batch(batch: np.ndarray) -> BatchSummary:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[0] == 0:
        raise StatsError("empty batch")
    if not np.all(np.isfinite(batch)):
        raise StatsError("non-finite observation")
    return BatchSummary(batch.shape[0], batch.mean(axis=0), batch.var(axis=0))


def combine(count_a, mean_a, var_a, count_b, mean_b, var_b):
    """Merge two (count, mean, var) summaries.

    Works element-wise on stacked arrays as well; counts may be integer
    arrays broadcastable against the mean/var arrays. This is the only place
    the merge arithmetic lives, so stacked and scalar callers agree bit for bit.
    """
    count = count_a + count_b
    delta = mean_b - mean_a
    w_b = count_b / count
    mean = mean_a + delta * w_b
    m_a = var_a * count_a
    m_b = var_b * count_b
    var = (m_a + m_b + delta * delta * count_a * count_b / count) / count
    return count, mean, var


def update(stats: RunningStats, batch: BatchSummary) -> RunningStats:
    if batch.mean.shape != stats.mean.shape:
        raise StatsError(f"dimension mismatch: stats {stats.dim}, batch {batch.mean.shape[0]}")
    if stats.count + batch.count > COUNT_LIMIT:
        raise StatsError("count overflow")
    count, mean, var = combine(stats.count, stats.mean, stats.var, batch.count, batch.mean, batch.var)
    return RunningStats(count, mean, var)


def normalize(stats: RunningStats, x: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    if stats.count == 0:
        raise StatsError("normalize before any update")
    if epsilon <= 0:
        raise StatsError("epsilon must be positive")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stats.dim:
        raise StatsError(f"dimension mismatch: stats {stats.dim}, x {x.shape[-1]}")
    return (x - stats.mean) / np.sqrt(stats.var + epsilon)


def merge_average(stats_list: Sequence[RunningStats], shared_count: int = 0) -> RunningStats:
    """Uniform average of means and variances; counts are summed.

    This is the server-side reduction of the shared-normalization ablation.
    ``shared_count`` is the count every entry started from at the previous
    merge; only what each entry added since then is summed, so a sample is
    never counted twice.
    """
    if len(stats_list) == 0:
        raise StatsError("empty stats list")
    dim = stats_list[0].dim
    for s in stats_list:
        if s.dim != dim:
            raise StatsError("dimension mismatch in merge_average")
        if s.count < 1:
            raise StatsError("merge_average requires count >= 1 for every entry")
        if s.count < shared_count:
            raise StatsError("an entry has fewer samples than the shared count it started from")
    mean = uniform_mean(np.stack([s.mean for s in stats_list]))
    var = uniform_mean(np.stack([s.var for s in stats_list]))
    count = shared_count + sum(s.count - shared_count for s in stats_list)
    return RunningStats(count, mean, var)
