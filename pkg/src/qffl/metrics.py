"""Fairness statistics over per-device accuracy distributions.

Accuracies come in as fractions and all reported statistics are in
percent (variance in percent squared).
"""

from __future__ import annotations

import statistics
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

STAT_FIELDS = ("mean_data_weighted", "mean_device", "worst10", "best10", "variance")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AccuracyDistribution:
    accs: np.ndarray
    weights: np.ndarray
    device_ids: tuple[int, ...]

    def __post_init__(self):
        n = len(self.device_ids)
        if n == 0:
            raise MetricsError("accuracy distribution is empty")
        if len(self.accs) != n or len(self.weights) != n:
            raise MetricsError("accs, weights and device_ids must align")
        if np.any(np.asarray(self.weights) < 1):
            raise MetricsError("weights must be >= 1")

    @classmethod
    def from_maps(cls, accs: Mapping[int, float], counts: Mapping[int, int]) -> "AccuracyDistribution":
        """Build from ``{device_id: accuracy}`` and ``{device_id: n_samples}``;
        devices without an accuracy entry are skipped."""
        ids = tuple(sorted(accs))
        return cls(np.array([accs[i] for i in ids], dtype=np.float64),
                   np.array([counts[i] for i in ids], dtype=np.float64), ids)


@dataclass(frozen=True)
class DistributionStats:
    mean_data_weighted: float
    mean_device: float
    worst10: float
    best10: float
    variance: float
    device_ids: tuple[int, ...] = ()

    def values(self) -> dict[str, float]:
        return {f: getattr(self, f) for f in STAT_FIELDS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["device_ids"] = list(self.device_ids)
        return d


def cohort_size(m: int) -> int:
    """``ceil(0.1 m)``, at least 1 (integer arithmetic avoids 0.1*m rounding up)."""
    return max(1, (m + 9) // 10)


def distribution_stats(dist: AccuracyDistribution) -> DistributionStats:
    a = np.asarray(dist.accs, dtype=np.float64)
    w = np.asarray(dist.weights, dtype=np.float64)
    ids = np.asarray(dist.device_ids)
    pct = 100.0 * a
    order = np.lexsort((ids, a))  # ascending accuracy, ties by device id
    k = cohort_size(a.size)
    return DistributionStats(
        mean_data_weighted=float(np.sum(w * pct) / np.sum(w)),
        mean_device=float(pct.mean()),
        worst10=float(pct[order[:k]].mean()),
        best10=float(pct[order[-k:]].mean()),
        variance=float(pct.var()),
        device_ids=tuple(int(i) for i in dist.device_ids),
    )


def is_fairer(a: DistributionStats, b: DistributionStats) -> bool:
    """True when ``a`` has strictly lower accuracy variance than ``b``."""
    if set(a.device_ids) != set(b.device_ids):
        raise MetricsError("fairness comparison needs statistics over the same device set")
    return a.variance < b.variance


def histogram(dist: AccuracyDistribution, num_bins: int = 10) -> list[int]:
    """Equal-width bin counts over [0, 1]; accuracy 1.0 lands in the last bin."""
    if num_bins < 1:
        raise MetricsError("num_bins must be >= 1")
    idx = np.minimum((np.asarray(dist.accs) * num_bins).astype(np.int64), num_bins - 1)
    return np.bincount(idx, minlength=num_bins).tolist()


def histogram_csv(counts: Sequence[int]) -> str:
    n = len(counts)
    rows = ["bin_lo,bin_hi,count"]
    rows += [f"{i / n!r},{(i + 1) / n!r},{c}" for i, c in enumerate(counts)]
    return "\n".join(rows) + "\n"


def aggregate_over_seeds(stats: Sequence[DistributionStats]) -> dict[str, tuple[float, float]]:
    """Per-field ``(mean, sample stdev)``; stdev is 0 for a single run."""
    if not stats:
        raise MetricsError("nothing to aggregate")
    out = {}
    for f in STAT_FIELDS:
        vals = [getattr(s, f) for s in stats]
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out[f] = (statistics.fmean(vals), sd)
    return out


def stats_for_split(result, split: str = "test") -> DistributionStats:
    """Distribution statistics of a run's final model on one split."""
    accs = getattr(result, f"per_device_{split}_acc")
    return distribution_stats(AccuracyDistribution.from_maps(accs, result.split_sizes[split]))

