"""Evaluation metrics for the four trajectory tasks.

Regression metrics (MAE / RMSE / MAPE) score travel-time estimates,
segment-set precision/recall scores recovered routes, rank metrics score
similarity search, and the recovery distance errors compare a recovered
trajectory against dense ground truth after aligning points by timestamp.
A :class:`MetricReport` bundles named values under a fixed vocabulary so
downstream CSV/JSON consumers see stable keys.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .roadnet import RoadNetwork, haversine_m, road_distance

__all__ = [
    "MetricsError",
    "RegressionMetrics",
    "regression_metrics",
    "seg_precision_recall",
    "PrecisionRecall",
    "averaged_precision_recall",
    "haversine_m",
    "RankMetrics",
    "rank_metrics",
    "RecoveryDistances",
    "recovery_distances",
    "MetricReport",
    "METRIC_KEYS",
]


class MetricsError(ValueError):
    """Raised when metric inputs are malformed or a metric is undefined."""


# ---------------------------------------------------------------------------
# regression


@dataclass(frozen=True)
class RegressionMetrics:
    """MAE/RMSE in the unit of the inputs, MAPE in percent."""

    mae: float
    rmse: float
    mape_pct: float
    n_zero_truth: int


def regression_metrics(predictions: Sequence[float], truths: Sequence[float]) -> RegressionMetrics:
    """Score scalar predictions against scalar truths.

    Samples whose truth is exactly zero are excluded from MAPE (the ratio is
    undefined there) and counted in ``n_zero_truth``; they still contribute
    to MAE and RMSE.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    true = np.asarray(truths, dtype=np.float64)
    if pred.ndim != 1 or true.ndim != 1:
        raise MetricsError("predictions and truths must be one-dimensional")
    if pred.shape != true.shape:
        raise MetricsError(f"length mismatch: {pred.shape[0]} predictions vs {true.shape[0]} truths")
    if pred.size == 0:
        raise MetricsError("regression metrics need at least one sample")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(true))):
        raise MetricsError("predictions and truths must be finite")
    err = np.abs(pred - true)
    nonzero = true != 0.0
    n_zero = int(np.count_nonzero(~nonzero))
    if n_zero == pred.size:
        raise MetricsError("every truth value is zero; MAPE is undefined")
    mape = 100.0 * float(np.mean(err[nonzero] / np.abs(true[nonzero])))
    return RegressionMetrics(
        mae=float(np.mean(err)),
        rmse=float(np.sqrt(np.mean(err * err))),
        mape_pct=mape,
        n_zero_truth=n_zero,
    )


# ---------------------------------------------------------------------------
# segment-set precision / recall


def seg_precision_recall(recovered: Iterable[int], truth: Iterable[int]) -> tuple[float, float]:
    """Precision and recall of one recovered segment set against the truth set.

    Precision is ``|R ∩ G| / |R|`` and recall is ``|R ∩ G| / |G|``.
    """
    rec = set(recovered)
    tru = set(truth)
    if not tru:
        raise MetricsError("truth segment set is empty; recall is undefined")
    if not rec:
        raise MetricsError("recovered segment set is empty; precision is undefined")
    hit = len(rec & tru)
    return hit / len(rec), hit / len(tru)


@dataclass(frozen=True)
class PrecisionRecall:
    """Per-sample precision/recall averaged over the samples that scored."""

    precision: float
    recall: float
    n_samples: int
    n_excluded: int


def averaged_precision_recall(
    recovered_sets: Sequence[Iterable[int]],
    truth_sets: Sequence[Iterable[int]],
) -> PrecisionRecall:
    """Average per-sample segment precision/recall over a dataset.

    Samples with an empty recovered set have undefined precision; they are
    excluded and counted in ``n_excluded``.  An empty truth set is an input
    error and raises.
    """
    if len(recovered_sets) != len(truth_sets):
        raise MetricsError(
            f"length mismatch: {len(recovered_sets)} recovered sets vs {len(truth_sets)} truth sets"
        )
    if not truth_sets:
        raise MetricsError("precision/recall needs at least one sample")
    precisions: list[float] = []
    recalls: list[float] = []
    n_excluded = 0
    for idx, (rec, tru) in enumerate(zip(recovered_sets, truth_sets)):
        rec = set(rec)
        tru = set(tru)
        if not tru:
            raise MetricsError(f"sample {idx}: truth segment set is empty")
        if not rec:
            n_excluded += 1
            continue
        p, r = seg_precision_recall(rec, tru)
        precisions.append(p)
        recalls.append(r)
    if not precisions:
        raise MetricsError("every sample had an empty recovered set; nothing to score")
    return PrecisionRecall(
        precision=float(np.mean(precisions)),
        recall=float(np.mean(recalls)),
        n_samples=len(precisions),
        n_excluded=n_excluded,
    )


# ---------------------------------------------------------------------------
# similarity-search ranking


@dataclass(frozen=True)
class RankMetrics:
    """Mean 1-based rank of the truth item and top-1 hit rate in percent."""

    mean_rank: float
    top1_acc_pct: float
    n_queries: int


def rank_metrics(rankings: Sequence[Sequence[int]], truths: Sequence[int]) -> RankMetrics:
    """Score ranked candidate lists against the known best match per query."""
    if len(rankings) != len(truths):
        raise MetricsError(f"length mismatch: {len(rankings)} rankings vs {len(truths)} truths")
    if not rankings:
        raise MetricsError("rank metrics need at least one query")
    ranks = np.empty(len(rankings), dtype=np.float64)
    for q, (ranking, want) in enumerate(zip(rankings, truths)):
        try:
            ranks[q] = list(ranking).index(want) + 1
        except ValueError:
            raise MetricsError(f"query {q}: truth id {want} is not in the ranking") from None
    return RankMetrics(
        mean_rank=float(np.mean(ranks)),
        top1_acc_pct=100.0 * float(np.mean(ranks == 1.0)),
        n_queries=len(rankings),
    )


# ---------------------------------------------------------------------------
# recovery distance errors


@dataclass(frozen=True)
class RecoveryDistances:
    """Mean errors of a recovered trajectory against dense ground truth."""

    mae_coor_m: float
    mae_road_m: float
    mae_time_s: float
    n_aligned: int
    n_unaligned: int


def recovery_distances(
    network: RoadNetwork,
    recovered_points: Sequence,
    recovered_coords: np.ndarray,
    recovered_times: Sequence[float],
    truth_points: Sequence,
    truth_coords: np.ndarray,
    truth_times: Sequence[float],
    eta: float,
) -> RecoveryDistances:
    """Distance errors between a recovered trajectory and the dense truth.

    Each truth point is aligned to the recovered point with the nearest
    timestamp; pairs further apart than ``eta / 2`` in time stay unaligned
    and are only counted.  Over the aligned pairs the coordinate error is
    the great-circle distance, the road error is the network distance
    between the two matched positions, and the time error is the timestamp
    gap itself.
    """
    if eta <= 0.0:
        raise MetricsError(f"eta must be positive, got {eta!r}")
    rec_coords = np.asarray(recovered_coords, dtype=np.float64)
    tru_coords = np.asarray(truth_coords, dtype=np.float64)
    rec_times = np.asarray(recovered_times, dtype=np.float64)
    tru_times = np.asarray(truth_times, dtype=np.float64)
    if len(recovered_points) != rec_coords.shape[0] or rec_coords.shape[0] != rec_times.shape[0]:
        raise MetricsError("recovered points, coords and times disagree in length")
    if len(truth_points) != tru_coords.shape[0] or tru_coords.shape[0] != tru_times.shape[0]:
        raise MetricsError("truth points, coords and times disagree in length")
    if rec_times.size == 0 or tru_times.size == 0:
        raise MetricsError("recovery distances need non-empty trajectories")

    coor_errs: list[float] = []
    road_errs: list[float] = []
    time_errs: list[float] = []
    n_unaligned = 0
    for j in range(tru_times.size):
        gaps = np.abs(rec_times - tru_times[j])
        i = int(np.argmin(gaps))
        if gaps[i] > eta / 2.0:
            n_unaligned += 1
            continue
        time_errs.append(float(gaps[i]))
        coor_errs.append(
            haversine_m(rec_coords[i, 0], rec_coords[i, 1], tru_coords[j, 0], tru_coords[j, 1])
        )
        rp, tp = recovered_points[i], truth_points[j]
        road_errs.append(
            road_distance(network, (rp.segment_id, rp.fraction), (tp.segment_id, tp.fraction))
        )
    if not time_errs:
        raise MetricsError("no truth point aligned with any recovered point within eta/2")
    return RecoveryDistances(
        mae_coor_m=float(np.mean(coor_errs)),
        mae_road_m=float(np.mean(road_errs)),
        mae_time_s=float(np.mean(time_errs)),
        n_aligned=len(time_errs),
        n_unaligned=n_unaligned,
    )


# ---------------------------------------------------------------------------
# report container

METRIC_KEYS = frozenset(
    {
        "mae",
        "rmse",
        "mape_pct",
        "precision",
        "recall",
        "mae_coor_m",
        "mae_road_m",
        "mae_time_s",
        "mean_rank",
        "top1_acc_pct",
    }
)


@dataclass(frozen=True)
class MetricReport:
    """Named metric values for one evaluation run.

    Keys come from the fixed :data:`METRIC_KEYS` vocabulary so files written
    by different tasks stay machine-comparable.
    """

    task: str
    values: Mapping[str, float]
    n_samples: int
    exclusions: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.task:
            raise MetricsError("report needs a task name")
        if self.n_samples < 1:
            raise MetricsError(f"report needs n_samples >= 1, got {self.n_samples}")
        if not self.values:
            raise MetricsError("report needs at least one metric value")
        for key, value in self.values.items():
            if key not in METRIC_KEYS:
                raise MetricsError(f"unknown metric key {key!r}; expected one of {sorted(METRIC_KEYS)}")
            if not math.isfinite(value):
                raise MetricsError(f"metric {key!r} is not finite: {value!r}")
        for key, count in self.exclusions.items():
            if count < 0:
                raise MetricsError(f"exclusion count {key!r} is negative: {count}")

    def to_json(self) -> str:
        payload = {
            "task": self.task,
            "n_samples": self.n_samples,
            "values": {k: float(v) for k, v in sorted(self.values.items())},
            "exclusions": {k: int(v) for k, v in sorted(self.exclusions.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        payload = json.loads(text)
        return cls(
            task=payload["task"],
            values=payload["values"],
            n_samples=payload["n_samples"],
            exclusions=payload.get("exclusions", {}),
        )
