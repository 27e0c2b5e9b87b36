"""Displacement metrics and bucketed mean average precision.

minADE / minFDE take the best mode per scene; Miss Rate counts scenes whose
best final displacement exceeds a threshold.  For mAP, scenes are grouped
into coarse motion buckets from their ground-truth future (stationary,
straight, left turn, right turn); within each bucket all predictions pool
into one confidence-ranked list and average precision integrates the
running-max interpolated precision over recall.  Soft mAP differs only in
ignoring (rather than penalizing) extra matching predictions of an object
that already has its top match counted.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .scene import AgentHistory, FutureTrajectory, wrap_angle
from .selection import PredictionSet

DEFAULT_MISS_THRESHOLD = 2.0
STATIONARY_DISPLACEMENT = 1.0
TURN_ANGLE_DEG = 15.0


class MotionBucket(enum.Enum):
    STATIONARY = "stationary"
    STRAIGHT = "straight"
    LEFT_TURN = "left_turn"
    RIGHT_TURN = "right_turn"


# one evaluation unit: predictions for one object, its GT, its history
EvalEntry = tuple[PredictionSet, FutureTrajectory, AgentHistory]


def min_ade(preds: PredictionSet, gt: FutureTrajectory) -> float:
    """Minimum over modes of the mean pointwise displacement."""
    d = np.linalg.norm(preds.trajectories - gt.waypoints[None], axis=-1)  # [K, T_f]
    return float(d.mean(axis=-1).min())


def min_fde(preds: PredictionSet, gt: FutureTrajectory) -> float:
    """Minimum over modes of the final-waypoint displacement."""
    d = np.linalg.norm(preds.endpoints - gt.waypoints[-1][None], axis=-1)  # [K]
    return float(d.min())


def miss(preds: PredictionSet, gt: FutureTrajectory, threshold: float = DEFAULT_MISS_THRESHOLD) -> bool:
    """True iff every mode's final displacement strictly exceeds threshold."""
    return min_fde(preds, gt) > threshold


def classify_motion(gt: FutureTrajectory, ego_history: AgentHistory) -> MotionBucket:
    """Coarse motion type of a ground-truth future.

    Stationary when the endpoint stays within STATIONARY_DISPLACEMENT of the
    agent's last observed position; otherwise the net heading change (last
    movement direction minus last observed heading) picks straight / left /
    right with a +-15 degree band.
    """
    start = ego_history.last_position
    if float(np.linalg.norm(gt.waypoints[-1] - start)) < STATIONARY_DISPLACEMENT:
        return MotionBucket.STATIONARY
    points = np.concatenate([start[None], gt.waypoints], axis=0)
    final_heading = None
    for j in range(points.shape[0] - 1, 0, -1):
        seg = points[j] - points[j - 1]
        if np.linalg.norm(seg) > 1e-9:
            final_heading = math.atan2(seg[1], seg[0])
            break
    if final_heading is None:  # moved > 1 unit yet no segment: unreachable
        return MotionBucket.STRAIGHT
    dtheta = wrap_angle(final_heading - ego_history.last_heading)
    band = math.radians(TURN_ANGLE_DEG)
    if abs(dtheta) < band:
        return MotionBucket.STRAIGHT
    return MotionBucket.LEFT_TURN if dtheta > 0 else MotionBucket.RIGHT_TURN


def _bucket_average_precision(entries: Sequence[EvalEntry], threshold: float, soft: bool) -> float:
    """AP of one bucket: pooled confidence-ranked PR with running-max interp."""
    pooled = []  # (confidence, pool_order, object_index, matches)
    order = 0
    for obj_idx, (preds, gt, _ego) in enumerate(entries):
        end_dist = np.linalg.norm(preds.endpoints - gt.waypoints[-1][None], axis=-1)
        for k in range(preds.k):
            pooled.append((float(preds.confidences[k]), order, obj_idx, bool(end_dist[k] <= threshold)))
            order += 1
    pooled.sort(key=lambda rec: (-rec[0], rec[1]))

    n_objects = len(entries)
    matched = set()
    tp_flags: list[bool] = []  # per counted prediction (soft mode skips extras)
    for _conf, _order, obj_idx, is_match in pooled:
        if is_match:
            if obj_idx not in matched:
                matched.add(obj_idx)
                tp_flags.append(True)
            elif soft:
                continue  # extra match: neither TP nor FP
            else:
                tp_flags.append(False)
        else:
            tp_flags.append(False)
    if not tp_flags:
        return 0.0

    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    counted = np.arange(1, len(tp_flags) + 1, dtype=np.float64)
    recall = tp / n_objects
    precision = tp / counted
    interp = np.maximum.accumulate(precision[::-1])[::-1]  # running max from the right
    ap = 0.0
    prev_recall = 0.0
    for i, flag in enumerate(tp_flags):
        if flag:
            ap += (recall[i] - prev_recall) * interp[i]
            prev_recall = recall[i]
    return float(ap)


@dataclass(frozen=True)
class BucketStats:
    ap: float
    soft_ap: float
    count: int


def mean_average_precision(
    entries: Sequence[EvalEntry],
    threshold: float = DEFAULT_MISS_THRESHOLD,
    soft: bool = False,
) -> tuple[float, dict[MotionBucket, float]]:
    """mAP over non-empty motion buckets.

    A prediction matches its object when its final displacement is within
    ``threshold``.  Hard mode counts every match beyond the object's
    highest-confidence one as a false positive; soft mode ignores them.

    Returns:
        (map, per-bucket AP for non-empty buckets).
    """
    if not entries:
        raise DataError("cannot compute mAP on an empty dataset")
    buckets: dict[MotionBucket, list[EvalEntry]] = {}
    for entry in entries:
        bucket = classify_motion(entry[1], entry[2])
        buckets.setdefault(bucket, []).append(entry)
    per_bucket = {b: _bucket_average_precision(items, threshold, soft) for b, items in buckets.items()}
    return float(np.mean(list(per_bucket.values()))), per_bucket


@dataclass(frozen=True)
class MetricReport:
    """Dataset-level evaluation summary.

    min_ade / min_fde / miss_rate are means over scenes; map and soft_map
    average bucket APs over non-empty buckets.
    """

    min_ade: float
    min_fde: float
    miss_rate: float
    map: float
    soft_map: float
    per_bucket: dict[MotionBucket, BucketStats]
    miss_threshold: float
    n_scenes: int


def evaluate(entries: Sequence[EvalEntry], miss_threshold: float = DEFAULT_MISS_THRESHOLD) -> MetricReport:
    """All metrics over a dataset of (predictions, ground truth, history)."""
    if not entries:
        raise DataError("cannot evaluate an empty dataset")
    ades = [min_ade(p, gt) for p, gt, _ in entries]
    fdes = [min_fde(p, gt) for p, gt, _ in entries]
    misses = [float(fde > miss_threshold) for fde in fdes]
    hard_map, hard_buckets = mean_average_precision(entries, miss_threshold, soft=False)
    soft_map, soft_buckets = mean_average_precision(entries, miss_threshold, soft=True)
    counts: dict[MotionBucket, int] = {}
    for entry in entries:
        bucket = classify_motion(entry[1], entry[2])
        counts[bucket] = counts.get(bucket, 0) + 1
    per_bucket = {
        b: BucketStats(ap=hard_buckets[b], soft_ap=soft_buckets[b], count=counts[b]) for b in hard_buckets
    }
    return MetricReport(
        min_ade=float(np.mean(ades)),
        min_fde=float(np.mean(fdes)),
        miss_rate=float(np.mean(misses)),
        map=hard_map,
        soft_map=soft_map,
        per_bucket=per_bucket,
        miss_threshold=miss_threshold,
        n_scenes=len(entries),
    )


def write_metric_report(path, report: MetricReport) -> None:
    """Write the report as CSV rows (metric, bucket, value)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "bucket", "value"])
        writer.writerow(["min_ade", "all", repr(report.min_ade)])
        writer.writerow(["min_fde", "all", repr(report.min_fde)])
        writer.writerow(["miss_rate", "all", repr(report.miss_rate)])
        writer.writerow(["map", "all", repr(report.map)])
        writer.writerow(["soft_map", "all", repr(report.soft_map)])
        writer.writerow(["miss_threshold", "all", repr(report.miss_threshold)])
        writer.writerow(["n_scenes", "all", repr(float(report.n_scenes))])
        for bucket in MotionBucket:
            stats = report.per_bucket.get(bucket)
            if stats is None:
                continue
            writer.writerow(["ap", bucket.value, repr(stats.ap)])
            writer.writerow(["soft_ap", bucket.value, repr(stats.soft_ap)])
            writer.writerow(["count", bucket.value, repr(float(stats.count))])


def report_summary_line(report: MetricReport) -> str:
    """One machine-parsable JSON line with the headline numbers."""
    return json.dumps(
        {
            "min_ade": report.min_ade,
            "min_fde": report.min_fde,
            "miss_rate": report.miss_rate,
            "map": report.map,
            "soft_map": report.soft_map,
            "n_scenes": report.n_scenes,
        },
        sort_keys=True,
    )


def read_metric_report(path) -> dict:
    """Parse a metric CSV back into {metric: {bucket: value}}."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    out: dict[str, dict[str, float]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                out.setdefault(row["metric"], {})[row["bucket"]] = float(row["value"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed metric row {row!r} ({exc})") from exc
    return out
