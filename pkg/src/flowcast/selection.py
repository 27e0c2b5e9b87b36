"""Endpoint non-maximum suppression and the final fixed-size prediction set.

The decoder proposes more modes than the output contract allows.  Greedy NMS
keeps high-confidence modes whose endpoints are mutually farther apart than a
radius, then pads back suppressed modes (best first) so every scene emits
exactly ``k_out`` trajectories sorted by confidence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class NMSConfig:
    """Endpoint suppression radius and output set size."""

    radius: float = 2.5
    k_out: int = 6

    def __post_init__(self):
        if self.radius < 0:
            raise ConfigError("NMS radius must be nonnegative")
        if self.k_out < 1:
            raise ConfigError("k_out must be >= 1")


@dataclass(frozen=True)
class PredictionSet:
    """Final multi-modal prediction for one scene, confidence-sorted.

    Attributes:
        trajectories: [K, T_f, 2] in scene units.
        confidences: [K] mode probabilities in [0, 1], descending.
        padded: [K] True where the mode was suppressed by NMS and re-added
            only to honor the fixed output size.
        source_indices: [K] index of each output in the decoder's proposal set.
    """

    trajectories: np.ndarray
    confidences: np.ndarray
    padded: np.ndarray
    source_indices: np.ndarray

    def __post_init__(self):
        trajectories = np.asarray(self.trajectories, dtype=np.float64)
        confidences = np.asarray(self.confidences, dtype=np.float64)
        padded = np.asarray(self.padded, dtype=bool)
        source_indices = np.asarray(self.source_indices, dtype=np.int64)
        object.__setattr__(self, "trajectories", trajectories)
        object.__setattr__(self, "confidences", confidences)
        object.__setattr__(self, "padded", padded)
        object.__setattr__(self, "source_indices", source_indices)
        k = trajectories.shape[0]
        if trajectories.ndim != 3 or trajectories.shape[2] != 2:
            raise ConfigError(f"trajectories must be [K, T_f, 2], got {trajectories.shape}")
        if confidences.shape != (k,) or padded.shape != (k,) or source_indices.shape != (k,):
            raise ConfigError("confidences, padded, source_indices must all be [K]")
        if k and (np.diff(confidences) > 1e-12).any():
            raise ConfigError("confidences must be sorted descending")
        if k and ((confidences < -1e-12) | (confidences > 1.0 + 1e-12)).any():
            raise ConfigError("confidences must lie in [0, 1]")
        if len(np.unique(source_indices)) != k:
            raise ConfigError("source_indices must be distinct")

    @property
    def k(self) -> int:
        return self.trajectories.shape[0]

    @property
    def endpoints(self) -> np.ndarray:
        return self.trajectories[:, -1, :]


def nms_select(trajectories: np.ndarray, confidences: np.ndarray, config: NMSConfig) -> PredictionSet:
    """Greedy endpoint NMS with pad-back to a fixed output size.

    Modes are visited in confidence order (ties to the lower index).  A mode
    survives if its endpoint is farther than ``config.radius`` from every
    already-kept endpoint; a distance equal to the radius suppresses.  If
    fewer than ``k_out`` modes survive, suppressed modes re-enter best-first
    (flagged ``padded``).  The output is re-sorted by confidence descending.

    Args:
        trajectories: [N_q, T_f, 2] proposals in scene units.
        confidences: [N_q] mode probabilities.

    Returns:
        PredictionSet with exactly ``config.k_out`` modes.
    """
    trajectories = np.asarray(trajectories, dtype=np.float64)
    confidences = np.asarray(confidences, dtype=np.float64)
    n = trajectories.shape[0]
    if confidences.shape != (n,):
        raise ConfigError(f"need one confidence per mode, got {confidences.shape} for {n} modes")
    if config.k_out > n:
        raise ConfigError(f"cannot select {config.k_out} modes from {n} proposals")

    order = np.argsort(-confidences, kind="stable")
    endpoints = trajectories[:, -1, :]
    kept: list[int] = []
    suppressed: list[int] = []
    for idx in order:
        if len(kept) == config.k_out:
            suppressed.append(idx)
            continue
        if kept:
            dists = np.linalg.norm(endpoints[kept] - endpoints[idx], axis=-1)
            if (dists <= config.radius).any():
                suppressed.append(idx)
                continue
        kept.append(idx)

    padded_flags = [False] * len(kept)
    for idx in suppressed:
        if len(kept) == config.k_out:
            break
        kept.append(idx)
        padded_flags.append(True)

    chosen = np.asarray(kept, dtype=np.int64)
    flags = np.asarray(padded_flags, dtype=bool)
    # confidence order again: padding appends high-confidence suppressed modes
    # behind low-confidence survivors, so the final set needs one more sort
    resort = np.argsort(-confidences[chosen], kind="stable")
    chosen = chosen[resort]
    flags = flags[resort]
    return PredictionSet(
        trajectories=trajectories[chosen],
        confidences=confidences[chosen],
        padded=flags,
        source_indices=chosen,
    )


# ---------------------------------------------------------------------------
# Prediction files: one JSON record per line, joined to scenes by scene_id
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionRecord:
    scene_id: str
    predictions: PredictionSet


def prediction_to_json(record: PredictionRecord) -> dict:
    p = record.predictions
    return {
        "scene_id": record.scene_id,
        "trajectories": p.trajectories.tolist(),
        "confidences": p.confidences.tolist(),
        "padded": p.padded.astype(int).tolist(),
        "source_indices": p.source_indices.tolist(),
    }


def prediction_from_json(obj: dict) -> PredictionRecord:
    return PredictionRecord(
        scene_id=str(obj["scene_id"]),
        predictions=PredictionSet(
            trajectories=np.asarray(obj["trajectories"], dtype=np.float64),
            confidences=np.asarray(obj["confidences"], dtype=np.float64),
            padded=np.asarray(obj["padded"], dtype=bool),
            source_indices=np.asarray(obj["source_indices"], dtype=np.int64),
        ),
    )


def write_predictions(path, records: Sequence[PredictionRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for record in records:
            fh.write(json.dumps(prediction_to_json(record)) + "\n")


def read_predictions(path) -> list[PredictionRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(prediction_from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed prediction record ({exc})") from exc
    return records
