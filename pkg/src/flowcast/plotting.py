"""Static SVG visualization of one scene and its predicted trajectories.

Left panel: the map, the ego history, gray neighbor markers, the ground
truth future (when available), and the K selected trajectories with
numbered endpoints — the most confident one drawn heavier.  Right panel:
the confidence of each selected trajectory, normalized to sum to one for
display only.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .scene import SceneRecord
from .selection import PredictionSet

# one fixed color per selected trajectory slot (most confident is slot 0)
_MODE_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
_MAP_COLOR = "#b0b0b0"
_NEIGHBOR_COLOR = "#7f7f7f"
_GT_COLOR = "#111111"


def _draw_map(ax, record: SceneRecord) -> None:
    polylines = record.context.map_polylines
    for p in range(polylines.n_polylines):
        mask = polylines.valid[p]
        points = polylines.points[p][mask]
        if points.shape[0] < 2:
            continue
        ax.plot(points[:, 0], points[:, 1], color=_MAP_COLOR, linewidth=0.8, zorder=1)


def _draw_neighbors(ax, record: SceneRecord) -> None:
    for neighbor in record.context.neighbors.histories:
        pos = neighbor.last_position
        heading = neighbor.last_heading
        length, width = 1.6, 0.9
        c, s = np.cos(heading), np.sin(heading)
        corners = np.array(
            [[-length, -width], [length, -width], [length, width], [-length, width]]
        ) / 2.0
        rotated = corners @ np.array([[c, s], [-s, c]]) + pos
        ax.fill(rotated[:, 0], rotated[:, 1], color=_NEIGHBOR_COLOR, alpha=0.6, zorder=2)


def _draw_ego_history(ax, record: SceneRecord) -> None:
    ego = record.context.ego
    valid = ego.valid_mask
    xy = ego.states[valid][:, 0:2]
    ax.plot(xy[:, 0], xy[:, 1], color=_GT_COLOR, linewidth=1.2, linestyle=":", zorder=3)
    ax.plot(xy[-1, 0], xy[-1, 1], marker="o", color=_GT_COLOR, markersize=4, zorder=4)


def plot_scene(
    record: SceneRecord,
    predictions: PredictionSet,
    out_path,
    show_ground_truth: bool = True,
    title: str | None = None,
) -> Path:
    """Render one scene + prediction set to a static SVG file.

    Args:
        record: scene (ego-frame) whose map/history/future to draw.
        predictions: K selected trajectories, confidence-sorted.
        out_path: output file; parent directories are created.
        show_ground_truth: also draw the recorded future trajectory.
        title: optional figure title (defaults to the scene id).

    Returns:
        The path the SVG was written to.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax_scene, ax_conf) = plt.subplots(
        1, 2, figsize=(10, 5), gridspec_kw={"width_ratios": [3, 1]}
    )

    _draw_map(ax_scene, record)
    _draw_neighbors(ax_scene, record)
    _draw_ego_history(ax_scene, record)

    if show_ground_truth:
        gt = record.future.waypoints
        ax_scene.plot(gt[:, 0], gt[:, 1], color=_GT_COLOR, linewidth=2.0, zorder=5, label="ground truth")
        ax_scene.plot(
            gt[-1, 0], gt[-1, 1], marker="*", color=_GT_COLOR, markersize=12, zorder=6
        )

    k = predictions.trajectories.shape[0]
    for slot in range(k):
        color = _MODE_COLORS[slot % len(_MODE_COLORS)]
        traj = predictions.trajectories[slot]
        heavy = slot == 0  # selected sets are confidence-sorted, best first
        ax_scene.plot(
            traj[:, 0],
            traj[:, 1],
            color=color,
            linewidth=2.2 if heavy else 1.2,
            alpha=1.0 if heavy else 0.85,
            zorder=8 if heavy else 7,
        )
        ax_scene.annotate(
            str(slot + 1),
            xy=(traj[-1, 0], traj[-1, 1]),
            color="white",
            fontsize=7,
            ha="center",
            va="center",
            zorder=10,
            bbox={"boxstyle": "circle,pad=0.15", "facecolor": color, "edgecolor": "none"},
        )

    ax_scene.set_aspect("equal", adjustable="datalim")
    ax_scene.set_xlabel("x (m)")
    ax_scene.set_ylabel("y (m)")
    ax_scene.set_title(title if title is not None else record.scene_id)

    conf = predictions.confidences
    total = conf.sum()
    shown = conf / total if total > 0 else np.full_like(conf, 1.0 / max(len(conf), 1))
    slots = np.arange(1, k + 1)
    ax_conf.bar(slots, shown, color=[_MODE_COLORS[i % len(_MODE_COLORS)] for i in range(k)])
    ax_conf.set_xticks(slots)
    ax_conf.set_xlabel("trajectory")
    ax_conf.set_ylabel("normalized confidence")
    ax_conf.set_ylim(0.0, 1.0)
    ax_conf.set_title("confidence")

    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path
