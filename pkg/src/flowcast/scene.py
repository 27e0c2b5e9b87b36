"""Scene and trajectory data types plus a synthetic lane-fork scene generator.

Coordinates live in an ego-centric frame: the ego agent's last observed
position sits at the origin with its heading aligned to +x.  The generator
builds scenes around a fork junction; the ground-truth future follows one
randomly chosen branch, which makes the future distribution genuinely
multi-modal with known geometry (useful for sanity bounds in tests).

Agent state layout per frame (AGENT_STATE_DIM = 7):
    x, y, vx, vy, cos(heading), sin(heading), valid

Map point layout (MAP_POINT_DIM = 8):
    x, y, dx, dy, one-hot polyline type (lane, sidewalk, crosswalk, edge)
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

AGENT_STATE_DIM = 7
MAP_POINT_DIM = 8
TRAJ_DIM = 2

_SCALE_FLOOR = 1e-6


class AgentType(enum.Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"


class PolylineType(enum.Enum):
    LANE = "lane"
    SIDEWALK = "sidewalk"
    CROSSWALK = "crosswalk"
    EDGE = "edge"


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = (theta + math.pi) % (2.0 * math.pi) - math.pi
    if wrapped == -math.pi:
        return math.pi
    return wrapped


@dataclass(frozen=True)
class AgentHistory:
    """Observed past states of one agent, shape [T_p, 7]."""

    states: np.ndarray
    agent_type: AgentType = AgentType.VEHICLE

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        object.__setattr__(self, "states", states)
        if states.ndim != 2 or states.shape[1] != AGENT_STATE_DIM or states.shape[0] < 1:
            raise ConfigError(f"agent history must be [T_p>=1, {AGENT_STATE_DIM}], got {states.shape}")
        valid = states[:, 6] > 0.5
        if valid.any() and not np.isfinite(states[valid]).all():
            raise DataError("agent history has nonfinite values on valid frames")

    @property
    def valid_mask(self) -> np.ndarray:
        return self.states[:, 6] > 0.5

    @property
    def last_valid_index(self) -> int:
        idx = np.flatnonzero(self.valid_mask)
        return int(idx[-1]) if idx.size else -1

    @property
    def last_position(self) -> np.ndarray:
        i = self.last_valid_index
        return self.states[i, 0:2].copy() if i >= 0 else np.zeros(2)

    @property
    def last_heading(self) -> float:
        i = self.last_valid_index
        if i < 0:
            return 0.0
        return wrap_angle(math.atan2(self.states[i, 5], self.states[i, 4]))


@dataclass(frozen=True)
class NeighborSet:
    histories: tuple[AgentHistory, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "histories", tuple(self.histories))

    def __len__(self) -> int:
        return len(self.histories)


@dataclass(frozen=True)
class MapPolylines:
    """Fixed-size polyline block: [N_m, D_p, 8] points with a validity mask.

    Short polylines are zero-padded; ``valid`` marks real points.
    """

    points: np.ndarray
    valid: np.ndarray
    types: tuple[PolylineType, ...]

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "types", tuple(self.types))
        if points.ndim != 3 or points.shape[2] != MAP_POINT_DIM:
            raise ConfigError(f"map points must be [N_m, D_p, {MAP_POINT_DIM}], got {points.shape}")
        if valid.shape != points.shape[:2]:
            raise ConfigError("map validity mask must match [N_m, D_p]")
        if len(self.types) != points.shape[0]:
            raise ConfigError("one type per polyline required")

    @property
    def n_polylines(self) -> int:
        return self.points.shape[0]

    @staticmethod
    def empty(points_per_polyline: int) -> "MapPolylines":
        return MapPolylines(
            np.zeros((0, points_per_polyline, MAP_POINT_DIM)),
            np.zeros((0, points_per_polyline), dtype=bool),
            (),
        )


@dataclass(frozen=True)
class SceneContext:
    """Full conditioning set for one prediction: ego + neighbors + map."""

    ego: AgentHistory
    neighbors: NeighborSet
    map_polylines: MapPolylines

    @property
    def n_agents(self) -> int:
        return 1 + len(self.neighbors)


@dataclass(frozen=True)
class FutureTrajectory:
    """Future waypoints, shape [T_f, 2]."""

    waypoints: np.ndarray

    def __post_init__(self):
        waypoints = np.asarray(self.waypoints, dtype=np.float64)
        object.__setattr__(self, "waypoints", waypoints)
        if waypoints.ndim != 2 or waypoints.shape[1] != TRAJ_DIM:
            raise ConfigError(f"future trajectory must be [T_f, {TRAJ_DIM}], got {waypoints.shape}")
        if not np.isfinite(waypoints).all():
            raise DataError("future trajectory has nonfinite waypoints")

    @property
    def horizon(self) -> int:
        return self.waypoints.shape[0]


@dataclass(frozen=True)
class Normalizer:
    """Componentwise affine map to roughly [-1, 1]: (x - offset) / scale."""

    offset: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        offset = np.asarray(self.offset, dtype=np.float64).reshape(TRAJ_DIM)
        scale = np.asarray(self.scale, dtype=np.float64).reshape(TRAJ_DIM)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "scale", scale)
        if not (scale > 0).all():
            raise ConfigError("normalizer scale must be positive componentwise")

    def normalize_array(self, xy):
        return (np.asarray(xy, dtype=np.float64) - self.offset) / self.scale

    def denormalize_array(self, xy):
        return np.asarray(xy, dtype=np.float64) * self.scale + self.offset

    def normalize(self, traj: FutureTrajectory) -> FutureTrajectory:
        return FutureTrajectory(self.normalize_array(traj.waypoints))

    def denormalize(self, traj: FutureTrajectory) -> FutureTrajectory:
        return FutureTrajectory(self.denormalize_array(traj.waypoints))

    @staticmethod
    def identity() -> "Normalizer":
        return Normalizer(np.zeros(TRAJ_DIM), np.ones(TRAJ_DIM))


def fit_normalizer(dataset: Sequence[FutureTrajectory], coverage: float = 0.999) -> Normalizer:
    """Fit offset/scale so at least ``coverage`` of coordinates land in [-1, 1].

    Uses symmetric order-statistic trimming per component, so the coverage
    guarantee is exact rather than quantile-interpolated.
    """
    if len(dataset) == 0:
        raise DataError("cannot fit a normalizer on an empty dataset")
    if not (0.5 < coverage <= 1.0):
        raise ConfigError(f"coverage must lie in (0.5, 1], got {coverage}")
    coords = np.concatenate([t.waypoints for t in dataset], axis=0)  # [sum T_f, 2]
    offset = np.zeros(TRAJ_DIM)
    scale = np.zeros(TRAJ_DIM)
    n = coords.shape[0]
    n_out = int(math.floor((1.0 - coverage) * n))
    n_lo = n_out // 2
    n_hi = n_out - n_lo
    for d in range(TRAJ_DIM):
        values = np.sort(coords[:, d])
        lo = values[n_lo]
        hi = values[n - 1 - n_hi]
        offset[d] = 0.5 * (lo + hi)
        scale[d] = max(0.5 * (hi - lo), _SCALE_FLOOR)
    return Normalizer(offset, scale)


# ---------------------------------------------------------------------------
# Synthetic scene generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneGenConfig:
    """Geometry and noise parameters for the fork-junction generator.

    Speeds are in scene units per step; one branch with zero noise yields a
    ground truth that lies exactly on the lane centerline.
    """

    n_branches: int = 2
    branch_probs: tuple[float, ...] | None = None
    max_branch_angle_deg: float = 40.0
    n_neighbors: int = 4
    t_past: int = 11
    t_future: int = 16
    speed_range: tuple[float, float] = (0.8, 1.6)
    position_noise: float = 0.05
    heading_noise: float = 0.02
    # std-dev of the relative speed change reached by the end of the horizon;
    # the drift is invisible in the history, so it puts genuinely
    # context-unpredictable longitudinal spread into the future
    speed_drift: float = 0.0
    # per-step std-dev of a cumulative Gaussian wander added to the future
    # waypoints only; unlike speed_drift it is high-dimensional, so no small
    # set of sampled modes can guess it
    future_walk: float = 0.0
    points_per_polyline: int = 16
    approach_length: float = 15.0
    lane_length: float = 30.0
    lane_width: float = 3.5
    max_polylines: int = 64
    include_boundaries: bool = True
    include_crosswalk: bool = True

    def __post_init__(self):
        if self.n_branches < 1:
            raise ConfigError("n_branches must be >= 1")
        if self.n_neighbors < 0:
            raise ConfigError("n_neighbors must be >= 0")
        if self.t_past < 1 or self.t_future < 1:
            raise ConfigError("t_past and t_future must be >= 1")
        if self.points_per_polyline < 2:
            raise ConfigError("points_per_polyline must be >= 2")
        if not (0 < self.speed_range[0] <= self.speed_range[1]):
            raise ConfigError("speed_range must satisfy 0 < lo <= hi")
        if self.position_noise < 0 or self.heading_noise < 0:
            raise ConfigError("noise levels must be nonnegative")
        if not (0.0 <= self.speed_drift < 1.0):
            raise ConfigError("speed_drift must lie in [0, 1)")
        if self.future_walk < 0:
            raise ConfigError("future_walk must be nonnegative")
        if self.approach_length <= 0 or self.lane_length <= 0 or self.lane_width <= 0:
            raise ConfigError("lane geometry lengths must be positive")
        if self.max_polylines < 1:
            raise ConfigError("max_polylines must be >= 1")
        if self.branch_probs is not None:
            probs = tuple(float(p) for p in self.branch_probs)
            if len(probs) != self.n_branches:
                raise ConfigError("branch_probs length must equal n_branches")
            if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
                raise ConfigError("branch_probs must be a probability vector")
            object.__setattr__(self, "branch_probs", probs)

    @property
    def probs(self) -> np.ndarray:
        if self.branch_probs is None:
            return np.full(self.n_branches, 1.0 / self.n_branches)
        return np.asarray(self.branch_probs, dtype=np.float64)

    def branch_angles(self) -> np.ndarray:
        """Total heading change of every branch, radians, sorted left-to-right."""
        if self.n_branches == 1:
            return np.zeros(1)
        a = math.radians(self.max_branch_angle_deg)
        return np.linspace(-a, a, self.n_branches)


def branch_centerline(config: SceneGenConfig, branch: int, arc_lengths: np.ndarray) -> np.ndarray:
    """Centerline points of one branch at the given arc lengths (local frame).

    Branches are constant-curvature arcs leaving the junction heading +x; the
    curvature is the branch's total heading change over ``lane_length``.

    Args:
        branch: branch index into ``config.branch_angles()``.
        arc_lengths: [n] distances along the arc from the junction.

    Returns:
        [n, 2] xy points.
    """
    return _branch_points(config, branch, arc_lengths)


def _branch_points(config: SceneGenConfig, branch: int, arc_lengths: np.ndarray) -> np.ndarray:
    angle = config.branch_angles()[branch]
    s = np.asarray(arc_lengths, dtype=np.float64)
    if abs(angle) < 1e-12:
        return np.stack([s, np.zeros_like(s)], axis=-1)
    kappa = angle / config.lane_length  # curvature fixed by the full lane
    radius = 1.0 / kappa
    phi = kappa * s
    return np.stack([radius * np.sin(phi), radius * (1.0 - np.cos(phi))], axis=-1)


def _branch_headings(config: SceneGenConfig, branch: int, arc_lengths: np.ndarray) -> np.ndarray:
    angle = config.branch_angles()[branch]
    return (angle / config.lane_length) * np.asarray(arc_lengths, dtype=np.float64)


def inter_mode_half_distance(config: SceneGenConfig) -> float:
    """Half the minimum pairwise mean distance between branch futures.

    Evaluated at the slowest configured speed, so it lower-bounds the ADE gap
    between any two modes the generator can emit.  Infinite for one branch.
    """
    if config.n_branches < 2:
        return math.inf
    v = config.speed_range[0]
    s = v * np.arange(1, config.t_future + 1)
    paths = [_branch_points(config, b, s) for b in range(config.n_branches)]
    best = math.inf
    for i in range(len(paths)):
        for j in range(i + 1, len(paths)):
            ade = float(np.linalg.norm(paths[i] - paths[j], axis=-1).mean())
            best = min(best, ade)
    return 0.5 * best


@dataclass(frozen=True)
class RawScene:
    """World-frame scene before ego-centric re-framing (generator internal)."""

    ego: AgentHistory
    neighbors: NeighborSet
    map_polylines: MapPolylines
    future: np.ndarray  # [T_f, 2] world frame
    branch_index: int


def _transform_states(states: np.ndarray, rot: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Apply a rigid transform to agent states; invalid frames stay zeroed."""
    out = states.copy()
    valid = states[:, 6] > 0.5
    out[valid, 0:2] = states[valid, 0:2] @ rot.T + shift
    out[valid, 2:4] = states[valid, 2:4] @ rot.T
    out[valid, 4:6] = states[valid, 4:6] @ rot.T  # (cos, sin) rotates like a vector
    return out


def transform_raw_scene(raw: RawScene, angle: float, translation) -> RawScene:
    """Rigidly transform a world-frame scene (rotation then translation)."""
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    shift = np.asarray(translation, dtype=np.float64).reshape(2)
    ego = AgentHistory(_transform_states(raw.ego.states, rot, shift), raw.ego.agent_type)
    neighbors = NeighborSet(
        tuple(AgentHistory(_transform_states(n.states, rot, shift), n.agent_type) for n in raw.neighbors.histories)
    )
    points = raw.map_polylines.points.copy()
    mask = raw.map_polylines.valid
    points[mask, 0:2] = raw.map_polylines.points[mask, 0:2] @ rot.T + shift
    points[mask, 2:4] = raw.map_polylines.points[mask, 2:4] @ rot.T
    map_polylines = MapPolylines(points, mask.copy(), raw.map_polylines.types)
    future = raw.future @ rot.T + shift
    return RawScene(ego, neighbors, map_polylines, future, raw.branch_index)


def to_ego_frame(raw: RawScene) -> tuple[SceneContext, FutureTrajectory]:
    """Re-frame a world scene so the ego's last pose is the origin facing +x."""
    anchor = raw.ego.last_position
    heading = raw.ego.last_heading
    shifted = transform_raw_scene(raw, 0.0, -anchor)
    centered = transform_raw_scene(shifted, -heading, (0.0, 0.0))
    context = SceneContext(centered.ego, centered.neighbors, centered.map_polylines)
    return context, FutureTrajectory(centered.future)


def _polyline_features(points_xy: np.ndarray, n_points: int, ptype: PolylineType) -> tuple[np.ndarray, np.ndarray]:
    """Pack xy points into the 8-dim map layout, padding to ``n_points``."""
    m = points_xy.shape[0]
    feats = np.zeros((n_points, MAP_POINT_DIM))
    valid = np.zeros(n_points, dtype=bool)
    take = min(m, n_points)
    feats[:take, 0:2] = points_xy[:take]
    tangents = np.zeros((take, 2))
    if take >= 2:
        seg = np.diff(points_xy[:take], axis=0)
        norms = np.linalg.norm(seg, axis=-1, keepdims=True)
        seg = np.divide(seg, norms, out=np.zeros_like(seg), where=norms > 1e-12)
        tangents[:-1] = seg
        tangents[-1] = seg[-1]
    feats[:take, 2:4] = tangents
    one_hot_index = {PolylineType.LANE: 4, PolylineType.SIDEWALK: 5, PolylineType.CROSSWALK: 6, PolylineType.EDGE: 7}
    feats[:take, one_hot_index[ptype]] = 1.0
    valid[:take] = True
    return feats, valid


def _offset_curve(points: np.ndarray, offset: float) -> np.ndarray:
    """Shift a polyline laterally by ``offset`` along its left normal."""
    seg = np.diff(points, axis=0)
    seg = np.vstack([seg, seg[-1:]])
    norms = np.linalg.norm(seg, axis=-1, keepdims=True)
    tangent = np.divide(seg, norms, out=np.zeros_like(seg), where=norms > 1e-12)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=-1)
    return points + offset * normal


def _build_map(config: SceneGenConfig, rng: np.random.Generator) -> MapPolylines:
    """Local-frame lane network for the fork junction."""
    n_pts = config.points_per_polyline
    entries: list[tuple[np.ndarray, PolylineType]] = []

    s_approach = np.linspace(-config.approach_length, 0.0, n_pts)
    approach = np.stack([s_approach, np.zeros(n_pts)], axis=-1)
    entries.append((approach, PolylineType.LANE))

    s_branch = np.linspace(0.0, config.lane_length, n_pts)
    branches = [_branch_points(config, b, s_branch) for b in range(config.n_branches)]
    for line in branches:
        entries.append((line, PolylineType.LANE))

    if config.include_boundaries:
        half = 0.5 * config.lane_width
        for line in [approach] + branches:
            entries.append((_offset_curve(line, half), PolylineType.EDGE))
            entries.append((_offset_curve(line, -half), PolylineType.EDGE))
        # sidewalks flank the approach one lane-width out
        entries.append((_offset_curve(approach, config.lane_width), PolylineType.SIDEWALK))
        entries.append((_offset_curve(approach, -config.lane_width), PolylineType.SIDEWALK))

    feats_list = []
    valid_list = []
    types = []
    for line, ptype in entries:
        feats, valid = _polyline_features(line, n_pts, ptype)
        feats_list.append(feats)
        valid_list.append(valid)
        types.append(ptype)

    if config.include_crosswalk:
        # short crosswalk across the approach lane; padded points exercise masks
        x0 = -rng.uniform(2.0, 6.0)
        ys = np.linspace(-config.lane_width, config.lane_width, 4)
        cross = np.stack([np.full(4, x0), ys], axis=-1)
        feats, valid = _polyline_features(cross, n_pts, PolylineType.CROSSWALK)
        feats_list.append(feats)
        valid_list.append(valid)
        types.append(PolylineType.CROSSWALK)

    points = np.stack(feats_list)[: config.max_polylines]
    valid = np.stack(valid_list)[: config.max_polylines]
    types = tuple(types[: config.max_polylines])
    return MapPolylines(points, valid, types)


def _agent_states_on_lane(
    config: SceneGenConfig,
    rng: np.random.Generator,
    line_of,
    heading_of,
    speed: float,
    end_arclength: float,
    first_valid: int,
) -> np.ndarray:
    """History states for an agent driving along a lane, ending at end_arclength."""
    t_p = config.t_past
    states = np.zeros((t_p, AGENT_STATE_DIM))
    for k in range(t_p):
        if k < first_valid:
            continue
        s = end_arclength - speed * (t_p - 1 - k)
        pos = line_of(s)
        head = heading_of(s) + rng.normal(0.0, config.heading_noise)
        pos = pos + rng.normal(0.0, config.position_noise, size=2)
        states[k, 0:2] = pos
        states[k, 2:4] = speed * np.array([math.cos(head), math.sin(head)])
        states[k, 4] = math.cos(head)
        states[k, 5] = math.sin(head)
        states[k, 6] = 1.0
    return states


def generate_raw_scene(seed: int, config: SceneGenConfig) -> RawScene:
    """Deterministic world-frame scene for one seed (see ``generate_scene``)."""
    rng = np.random.default_rng(seed)

    world_shift = rng.uniform(-100.0, 100.0, size=2)
    world_angle = rng.uniform(-math.pi, math.pi)

    ego_speed = rng.uniform(*config.speed_range)

    # ego drives the approach lane (y = 0, x <= 0) and ends at the junction
    def approach_line(s):
        return np.array([min(s, 0.0), 0.0])

    def approach_heading(s):
        return 0.0

    ego_states = _agent_states_on_lane(config, rng, approach_line, approach_heading, ego_speed, 0.0, 0)
    # the last observed frame anchors the ego frame; keep it exactly on-lane
    # so zero-noise configs put the future exactly on the centerline
    ego_states[-1, 0:2] = (0.0, 0.0)
    ego_states[-1, 2:4] = (ego_speed, 0.0)
    ego_states[-1, 4:6] = (1.0, 0.0)

    branch = int(rng.choice(config.n_branches, p=config.probs))
    steps_ahead = np.arange(1, config.t_future + 1)
    if config.speed_drift > 0:
        # future speed ramps linearly to (1 + drift) x the observed speed by
        # the end of the horizon; the history stays at constant speed, so the
        # drift cannot be inferred from context
        drift = float(np.clip(rng.normal(0.0, config.speed_drift), -0.95, 0.95))
        s_future = np.cumsum(ego_speed * (1.0 + drift * steps_ahead / config.t_future))
    else:
        s_future = ego_speed * steps_ahead
    future = _branch_points(config, branch, s_future)
    future = future + rng.normal(0.0, config.position_noise, size=future.shape)
    if config.future_walk > 0:
        # the walk accumulates along the horizon, so late waypoints wander
        # far while the observed history stays on-lane
        future = future + np.cumsum(rng.normal(0.0, config.future_walk, size=future.shape), axis=0)

    neighbors = []
    for _ in range(config.n_neighbors):
        lane_pick = int(rng.integers(0, config.n_branches + 1))
        speed = rng.uniform(*config.speed_range)
        first_valid = int(rng.integers(0, config.t_past // 2 + 1))
        if lane_pick == 0:
            end_s = -rng.uniform(0.2, 0.9) * config.approach_length
            line_of, heading_of = approach_line, approach_heading
        else:
            b = lane_pick - 1
            end_s = rng.uniform(0.1, 0.7) * config.lane_length

            def line_of(s, _b=b):
                return _branch_points(config, _b, np.array([max(s, 0.0)]))[0]

            def heading_of(s, _b=b):
                return float(_branch_headings(config, _b, np.array([max(s, 0.0)]))[0])

        lateral = rng.normal(0.0, 0.4)
        states = _agent_states_on_lane(config, rng, line_of, heading_of, speed, end_s, first_valid)
        valid = states[:, 6] > 0.5
        # constant offset along the left normal keeps the neighbor in-lane
        head = np.arctan2(states[valid, 5], states[valid, 4])
        states[valid, 0] += lateral * -np.sin(head)
        states[valid, 1] += lateral * np.cos(head)
        kind = rng.choice([AgentType.VEHICLE, AgentType.PEDESTRIAN, AgentType.CYCLIST], p=[0.7, 0.15, 0.15])
        neighbors.append(AgentHistory(states, AgentType(kind)))

    map_polylines = _build_map(config, rng)

    local = RawScene(
        ego=AgentHistory(ego_states, AgentType.VEHICLE),
        neighbors=NeighborSet(tuple(neighbors)),
        map_polylines=map_polylines,
        future=future,
        branch_index=branch,
    )
    return transform_raw_scene(local, world_angle, world_shift)


def generate_scene(seed: int, config: SceneGenConfig) -> tuple[SceneContext, FutureTrajectory]:
    """Generate one ego-centric scene with its ground-truth future.

    Deterministic given (seed, config); the future follows one randomly
    chosen fork branch with kinematic noise.
    """
    return to_ego_frame(generate_raw_scene(seed, config))


def scene_seeds(seed: int, count: int) -> np.ndarray:
    """Derive ``count`` well-spread per-scene seeds from one dataset seed."""
    return np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)


# ---------------------------------------------------------------------------
# Dataset files: one JSON record per line plus a JSON sidecar with metadata
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    context: SceneContext
    future: FutureTrajectory


@dataclass(frozen=True)
class DatasetMeta:
    normalizer: Normalizer
    generator_config: SceneGenConfig
    seed: int
    count: int


def dataset_meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def _agent_to_json(agent: AgentHistory) -> dict:
    return {"states": agent.states.tolist(), "agent_type": agent.agent_type.value}


def _agent_from_json(obj: dict) -> AgentHistory:
    return AgentHistory(np.asarray(obj["states"], dtype=np.float64), AgentType(obj["agent_type"]))


def record_to_json(record: SceneRecord) -> dict:
    ctx = record.context
    return {
        "scene_id": record.scene_id,
        "ego": _agent_to_json(ctx.ego),
        "neighbors": [_agent_to_json(n) for n in ctx.neighbors.histories],
        "map": {
            "points": ctx.map_polylines.points.tolist(),
            "valid": ctx.map_polylines.valid.astype(int).tolist(),
            "types": [t.value for t in ctx.map_polylines.types],
        },
        "future": record.future.waypoints.tolist(),
    }


def record_from_json(obj: dict) -> SceneRecord:
    map_obj = obj["map"]
    n_pts = len(map_obj["points"][0]) if map_obj["points"] else 16
    polylines = (
        MapPolylines(
            np.asarray(map_obj["points"], dtype=np.float64),
            np.asarray(map_obj["valid"], dtype=bool),
            tuple(PolylineType(t) for t in map_obj["types"]),
        )
        if map_obj["points"]
        else MapPolylines.empty(n_pts)
    )
    context = SceneContext(
        ego=_agent_from_json(obj["ego"]),
        neighbors=NeighborSet(tuple(_agent_from_json(n) for n in obj["neighbors"])),
        map_polylines=polylines,
    )
    return SceneRecord(str(obj["scene_id"]), context, FutureTrajectory(np.asarray(obj["future"], dtype=np.float64)))


def write_dataset(path, records: Sequence[SceneRecord], meta: DatasetMeta) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record)) + "\n")
    meta_obj = {
        "normalizer": {"offset": meta.normalizer.offset.tolist(), "scale": meta.normalizer.scale.tolist()},
        "generator_config": dataclasses.asdict(meta.generator_config),
        "seed": meta.seed,
        "count": meta.count,
    }
    dataset_meta_path(path).write_text(json.dumps(meta_obj, indent=2) + "\n")


def read_dataset(path) -> list[SceneRecord]:
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
                records.append(record_from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed scene record ({exc})") from exc
    if not records:
        raise DataError(f"{path}: dataset is empty")
    return records


def read_dataset_meta(path) -> DatasetMeta:
    meta_path = dataset_meta_path(path)
    if not meta_path.exists():
        raise FileNotFoundError(str(meta_path))
    try:
        obj = json.loads(meta_path.read_text())
        normalizer = Normalizer(
            np.asarray(obj["normalizer"]["offset"], dtype=np.float64),
            np.asarray(obj["normalizer"]["scale"], dtype=np.float64),
        )
        cfg_obj = dict(obj["generator_config"])
        if cfg_obj.get("branch_probs") is not None:
            cfg_obj["branch_probs"] = tuple(cfg_obj["branch_probs"])
        cfg_obj["speed_range"] = tuple(cfg_obj["speed_range"])
        config = SceneGenConfig(**cfg_obj)
        return DatasetMeta(normalizer, config, int(obj["seed"]), int(obj["count"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{meta_path}: malformed dataset metadata ({exc})") from exc
