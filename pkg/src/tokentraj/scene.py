"""Scene data model, synthetic scene generation, and JSONL dataset I/O.

A :class:`SceneSample` is one forecasting example: agent tracks over
``t_obs + t_future`` uniform steps plus map polylines.  The generator
produces four interaction archetypes (straight following, a turn through
an intersection, a cut-in between two focal vehicles, and a pedestrian
crossing) with seeded jitter, so the rest of the pipeline can be trained
and evaluated without any external dataset.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, UsageError, ValidationError

AGENT_TYPES = ("vehicle", "pedestrian", "cyclist")
POLYLINE_TYPES = ("lane", "boundary", "crosswalk")
SCENE_KINDS = ("straight", "turn", "cut_in", "pedestrian_cross")

SCHEMA_VERSION = 1
STATIC_DISPLACEMENT_M = 1.0  # total distance traveled below this marks an agent static

STATE_FIELDS = ("x", "y", "vx", "vy", "heading", "valid")


@dataclass
class AgentTrack:
    """One agent's trajectory: states are ``(T, 6)`` rows of ``STATE_FIELDS``."""

    id: str
    agent_type: str
    states: np.ndarray
    is_focal: bool
    is_static: bool = field(init=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        valid = self.states[:, 5] > 0.5
        pts = self.states[valid, :2]
        travelled = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()) if len(pts) > 1 else 0.0
        self.is_static = travelled < STATIC_DISPLACEMENT_M

    def valid_mask(self) -> np.ndarray:
        return self.states[:, 5] > 0.5

    def __eq__(self, other):
        return (
            isinstance(other, AgentTrack)
            and self.id == other.id
            and self.agent_type == other.agent_type
            and self.is_focal == other.is_focal
            and np.array_equal(self.states, other.states)
        )


@dataclass
class MapPolyline:
    id: str
    polyline_type: str
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)

    def __eq__(self, other):
        return (
            isinstance(other, MapPolyline)
            and self.id == other.id
            and self.polyline_type == other.polyline_type
            and np.array_equal(self.points, other.points)
        )


@dataclass
class SceneSample:
    scene_id: str
    agents: list[AgentTrack]
    map: list[MapPolyline]
    dt: float
    t_obs: int
    t_future: int

    @property
    def t_total(self) -> int:
        return self.t_obs + self.t_future

    def focal_agents(self) -> list[AgentTrack]:
        return [a for a in self.agents if a.is_focal]

    def validate(self):
        """Raise :class:`ValidationError` naming the first violated field."""
        if self.dt <= 0:
            raise ValidationError(f"scene {self.scene_id}: dt must be positive, got {self.dt}")
        if self.t_obs < 1:
            raise ValidationError(f"scene {self.scene_id}: t_obs must be >= 1, got {self.t_obs}")
        if self.t_future < 1:
            raise ValidationError(
                f"scene {self.scene_id}: t_future must be >= 1, got {self.t_future}"
            )
        if not any(a.is_focal for a in self.agents):
            raise ValidationError(f"scene {self.scene_id}: agents must include >=1 focal agent")
        for a in self.agents:
            if a.agent_type not in AGENT_TYPES:
                raise ValidationError(
                    f"scene {self.scene_id}: agent {a.id} agent_type {a.agent_type!r} unknown"
                )
            if a.states.shape != (self.t_total, 6):
                raise ValidationError(
                    f"scene {self.scene_id}: agent {a.id} states shape {a.states.shape}, "
                    f"expected {(self.t_total, 6)}"
                )
            if not np.all(np.isfinite(a.states)):
                raise ValidationError(f"scene {self.scene_id}: agent {a.id} states not finite")
        for p in self.map:
            if p.polyline_type not in POLYLINE_TYPES:
                raise ValidationError(
                    f"scene {self.scene_id}: polyline {p.id} polyline_type {p.polyline_type!r} unknown"
                )
            if p.points.ndim != 2 or p.points.shape[0] < 2 or p.points.shape[1] != 2:
                raise ValidationError(
                    f"scene {self.scene_id}: polyline {p.id} points must be (>=2, 2)"
                )
            if np.any(np.all(np.diff(p.points, axis=0) == 0.0, axis=1)):
                raise ValidationError(
                    f"scene {self.scene_id}: polyline {p.id} has coincident consecutive points"
                )

    def to_json_obj(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scene_id": self.scene_id,
            "dt": self.dt,
            "t_obs": self.t_obs,
            "t_future": self.t_future,
            "agents": [
                {
                    "id": a.id,
                    "agent_type": a.agent_type,
                    "is_focal": a.is_focal,
                    "states": a.states.tolist(),
                }
                for a in self.agents
            ],
            "map": [
                {"id": p.id, "polyline_type": p.polyline_type, "points": p.points.tolist()}
                for p in self.map
            ],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SceneSample":
        try:
            scene = cls(
                scene_id=obj["scene_id"],
                agents=[
                    AgentTrack(
                        id=a["id"],
                        agent_type=a["agent_type"],
                        states=np.asarray(a["states"], dtype=np.float64),
                        is_focal=bool(a["is_focal"]),
                    )
                    for a in obj["agents"]
                ],
                map=[
                    MapPolyline(
                        id=p["id"],
                        polyline_type=p["polyline_type"],
                        points=np.asarray(p["points"], dtype=np.float64),
                    )
                    for p in obj["map"]
                ],
                dt=float(obj["dt"]),
                t_obs=int(obj["t_obs"]),
                t_future=int(obj["t_future"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed scene object: {exc}") from exc
        scene.validate()
        return scene


def save_scenes(scenes: list[SceneSample], path):
    """Write one scene per line as JSON; order and bytes are deterministic."""
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene.to_json_obj(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_scenes(path) -> list[SceneSample]:
    """Load a JSONL dataset; raises :class:`ParseError` with the line number."""
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: invalid JSON ({exc})") from exc
            try:
                scenes.append(SceneSample.from_json_obj(obj))
            except (ParseError, ValidationError) as exc:
                raise type(exc)(f"{path}: line {lineno}: {exc}") from exc
    return scenes


def select_training_agents(
    scene: SceneSample, max_extra_nonfocal: int, seed: int = 0
) -> list[str]:
    """All focal agent ids plus a seeded sample of non-static non-focal ids."""
    focal = [a.id for a in scene.agents if a.is_focal]
    candidates = [a.id for a in scene.agents if not a.is_focal and not a.is_static]
    take = min(max_extra_nonfocal, len(candidates))
    if take == 0:
        return focal
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(candidates), size=take, replace=False)
    return focal + [candidates[i] for i in sorted(picked)]


# ---------------------------------------------------------------------------
# synthetic scene generation


def _integrate_track(p0, velocities, dt, fallback_heading=0.0):
    """Build (T, 6) states with p[t+1] = p[t] + v[t]*dt and velocity-aligned headings."""
    vel = np.asarray(velocities, dtype=np.float64)
    steps = len(vel)
    pos = np.empty((steps, 2), dtype=np.float64)
    pos[0] = p0
    for t in range(1, steps):
        pos[t] = pos[t - 1] + vel[t - 1] * dt
    speed = np.linalg.norm(vel, axis=1)
    heading = np.empty(steps, dtype=np.float64)
    prev = fallback_heading
    for t in range(steps):
        if speed[t] > 0.1:
            prev = math.atan2(vel[t, 1], vel[t, 0])
        heading[t] = prev
    states = np.column_stack([pos, vel, heading, np.ones(steps)])
    return states


def _lane_under(states: np.ndarray, stride: int = 5, lead: float = 30.0) -> np.ndarray:
    """Polyline following a track's path, extended past its final heading."""
    pts = [states[i, :2] for i in range(0, len(states), stride)]
    pts.append(states[-1, :2])
    h = states[-1, 4]
    pts.append(states[-1, :2] + lead * np.array([math.cos(h), math.sin(h)]))
    pts = np.asarray(pts)
    keep = [0]
    for i in range(1, len(pts)):
        if np.linalg.norm(pts[i] - pts[keep[-1]]) > 1e-6:
            keep.append(i)
    return pts[keep]


def _offset_polyline(points: np.ndarray, offset: float) -> np.ndarray:
    """Shift a polyline laterally (left of travel direction for positive offset)."""
    d = np.gradient(points, axis=0)
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    norm[norm == 0.0] = 1.0
    d = d / norm
    normal = np.column_stack([-d[:, 1], d[:, 0]])
    return points + offset * normal


def _constant_velocity(steps, speed, heading):
    v = np.tile([speed * math.cos(heading), speed * math.sin(heading)], (steps, 1))
    return v


def _gen_straight(rng, steps, dt):
    v0 = rng.uniform(8.0, 14.0)
    y0 = rng.uniform(-1.0, 1.0)
    focal = _integrate_track((-40.0, y0), _constant_velocity(steps, v0, 0.0), dt)
    lead_speed = v0 * rng.uniform(0.7, 0.95)
    lead = _integrate_track((-40.0 + rng.uniform(18.0, 26.0), y0),
                            _constant_velocity(steps, lead_speed, 0.0), dt)
    oncoming = _integrate_track(
        (60.0, y0 + 3.5), _constant_velocity(steps, rng.uniform(8.0, 12.0), math.pi), dt
    )
    parked = _integrate_track((0.0, y0 - 5.0), np.zeros((steps, 2)), dt)
    agents = [
        AgentTrack("veh-0", "vehicle", focal, True),
        AgentTrack("veh-1", "vehicle", lead, False),
        AgentTrack("veh-2", "vehicle", oncoming, False),
        AgentTrack("veh-3", "vehicle", parked, False),
    ]
    lane0 = _lane_under(focal)
    polylines = [
        MapPolyline("lane-0", "lane", lane0),
        MapPolyline("lane-1", "lane", _offset_polyline(lane0, 3.5)),
        MapPolyline("bound-0", "boundary", _offset_polyline(lane0, -3.0)),
    ]
    return agents, polylines


def _gen_turn(rng, steps, dt):
    v0 = rng.uniform(6.0, 10.0)
    direction = 1.0 if rng.random() < 0.5 else -1.0
    turn_start = int(rng.integers(12, 18))
    turn_len = int(rng.integers(14, 20))
    heading = np.zeros(steps)
    rate = direction * (math.pi / 2.0) / turn_len
    for t in range(steps):
        if t < turn_start:
            heading[t] = 0.0
        elif t < turn_start + turn_len:
            heading[t] = rate * (t - turn_start)
        else:
            heading[t] = direction * math.pi / 2.0
    vel = np.column_stack([v0 * np.cos(heading), v0 * np.sin(heading)])
    focal = _integrate_track((-25.0, rng.uniform(-1.0, 1.0)), vel, dt)
    cross = _integrate_track(
        (10.0, -45.0 * direction),
        _constant_velocity(steps, rng.uniform(7.0, 11.0), direction * math.pi / 2.0),
        dt,
    )
    parked = _integrate_track((-10.0, -5.0), np.zeros((steps, 2)), dt)
    agents = [
        AgentTrack("veh-0", "vehicle", focal, True),
        AgentTrack("veh-1", "vehicle", cross, False),
        AgentTrack("veh-2", "vehicle", parked, False),
    ]
    lane0 = _lane_under(focal)
    polylines = [
        MapPolyline("lane-0", "lane", lane0),
        MapPolyline("lane-1", "lane", _lane_under(cross)),
        MapPolyline("bound-0", "boundary", _offset_polyline(lane0, -3.0)),
    ]
    return agents, polylines


def _gen_cut_in(rng, steps, dt):
    lane_gap = 3.5
    v_a = rng.uniform(9.0, 13.0)
    v_b = v_a * rng.uniform(1.05, 1.2)
    a_states = _integrate_track((-40.0, 0.0), _constant_velocity(steps, v_a, 0.0), dt)
    merge_start = int(rng.integers(10, 16))
    merge_len = int(rng.integers(10, 16))
    vy = np.zeros(steps)
    # smooth lateral ramp: sin^2 profile integrates to the full lane offset
    for t in range(merge_start, min(merge_start + merge_len, steps)):
        phase = (t - merge_start) / merge_len
        vy[t] = -(lane_gap / (merge_len * dt)) * (math.sin(math.pi * phase) ** 2) * 2.0
    vel_b = np.column_stack([np.full(steps, v_b), vy])
    b_states = _integrate_track((-40.0 + rng.uniform(-9.0, -5.0), lane_gap), vel_b, dt)
    parked = _integrate_track((10.0, -5.0), np.zeros((steps, 2)), dt)
    agents = [
        AgentTrack("veh-0", "vehicle", a_states, True),
        AgentTrack("veh-1", "vehicle", b_states, True),
        AgentTrack("veh-2", "vehicle", parked, False),
    ]
    lane0 = _lane_under(a_states)
    polylines = [
        MapPolyline("lane-0", "lane", lane0),
        MapPolyline("lane-1", "lane", _offset_polyline(lane0, lane_gap)),
        MapPolyline("bound-0", "boundary", _offset_polyline(lane0, -3.0)),
    ]
    return agents, polylines


def _gen_pedestrian_cross(rng, steps, dt):
    cross_x = rng.uniform(8.0, 14.0)
    v0 = rng.uniform(7.0, 10.0)
    # vehicle slows toward the crosswalk, then proceeds slowly
    speeds = np.full(steps, v0)
    brake_start = 8
    for t in range(brake_start, steps):
        speeds[t] = max(2.0, v0 - 0.45 * (t - brake_start))
    vel = np.column_stack([speeds, np.zeros(steps)])
    vehicle = _integrate_track((-35.0, 0.0), vel, dt)
    walk_speed = rng.uniform(1.1, 1.6)
    ped = _integrate_track(
        (cross_x, -6.0), _constant_velocity(steps, walk_speed, math.pi / 2.0), dt
    )
    agents = [
        AgentTrack("veh-0", "vehicle", vehicle, True),
        AgentTrack("ped-0", "pedestrian", ped, True),
    ]
    lane0 = _lane_under(vehicle)
    crosswalk = np.array([[cross_x, -7.0], [cross_x, 7.0]])
    polylines = [
        MapPolyline("lane-0", "lane", lane0),
        MapPolyline("cross-0", "crosswalk", crosswalk),
        MapPolyline("bound-0", "boundary", _offset_polyline(lane0, -3.0)),
    ]
    return agents, polylines


_GENERATORS = {
    "straight": _gen_straight,
    "turn": _gen_turn,
    "cut_in": _gen_cut_in,
    "pedestrian_cross": _gen_pedestrian_cross,
}


def generate_scene(
    kind: str, seed: int, dt: float = 0.2, t_obs: int = 10, t_future: int = 40
) -> SceneSample:
    """Deterministically generate one synthetic scene of the given kind."""
    if kind not in _GENERATORS:
        raise UsageError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")
    kind_id = SCENE_KINDS.index(kind)
    rng = np.random.default_rng([kind_id, seed])
    steps = t_obs + t_future
    agents, polylines = _GENERATORS[kind](rng, steps, dt)
    scene = SceneSample(
        scene_id=f"{kind}-{seed}",
        agents=agents,
        map=polylines,
        dt=dt,
        t_obs=t_obs,
        t_future=t_future,
    )
    scene.validate()
    return scene
