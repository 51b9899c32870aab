"""Discretize tracks into interval tokens and encode them in local frames.

Each agent track is cut into equally spaced intervals of ``t_token`` steps;
every interval is expressed in the frame of its final step (position +
heading), so the encoded features are invariant under rigid motions of the
scene.  Map polylines get a frame anchored at their first point with the
x-axis along the first segment.  Both kinds of element run through a
max-pool PointNet.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, GeometryError
from .geometry import Pose2D, rotate_into, to_local_array, wrap_angle
from .nn import mlp_forward
from .scene import AGENT_TYPES, POLYLINE_TYPES, AgentTrack, MapPolyline, SceneSample

AGENT_POINT_WIDTH = 6 + len(AGENT_TYPES)  # local x, y, vx, vy, heading, valid + type one-hot
MAP_POINT_WIDTH = 2 + len(POLYLINE_TYPES)  # local x, y + type one-hot

_PAD_NEG = -1e30  # padded PointNet rows lose every max-pool


@dataclass
class TokenConfig:
    """Temporal discretization; ``t_token`` must divide both horizons."""

    t_token: int
    t_obs: int
    t_future: int

    def __post_init__(self):
        if self.t_token < 1:
            raise ConfigError(f"t_token must be >= 1, got {self.t_token}")
        if self.t_token > self.t_obs:
            raise ConfigError(
                f"t_token ({self.t_token}) must not exceed t_obs ({self.t_obs})"
            )
        if self.t_obs % self.t_token or self.t_future % self.t_token:
            raise ConfigError(
                f"t_token ({self.t_token}) must divide t_obs ({self.t_obs}) "
                f"and t_future ({self.t_future})"
            )

    @property
    def l_obs(self) -> int:
        return self.t_obs // self.t_token

    @property
    def l_future(self) -> int:
        return self.t_future // self.t_token

    @property
    def l_total(self) -> int:
        return self.l_obs + self.l_future


@dataclass
class Token:
    """One encoded scene element, in its own reference frame."""

    features: object  # Tensor slice of width H
    frame: Pose2D
    temporal_index: int
    owner: str
    kind: str  # "map" | "agent_obs" | "agent_future"
    valid: bool = True


def map_frame(points: np.ndarray) -> Pose2D:
    """Frame at the first point, x-axis toward the second point."""
    points = np.asarray(points, dtype=np.float64)
    d = points[1] - points[0]
    if float(np.hypot(d[0], d[1])) < 1e-9:
        raise GeometryError("polyline's first two points coincide; frame undefined")
    return Pose2D(points[0, 0], points[0, 1], math.atan2(d[1], d[0]))


def map_point_matrix(polyline: MapPolyline, frame: Pose2D, pad_to: int) -> tuple[np.ndarray, np.ndarray]:
    """Local-coordinate point features plus a padding mask."""
    local = to_local_array(frame, polyline.points)
    n = len(local)
    feats = np.zeros((pad_to, MAP_POINT_WIDTH), dtype=np.float64)
    feats[:n, :2] = local
    feats[:n, 2 + POLYLINE_TYPES.index(polyline.polyline_type)] = 1.0
    mask = np.zeros(pad_to, dtype=bool)
    mask[:n] = True
    return feats, mask


def agent_interval_frame(track: AgentTrack, interval: int, t_token: int) -> Pose2D | None:
    """Pose at the interval's final step, or ``None`` if that step is invalid."""
    last = (interval + 1) * t_token - 1
    state = track.states[last]
    if state[5] <= 0.5:
        return None
    return Pose2D(state[0], state[1], state[4])


def agent_point_matrix(track: AgentTrack, interval: int, t_token: int, frame: Pose2D) -> np.ndarray:
    """Per-step features of one interval, normalized into ``frame``.

    Invalid steps are zero rows with valid=0.  The final step lands at the
    local origin with zero local heading by construction; this is asserted.
    """
    start = interval * t_token
    states = track.states[start : start + t_token]
    valid = states[:, 5] > 0.5
    feats = np.zeros((t_token, AGENT_POINT_WIDTH), dtype=np.float64)
    feats[valid, 0:2] = to_local_array(frame, states[valid, 0:2])
    feats[valid, 2:4] = rotate_into(frame.theta, states[valid, 2:4])
    feats[valid, 4] = wrap_angle(states[valid, 4] - frame.theta)
    feats[valid, 5] = 1.0
    feats[:, 6 + AGENT_TYPES.index(track.agent_type)] = 1.0
    if valid[-1]:
        assert abs(feats[-1, 0]) < 1e-6 and abs(feats[-1, 1]) < 1e-6 and abs(feats[-1, 4]) < 1e-6, (
            "interval's final step must sit at its own frame origin"
        )
    return feats


def _pointnet(points: Tensor, mask: np.ndarray | None, point_mlp, out_mlp) -> Tensor:
    """Per-point MLP, masked max-pool over the point axis, output MLP.

    ``points`` is (N, P, F); ``mask`` (N, P) marks real points (None = all).
    """
    per_point = mlp_forward(points, point_mlp)
    if mask is not None:
        shift = np.where(mask[..., None], 0.0, _PAD_NEG)
        per_point = ag.add(per_point, ag.constant(np.broadcast_to(shift, per_point.shape).copy()))
    pooled = ag.max_axis(per_point, axis=-2)
    return mlp_forward(pooled, out_mlp)


def encode_map_tokens(polylines: list[MapPolyline], weights) -> tuple[Tensor, np.ndarray]:
    """Encode every polyline; returns (N_map, H) features and (N_map, 3) frames."""
    if not polylines:
        return ag.constant(np.zeros((0, weights.hidden))), np.zeros((0, 3))
    frames = [map_frame(p.points) for p in polylines]
    pad_to = max(len(p.points) for p in polylines)
    mats, masks = zip(*(map_point_matrix(p, f, pad_to) for p, f in zip(polylines, frames)))
    feats = _pointnet(
        ag.constant(np.stack(mats)), np.stack(masks), weights.map_point, weights.map_out
    )
    return feats, np.stack([f.as_array() for f in frames])


def encode_agent_intervals(point_mats: np.ndarray, weights) -> Tensor:
    """Encode (N, t_token, point_width) interval matrices to (N, H) tokens."""
    return _pointnet(ag.constant(point_mats), None, weights.agent_point, weights.agent_out)


@dataclass
class AgentTokens:
    """All tokens of one agent: (L, H) features plus per-token metadata."""

    features: Tensor
    frames: np.ndarray  # (L, 3); rows of invalid tokens fall back to the last valid pose
    valid: np.ndarray  # (L,) bool: interval's final step was observed


def tokenize_agent(
    track: AgentTrack, config: TokenConfig, weights, include_future: bool
) -> AgentTokens:
    """Tokenize one track: ``l_obs`` tokens, plus ``l_future`` if requested."""
    mats, frames, valid = _interval_arrays(track, config, include_future)
    feats = encode_agent_intervals(mats, weights)
    return AgentTokens(features=feats, frames=frames, valid=valid)


def agent_token_list(track: AgentTrack, config: TokenConfig, weights, include_future: bool) -> list[Token]:
    """Per-token view used by tests and inspection tools."""
    batch = tokenize_agent(track, config, weights, include_future)
    tokens = []
    for i in range(len(batch.valid)):
        kind = "agent_obs" if i < config.l_obs else "agent_future"
        tokens.append(
            Token(
                features=ag.slice_axis(batch.features, 0, i, i + 1),
                frame=Pose2D(*batch.frames[i]),
                temporal_index=i,
                owner=track.id,
                kind=kind,
                valid=bool(batch.valid[i]),
            )
        )
    return tokens


def encode_map_token(polyline: MapPolyline, frame: Pose2D, weights) -> Token:
    """Single-polyline convenience wrapper around :func:`encode_map_tokens`."""
    feats, mask = map_point_matrix(polyline, frame, len(polyline.points))
    token_feats = _pointnet(
        ag.constant(feats[None]), mask[None], weights.map_point, weights.map_out
    )
    return Token(
        features=token_feats, frame=frame, temporal_index=0, owner=polyline.id, kind="map"
    )


@dataclass
class SceneTokens:
    """Batched token arrays for one scene, split into decoder and context sides.

    Context agent tokens are ordered with every agent's non-final observed
    tokens first and the final observed token of each agent last, so the
    dense-future head can address the last-token block as one slice.
    """

    map_feats: Tensor
    map_frames: np.ndarray
    ctx_feats: Tensor
    ctx_frames: np.ndarray
    ctx_valid: np.ndarray
    ctx_agent_ids: list  # agent id per last-token row (one per context agent)
    focal_feats: Tensor  # (N_f, L, H)
    focal_frames: np.ndarray  # (N_f, L, 3)
    focal_valid: np.ndarray  # (N_f, L)
    focal_ids: list

    @property
    def num_ctx_agents(self) -> int:
        return len(self.ctx_agent_ids)


@dataclass
class SceneTokenArrays:
    """Weight-independent tokenization arrays, reusable across training steps."""

    map_mats: np.ndarray  # (N_map, P, map_width)
    map_masks: np.ndarray
    map_frames: np.ndarray
    focal_mats: np.ndarray  # (N_f, L, t_token, agent_width)
    focal_frames: np.ndarray
    focal_valid: np.ndarray
    focal_ids: list
    ctx_mats: np.ndarray  # (N_ctx, t_token, agent_width)
    ctx_frames: np.ndarray
    ctx_valid: np.ndarray
    ctx_agent_ids: list


def scene_token_arrays(
    scene: SceneSample, target_ids: list[str], config: TokenConfig, include_future: bool
) -> SceneTokenArrays:
    """Normalize the scene into per-interval point matrices and frames.

    ``target_ids`` go to the decoder side (future tokens appended when
    ``include_future``); all other agents contribute observed tokens to the
    shared context, ordered with each agent's final observed token last.
    """
    target_set = set(target_ids)
    targets = [a for a in scene.agents if a.id in target_set]
    context = [a for a in scene.agents if a.id not in target_set]

    if scene.map:
        frames = [map_frame(p.points) for p in scene.map]
        pad_to = max(len(p.points) for p in scene.map)
        mats, masks = zip(*(map_point_matrix(p, f, pad_to) for p, f in zip(scene.map, frames)))
        map_mats, map_masks = np.stack(mats), np.stack(masks)
        map_frames = np.stack([f.as_array() for f in frames])
    else:
        map_mats = np.zeros((0, 2, MAP_POINT_WIDTH))
        map_masks = np.zeros((0, 2), dtype=bool)
        map_frames = np.zeros((0, 3))

    count = config.l_total if include_future else config.l_obs
    if targets:
        per_track = [_interval_arrays(t, config, include_future) for t in targets]
        focal_mats = np.stack([p[0] for p in per_track])
        focal_frames = np.stack([p[1] for p in per_track])
        focal_valid = np.stack([p[2] for p in per_track])
    else:
        focal_mats = np.zeros((0, count, config.t_token, AGENT_POINT_WIDTH))
        focal_frames = np.zeros((0, count, 3))
        focal_valid = np.zeros((0, count), dtype=bool)

    early_mats, early_frames, early_valid = [], [], []
    last_mats, last_frames, last_valid, ctx_agent_ids = [], [], [], []
    for track in context:
        mats, frames, valid = _interval_arrays(track, config, include_future=False)
        early_mats.append(mats[:-1])
        early_frames.append(frames[:-1])
        early_valid.append(valid[:-1])
        last_mats.append(mats[-1:])
        last_frames.append(frames[-1:])
        last_valid.append(valid[-1:])
        ctx_agent_ids.append(track.id)
    if context:
        ctx_mats = np.concatenate(early_mats + last_mats)
        ctx_frames = np.concatenate(early_frames + last_frames)
        ctx_valid = np.concatenate(early_valid + last_valid)
    else:
        ctx_mats = np.zeros((0, config.t_token, AGENT_POINT_WIDTH))
        ctx_frames = np.zeros((0, 3))
        ctx_valid = np.zeros(0, dtype=bool)

    return SceneTokenArrays(
        map_mats=map_mats,
        map_masks=map_masks,
        map_frames=map_frames,
        focal_mats=focal_mats,
        focal_frames=focal_frames,
        focal_valid=focal_valid,
        focal_ids=[t.id for t in targets],
        ctx_mats=ctx_mats,
        ctx_frames=ctx_frames,
        ctx_valid=ctx_valid,
        ctx_agent_ids=ctx_agent_ids,
    )


def encode_token_arrays(arrays: SceneTokenArrays, weights) -> SceneTokens:
    """Run the PointNets over precomputed token arrays."""
    h = weights.hidden
    if len(arrays.map_mats):
        map_feats = _pointnet(
            ag.constant(arrays.map_mats), arrays.map_masks, weights.map_point, weights.map_out
        )
    else:
        map_feats = ag.constant(np.zeros((0, h)))

    n_f = len(arrays.focal_ids)
    if n_f:
        count = arrays.focal_mats.shape[1]
        flat = arrays.focal_mats.reshape(n_f * count, *arrays.focal_mats.shape[2:])
        feats = encode_agent_intervals(flat, weights)
        focal_feats = ag.reshape(feats, (n_f, count, h))
    else:
        focal_feats = ag.constant(np.zeros((0, 0, h)))

    if len(arrays.ctx_mats):
        ctx_feats = encode_agent_intervals(arrays.ctx_mats, weights)
    else:
        ctx_feats = ag.constant(np.zeros((0, h)))

    return SceneTokens(
        map_feats=map_feats,
        map_frames=arrays.map_frames,
        ctx_feats=ctx_feats,
        ctx_frames=arrays.ctx_frames,
        ctx_valid=arrays.ctx_valid,
        ctx_agent_ids=list(arrays.ctx_agent_ids),
        focal_feats=focal_feats,
        focal_frames=arrays.focal_frames,
        focal_valid=arrays.focal_valid,
        focal_ids=list(arrays.focal_ids),
    )


def tokenize_scene(
    scene: SceneSample,
    target_ids: list[str],
    config: TokenConfig,
    weights,
    include_future: bool,
) -> SceneTokens:
    """One-shot tokenization (array building + PointNet encoding)."""
    return encode_token_arrays(
        scene_token_arrays(scene, target_ids, config, include_future), weights
    )


def _interval_arrays(track: AgentTrack, config: TokenConfig, include_future: bool):
    count = config.l_total if include_future else config.l_obs
    frames = np.zeros((count, 3), dtype=np.float64)
    valid = np.ones(count, dtype=bool)
    mats = np.zeros((count, config.t_token, AGENT_POINT_WIDTH), dtype=np.float64)
    fallback = Pose2D(track.states[0, 0], track.states[0, 1], track.states[0, 4])
    for i in range(count):
        frame = agent_interval_frame(track, i, config.t_token)
        if frame is None:
            valid[i] = False
            frame = fallback
        else:
            fallback = frame
            mats[i] = agent_point_matrix(track, i, config.t_token, frame)
        frames[i] = frame.as_array()
    return mats, frames, valid
