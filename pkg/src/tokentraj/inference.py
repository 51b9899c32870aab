"""Multi-mode autoregressive rollout with per-layer feature caching.

Rollout advances one token position at a time through the decoder stack.
Every (agent, mode) pair is one independent lane; lanes are batched with
mode-major layout ``lane = mode * n_agents + agent``.  With caching enabled
each position's per-layer features are computed exactly once and reused as
attention keys by later steps; with caching disabled the whole prefix is
recomputed from the stored raw inputs every step, which must produce
bit-identical trajectories.

Each step fuses the fresh short-horizon decode with slices of all stored
long-horizon decodes (tau-weighted), emits the fused waypoints, and feeds
them back through the tokenizer as the next input token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import no_grad, rope_rotate
from .context import encode_context
from .detokenizer import AnchorSet, detokenize
from .errors import ConfigError
from .geometry import wrap_angle
from .model import Model
from .nn import pair_attention
from .scene import AGENT_TYPES, SceneSample
from .tokenizer import encode_token_arrays, scene_token_arrays, AGENT_POINT_WIDTH


@dataclass
class RolloutConfig:
    tau: float = 0.5
    use_cache: bool = True
    score_first_step_only: bool = False
    independent: bool = False  # emit the first step's long head directly (ablation)
    nms_threshold: float = 2.0
    nms_out: int | None = None  # None keeps every lane


@dataclass
class ModeTrajectory:
    """One rollout hypothesis: global-frame waypoints plus a normalized score."""

    waypoints: np.ndarray  # (t_future, 2)
    score: float


@dataclass
class AgentPrediction:
    agent_id: str
    modes: list[ModeTrajectory]


def fuse(
    short: np.ndarray,
    stored_longs: list[tuple[int, np.ndarray]],
    t: int,
    tau: float,
    t_token: int,
) -> np.ndarray:
    """Tau-weighted average of the current short decode and stored long slices.

    The short prediction carries weight ``t**tau``; the long prediction
    stored at step ``t'`` contributes its slice covering the current window
    with weight ``t'**tau``.  Weights are normalized to sum to one; if every
    weight is zero (``tau > 0`` at the first step) the short prediction is
    returned unchanged.
    """
    short = np.asarray(short, dtype=np.float64)
    window = short.shape[-2]
    weights = [float(t) ** tau]
    parts = [short]
    for t_prime, long_pred in stored_longs:
        if t_prime > t:
            continue
        offset = (t - t_prime) * t_token
        parts.append(long_pred[..., offset : offset + window, :])
        weights.append(float(t_prime) ** tau)
    total = sum(weights)
    if total == 0.0:
        return short.copy()
    acc = np.zeros_like(short)
    for w, p in zip(weights, parts):
        acc += (w / total) * p
    return acc


def nms_select(
    endpoints: np.ndarray, scores: np.ndarray, dist_threshold: float, out_count: int
) -> list[int]:
    """Greedy endpoint non-maximum suppression with score-ordered backfill.

    Repeatedly keeps the highest-scored remaining candidate (ties to the
    smaller index) and suppresses candidates whose endpoint lies within
    ``dist_threshold`` of any kept endpoint.  If fewer than ``out_count``
    survive, suppressed candidates are backfilled by score.
    """
    n = len(scores)
    if out_count > n:
        raise ConfigError(f"out_count {out_count} exceeds {n} candidates")
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    selected: list[int] = []
    suppressed: list[int] = []
    pool = list(order)
    while pool and len(selected) < out_count:
        head = pool.pop(0)
        selected.append(head)
        still = []
        for i in pool:
            d = float(np.hypot(*(endpoints[i] - endpoints[head])))
            (suppressed if d <= dist_threshold else still).append(i)
        pool = still
    for i in suppressed:
        if len(selected) >= out_count:
            break
        selected.append(i)
    return selected


def _apply_frames(frames: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Per-row frame application: frames (B, 3), pts (B, ..., 2) local -> global."""
    c = np.cos(frames[:, 2]).reshape(-1, *([1] * (pts.ndim - 2)))
    s = np.sin(frames[:, 2]).reshape(-1, *([1] * (pts.ndim - 2)))
    x = frames[:, 0].reshape(c.shape) + c * pts[..., 0] - s * pts[..., 1]
    y = frames[:, 1].reshape(c.shape) + s * pts[..., 0] + c * pts[..., 1]
    return np.stack([x, y], axis=-1)


def _to_local_frames(frames: np.ndarray, pts: np.ndarray) -> np.ndarray:
    c = np.cos(frames[:, 2]).reshape(-1, *([1] * (pts.ndim - 2)))
    s = np.sin(frames[:, 2]).reshape(-1, *([1] * (pts.ndim - 2)))
    dx = pts[..., 0] - frames[:, 0].reshape(c.shape)
    dy = pts[..., 1] - frames[:, 1].reshape(c.shape)
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


@dataclass
class RolloutState:
    """Per-scene lane-batched rollout bookkeeping.

    ``input_mats``/``frames``/``key_valid`` record the raw per-position
    inputs (enough to rebuild everything); ``layer_feats[l][p]`` caches the
    layer-``l`` input features of position ``p`` when caching is on.
    """

    n_f: int
    k_long: int
    input_mats: list = field(default_factory=list)  # per position (B, t_token, width)
    frames: list = field(default_factory=list)  # per position (B, 3)
    key_valid: list = field(default_factory=list)  # per position (B,) bool
    layer_feats: list = field(default_factory=list)  # per layer: list of (B, H)
    emitted: list = field(default_factory=list)  # per step (B, t_token, 2) global
    stored_longs: list = field(default_factory=list)  # per step (t', (B, t_future, 2) global)
    scores: np.ndarray | None = None

    @property
    def lanes(self) -> int:
        return self.n_f * self.k_long

    @property
    def positions(self) -> int:
        return len(self.input_mats)


class _ContextArrays:
    """Numpy view of the encoded context used by the incremental decoder."""

    def __init__(self, cache):
        self.map_feats = cache.map_feats.data
        self.map_frames = cache.map_frames
        self.ctx_feats = cache.ctx_feats.data
        self.ctx_frames = cache.ctx_frames
        self.ctx_valid = cache.ctx_valid


def _pair_pos(model: Model, src: np.ndarray, dst: np.ndarray):
    return model.pos_embed(model.pair_fourier(src, dst))


def _cross_row(model, attn, xq, feats, frames, query_frames, mask):
    """Cross attention for a single query row per lane: (B, H) -> (B, H)."""
    b = xq.shape[0]
    n_keys = len(frames)
    h = feats.shape[-1]
    src = np.broadcast_to(query_frames[:, None, None, :], (b, 1, n_keys, 3))
    dst = np.broadcast_to(frames[None, None, :, :], (b, 1, n_keys, 3))
    qpos = _pair_pos(model, src, dst)
    kpos = _pair_pos(model, dst, src)
    q_in = ag.concat([ag.expand(ag.reshape(xq, (b, 1, 1, h)), 2, n_keys), qpos], -1)
    keys = ag.expand(ag.expand(ag.reshape(ag.constant(feats), (1, 1, n_keys, h)), 0, b), 1, 1)
    k_in = ag.concat([keys, kpos], -1)
    out = pair_attention(
        q_in, k_in, k_in, attn.wq, attn.wk, attn.wv, attn.wo, model.config.num_heads, mask
    )
    return ag.reshape(out, (b, h))


def _advance_position(
    model: Model,
    ctx: _ContextArrays,
    state: RolloutState,
    prefix_feats: list[list[np.ndarray]],
    new_mats: np.ndarray,
    new_frame: np.ndarray,
    position: int,
    spatial_position: bool,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Push one position through the stack using row-form attention.

    ``prefix_feats[l]`` holds layer-``l`` input features of positions
    ``0..position-1``.  Returns the per-layer inputs of this position and
    its final decoder output.  Every cached or rebuilt feature flows through
    this one routine, which is what makes cached and uncached rollout
    bit-identical.
    """
    cfg = model.config
    b = new_mats.shape[0]
    h = cfg.hidden
    from .tokenizer import encode_agent_intervals

    x = encode_agent_intervals(new_mats, model.tokenizer)  # (B, H)
    per_layer: list[np.ndarray] = []

    prev_frames = state.frames[:position]
    frames_all = np.stack(prev_frames + [new_frame], axis=1) if position else new_frame[:, None, :]
    p1 = position + 1
    key_valid = np.stack(state.key_valid[:position] + [np.ones(b, dtype=bool)], axis=1)

    # temporal pair positions (sequence index based, same for q and k across layers)
    src = np.broadcast_to(new_frame[:, None, None, :], (b, 1, p1, 3))
    dst = frames_all[:, None, :, :]
    t_qpos = _pair_pos(model, src, np.broadcast_to(dst, (b, 1, p1, 3)))
    t_kpos = _pair_pos(model, np.broadcast_to(dst, (b, 1, p1, 3)), src)
    rope_q = np.full((b, 1, 1), float(position))
    rope_k = np.arange(p1, dtype=np.float64).reshape(1, 1, p1)

    for layer_idx, layer in enumerate(model.decoder_layers):
        per_layer.append(x.data)
        xq = ag.bias_add(x, ag.constant(layer.tpe.data[position])) if cfg.tpe_enabled else x

        f_map = (
            _cross_row(model, layer.map_attn, xq, ctx.map_feats, ctx.map_frames, new_frame, None)
            if len(ctx.map_frames)
            else ag.constant(np.zeros((b, h)))
        )
        f_nf = (
            _cross_row(
                model,
                layer.nonfocal_attn,
                xq,
                ctx.ctx_feats,
                ctx.ctx_frames,
                new_frame,
                ctx.ctx_valid,
            )
            if len(ctx.ctx_frames)
            else ag.constant(np.zeros((b, h)))
        )

        # temporal self-attention over positions 0..position
        keys = (
            np.stack([f[layer_idx] for f in prefix_feats], axis=1)
            if position
            else np.zeros((b, 0, h))
        )
        keys = np.concatenate([keys, x.data[:, None, :]], axis=1)  # (B, P+1, H)
        q_in = ag.concat([ag.expand(ag.reshape(x, (b, 1, 1, h)), 2, p1), t_qpos], -1)
        k_in = ag.concat([ag.reshape(ag.constant(keys), (b, 1, p1, h)), t_kpos], -1)
        v_in = k_in
        if cfg.rope_enabled:
            width = h if cfg.rope_feature_only else q_in.shape[-1]
            q_in = rope_rotate(q_in, rope_q, cfg.rope_base, width)
            k_in = rope_rotate(k_in, rope_k, cfg.rope_base, width)
        t_attn = layer.temporal_attn
        f_temp = ag.reshape(
            pair_attention(
                q_in, k_in, v_in, t_attn.wq, t_attn.wk, t_attn.wv, t_attn.wo,
                cfg.num_heads, key_valid[:, None, :],
            ),
            (b, h),
        )

        if spatial_position and cfg.spatial_attn_enabled:
            n_f = state.n_f
            groups = b // n_f
            xg = ag.reshape(x, (groups, n_f, h))
            gframes = new_frame.reshape(groups, n_f, 3)
            src_s = np.broadcast_to(gframes[:, :, None, :], (groups, n_f, n_f, 3))
            dst_s = np.broadcast_to(gframes[:, None, :, :], (groups, n_f, n_f, 3))
            s_qpos = _pair_pos(model, src_s, dst_s)
            s_kpos = _pair_pos(model, dst_s, src_s)
            sq_in = ag.concat([ag.expand(ag.reshape(xg, (groups, n_f, 1, h)), 2, n_f), s_qpos], -1)
            sk_in = ag.concat([ag.expand(ag.reshape(xg, (groups, 1, n_f, h)), 1, n_f), s_kpos], -1)
            s_attn = layer.spatial_attn
            s_valid = key_valid[:, -1].reshape(groups, n_f)[:, None, :]
            f_spat = ag.reshape(
                pair_attention(
                    sq_in, sk_in, sk_in, s_attn.wq, s_attn.wk, s_attn.wv, s_attn.wo,
                    cfg.num_heads, s_valid,
                ),
                (b, h),
            )
        else:
            f_spat = ag.constant(np.zeros((b, h)))

        from .nn import mlp_forward

        x = mlp_forward(ag.concat([x, f_nf, f_map, f_temp, f_spat], -1), layer.update_mlp)

    return per_layer, x.data


def _decode_position(
    model: Model, ctx: _ContextArrays, state: RolloutState, position: int, use_cache: bool
) -> np.ndarray:
    """Final decoder output at ``position``; caches or rebuilds per-layer feats."""
    if use_cache:
        per_layer, final = _advance_position(
            model,
            ctx,
            state,
            state.layer_feats,
            state.input_mats[position],
            state.frames[position],
            position,
            spatial_position=position < model.config.l_obs,
        )
        state.layer_feats.append(per_layer)
        return final
    rebuilt: list[list[np.ndarray]] = []
    final = None
    for p in range(position + 1):
        per_layer, final = _advance_position(
            model,
            ctx,
            state,
            rebuilt,
            state.input_mats[p],
            state.frames[p],
            p,
            spatial_position=p < model.config.l_obs,
        )
        rebuilt.append(per_layer)
    return final


def _next_token_arrays(
    state: RolloutState, fused_global: np.ndarray, dt: float, agent_types: list[str]
):
    """Tokenize fused waypoints into the next input token (frames + features).

    Velocities follow the track contract (forward-looking, ``p[t+1] = p[t] +
    v[t] dt``); the final point's velocity is extrapolated from the last
    segment since its successor is not yet predicted.
    """
    b, t_token, _ = fused_global.shape
    cur_frames = state.frames[-1]
    pts = fused_global
    vels = np.empty_like(pts)
    vels[:, :-1] = (pts[:, 1:] - pts[:, :-1]) / dt
    last_prev = pts[:, -2] if t_token > 1 else cur_frames[:, :2]
    vels[:, -1] = (pts[:, -1] - last_prev) / dt
    speeds = np.linalg.norm(vels, axis=-1)
    headings = np.empty((b, t_token))
    carry = cur_frames[:, 2].copy()
    for step in range(t_token):
        moving = speeds[:, step] > 0.1
        carry = np.where(moving, np.arctan2(vels[:, step, 1], vels[:, step, 0]), carry)
        headings[:, step] = carry
    new_frame = np.column_stack([pts[:, -1], headings[:, -1]])

    mats = np.zeros((b, t_token, AGENT_POINT_WIDTH))
    mats[:, :, 0:2] = _to_local_frames(new_frame, pts)
    c = np.cos(new_frame[:, 2])[:, None]
    s = np.sin(new_frame[:, 2])[:, None]
    mats[:, :, 2] = c * vels[..., 0] + s * vels[..., 1]
    mats[:, :, 3] = -s * vels[..., 0] + c * vels[..., 1]
    mats[:, :, 4] = wrap_angle(headings - new_frame[:, 2][:, None])
    mats[:, :, 5] = 1.0
    n_f = state.n_f
    for lane in range(b):
        mats[lane, :, 6 + AGENT_TYPES.index(agent_types[lane % n_f])] = 1.0
    return mats, new_frame


def rollout(
    scene: SceneSample,
    model: Model,
    anchors: AnchorSet,
    config: RolloutConfig | None = None,
) -> list[AgentPrediction]:
    """Autoregressive multi-mode rollout for every focal agent of a scene."""
    config = config or RolloutConfig()
    cfg = model.config
    with no_grad():
        return _rollout_impl(scene, model, anchors, config, cfg)


def _rollout_impl(scene, model, anchors, config, cfg):
    tc = cfg.token_config()
    focal_ids = [a.id for a in scene.focal_agents()]
    agent_types = [a.agent_type for a in scene.focal_agents()]
    arrays = scene_token_arrays(scene, focal_ids, tc, include_future=False)
    tokens = encode_token_arrays(arrays, model.tokenizer)
    cache = encode_context(tokens, model)
    ctx = _ContextArrays(cache)

    n_f = len(focal_ids)
    k = cfg.k_long
    b = n_f * k
    state = RolloutState(n_f=n_f, k_long=k)
    lane_modes = np.repeat(np.arange(k), n_f)  # mode-major lane layout

    # pre-tiled observed positions (lanes identical until they diverge)
    for p in range(cfg.l_obs):
        state.input_mats.append(np.tile(arrays.focal_mats[:, p], (k, 1, 1)))
        state.frames.append(np.tile(arrays.focal_frames[:, p], (k, 1)))
        state.key_valid.append(np.tile(arrays.focal_valid[:, p], k))

    # prefill: advance observed positions (cached mode stores their features)
    final = None
    if config.use_cache:
        for p in range(cfg.l_obs):
            final = _decode_position(model, ctx, state, p, use_cache=True)
    else:
        final = _decode_position(model, ctx, state, cfg.l_obs - 1, use_cache=False)

    scores = np.zeros(b)
    for s in range(cfg.l_future):
        modes = detokenize(ag.constant(final), model.detokenizer, cfg)
        short = modes.short.data  # (B, K, t_token, 2)
        long = modes.long.data
        conf = modes.conf_logits.data  # (B, K)
        logp = conf - conf.max(axis=1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))

        own = lane_modes
        rows = np.arange(b)
        short_own = short[rows, own]
        long_own = long[rows, own]

        cur_frames = state.frames[-1]
        if config.independent:
            traj = _apply_frames(cur_frames, long_own)
            scores = logp[rows, own]
            return _assemble(scene, focal_ids, state, traj, scores, config, cfg, direct=True)

        if s == 0 or not config.score_first_step_only:
            scores = scores + logp[rows, own]

        short_g = _apply_frames(cur_frames, short_own)
        long_g = _apply_frames(cur_frames, long_own)
        state.stored_longs.append((s, long_g))
        fused = fuse(
            short_g,
            [(t_prime, lg) for t_prime, lg in state.stored_longs],
            s,
            config.tau,
            cfg.t_token,
        )
        state.emitted.append(fused)

        if s < cfg.l_future - 1:
            mats, new_frame = _next_token_arrays(state, fused, scene.dt, agent_types)
            state.input_mats.append(mats)
            state.frames.append(new_frame)
            state.key_valid.append(np.ones(b, dtype=bool))
            position = cfg.l_obs + s
            final = _decode_position(model, ctx, state, position, use_cache=config.use_cache)

    waypoints = np.concatenate(state.emitted, axis=1)  # (B, t_future, 2)
    return _assemble(scene, focal_ids, state, waypoints, scores, config, cfg, direct=False)


def _assemble(scene, focal_ids, state, waypoints, scores, config, cfg, direct):
    n_f = state.n_f
    k = cfg.k_long
    results = []
    for i, agent_id in enumerate(focal_ids):
        lane_idx = np.array([m * n_f + i for m in range(k)])
        traj = waypoints[lane_idx]
        raw = scores[lane_idx]
        probs = np.exp(raw - raw.max())
        probs = probs / probs.sum()
        keep = list(range(k))
        if config.nms_out is not None and config.nms_out < k:
            keep = nms_select(traj[:, -1], probs, config.nms_threshold, config.nms_out)
        kept_probs = probs[keep]
        kept_probs = kept_probs / kept_probs.sum()
        modes = [
            ModeTrajectory(waypoints=traj[j], score=float(p))
            for j, p in zip(keep, kept_probs)
        ]
        results.append(AgentPrediction(agent_id=agent_id, modes=modes))
    return results
