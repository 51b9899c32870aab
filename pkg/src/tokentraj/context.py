"""Static context encoding: top-k neighbor attention over map and non-focal
agent tokens, plus the dense future prediction head.

The encoded context is computed once per scene and treated as immutable;
every decoding step cross-attends to it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import pair_attention
from .tokenizer import SceneTokens


def topk_neighbors(
    frames: np.ndarray, k: int, valid: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the k nearest other tokens by frame-origin distance.

    Ties break toward the smaller index; invalid tokens are never neighbors.
    Returns ``(idx, mask)`` of shape ``(N, min(k, N-1))``; ``mask`` is False
    where fewer real neighbors exist.
    """
    n = len(frames)
    kk = min(k, max(n - 1, 0))
    idx = np.zeros((n, kk), dtype=np.intp)
    mask = np.zeros((n, kk), dtype=bool)
    if kk == 0:
        return idx, mask
    diff = frames[:, None, :2] - frames[None, :, :2]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)
    if valid is not None:
        dist[:, ~valid] = np.inf
    order = np.argsort(dist, axis=1, kind="stable")
    idx = order[:, :kk]
    mask = np.take_along_axis(dist, idx, axis=1) < np.inf
    idx = np.where(mask, idx, 0)  # masked slots point at row 0, never attended
    return idx, mask


@dataclass
class ContextCache:
    """Immutable per-scene encoding shared by all decoding steps."""

    map_feats: Tensor  # (N_map, H)
    map_frames: np.ndarray
    ctx_feats: Tensor  # (N_ctx_tokens, H)
    ctx_frames: np.ndarray
    ctx_valid: np.ndarray
    dense_traj: Tensor | None  # (N_ctx_agents, T_future, 2) local frames
    dense_frames: np.ndarray  # (N_ctx_agents, 3) frame per dense trajectory
    dense_ids: list
    neighbor_idx: np.ndarray
    neighbor_mask: np.ndarray


def context_layer(
    feats: Tensor,
    neighbor_idx: np.ndarray,
    neighbor_mask: np.ndarray,
    qpos: Tensor,
    kpos: Tensor,
    weights,
    num_heads: int,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One encoder layer: pairwise-PE top-k attention + LayerNorm/residual/FFN."""
    n, kk = neighbor_idx.shape
    if kk == 0:
        attn_out = ag.constant(np.zeros(feats.shape))
    else:
        q_in = ag.concat([ag.expand(ag.reshape(feats, (n, 1, feats.shape[-1])), 1, kk), qpos], -1)
        k_in = ag.concat([ag.gather(feats, neighbor_idx), kpos], -1)
        attn_out = pair_attention(
            q_in,
            k_in,
            k_in,
            weights.attn.wq,
            weights.attn.wk,
            weights.attn.wv,
            weights.attn.wo,
            num_heads,
            mask=neighbor_mask,
        )
    if dropout_rate > 0.0:
        attn_out = ag.dropout(attn_out, dropout_rate, rng)
    x = ag.layer_norm(ag.add(feats, attn_out), weights.ln1[0], weights.ln1[1])
    ffn_out = _ffn(x, weights.ffn)
    if dropout_rate > 0.0:
        ffn_out = ag.dropout(ffn_out, dropout_rate, rng)
    return ag.layer_norm(ag.add(x, ffn_out), weights.ln2[0], weights.ln2[1])


def _ffn(x: Tensor, layers) -> Tensor:
    from .nn import mlp_forward

    return mlp_forward(x, layers)


def dense_future_head(last_feats: Tensor, weights, t_future: int) -> tuple[Tensor, Tensor]:
    """Rough local-frame future per context agent, plus trajectory-fused features."""
    from .nn import mlp_forward

    flat = mlp_forward(last_feats, weights.head)
    traj = ag.reshape(flat, (last_feats.shape[0], t_future, 2))
    fused = mlp_forward(ag.concat([last_feats, flat], -1), weights.fuse)
    return traj, fused


def encode_context(
    tokens: SceneTokens,
    model,
    statics: dict | None = None,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    pos_override: dict | None = None,
) -> ContextCache:
    """Run the full context encoder over map + non-focal tokens.

    ``statics`` may carry precomputed neighbor lists and Fourier pair arrays
    (they depend only on frames, not weights) to avoid recomputation across
    training steps; ``pos_override`` supplies already-embedded position
    tensors (keys ``ctx_q``/``ctx_k``).
    """
    cfg = model.config
    frames = np.concatenate([tokens.map_frames, tokens.ctx_frames])
    if statics is None:
        statics = context_statics(tokens.map_frames, tokens.ctx_frames, tokens.ctx_valid, model)
    idx, mask = statics["neighbor_idx"], statics["neighbor_mask"]

    feats = ag.concat([tokens.map_feats, tokens.ctx_feats], 0) if len(frames) else tokens.map_feats
    if pos_override is not None:
        qpos = pos_override.get("ctx_q")
        kpos = pos_override.get("ctx_k")
    else:
        qpos = model.pos_embed(statics["qpos48"]) if idx.shape[1] else None
        kpos = model.pos_embed(statics["kpos48"]) if idx.shape[1] else None
    rate = cfg.dropout if train_mode else 0.0
    for layer in model.context_layers:
        feats = context_layer(
            feats, idx, mask, qpos, kpos, layer, cfg.num_heads, dropout_rate=rate, rng=rng
        )

    n_map = len(tokens.map_frames)
    map_feats = ag.slice_axis(feats, 0, 0, n_map)
    ctx_feats = ag.slice_axis(feats, 0, n_map, feats.shape[0])

    n_ag = tokens.num_ctx_agents
    dense_traj = None
    dense_frames = np.zeros((0, 3))
    if n_ag:
        n_ctx = ctx_feats.shape[0]
        early = ag.slice_axis(ctx_feats, 0, 0, n_ctx - n_ag)
        last = ag.slice_axis(ctx_feats, 0, n_ctx - n_ag, n_ctx)
        dense_traj, fused = dense_future_head(last, model.dense, cfg.t_future)
        ctx_feats = ag.concat([early, fused], 0)
        dense_frames = tokens.ctx_frames[n_ctx - n_ag :]

    return ContextCache(
        map_feats=map_feats,
        map_frames=tokens.map_frames,
        ctx_feats=ctx_feats,
        ctx_frames=tokens.ctx_frames,
        ctx_valid=tokens.ctx_valid,
        dense_traj=dense_traj,
        dense_frames=dense_frames,
        dense_ids=list(tokens.ctx_agent_ids),
        neighbor_idx=idx,
        neighbor_mask=mask,
    )


def context_statics(
    map_frames: np.ndarray, ctx_frames: np.ndarray, ctx_valid: np.ndarray, model
) -> dict:
    """Weight-independent arrays for the encoder: neighbors + Fourier pairs."""
    cfg = model.config
    frames = np.concatenate([map_frames, ctx_frames])
    valid = np.concatenate([np.ones(len(map_frames), dtype=bool), ctx_valid])
    idx, mask = topk_neighbors(frames, cfg.k_neighbors, valid)
    out = {"neighbor_idx": idx, "neighbor_mask": mask}
    if idx.shape[1]:
        src = np.broadcast_to(frames[:, None, :], frames[idx].shape)
        dst = frames[idx]
        out["qpos48"] = model.pair_fourier(src, dst)
        out["kpos48"] = model.pair_fourier(dst, src)
    return out
