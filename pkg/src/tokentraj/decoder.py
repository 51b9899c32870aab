"""Factorized-attention decoder over focal-agent token sequences.

Each layer runs four attentions in parallel over the same input features:
cross-attention to cached map features, cross-attention to cached non-focal
features (both with a learnable temporal embedding added to the query),
causally masked temporal self-attention with a rotary encoding, and spatial
self-attention among focal agents restricted to observed positions.  Their
outputs are concatenated with the input token and mixed by an MLP into the
next layer's tokens.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor, rope_rotate
from .context import ContextCache
from .tokenizer import SceneTokens


def causal_mask(length: int) -> np.ndarray:
    """Key position <= query position, within one (agent, mode) lane."""
    return np.tril(np.ones((length, length), dtype=bool))


def decoder_statics(
    focal_frames: np.ndarray,
    focal_valid: np.ndarray,
    map_frames: np.ndarray,
    ctx_frames: np.ndarray,
    ctx_valid: np.ndarray,
    model,
) -> dict:
    """Weight-independent pair features and masks for the training decode.

    All Fourier arrays depend only on frames so they are computed once per
    scene and reused across training steps and layers.
    """
    cfg = model.config
    n_f, length = focal_frames.shape[:2]
    out: dict = {"n_f": n_f, "length": length}

    focal = focal_frames  # (N_f, L, 3)
    if len(map_frames):
        n_map = len(map_frames)
        src = np.broadcast_to(focal[:, :, None, :], (n_f, length, n_map, 3))
        dst = np.broadcast_to(map_frames[None, None, :, :], (n_f, length, n_map, 3))
        out["map_q48"] = model.pair_fourier(src, dst)
        out["map_k48"] = model.pair_fourier(dst, src)
    if len(ctx_frames):
        n_ctx = len(ctx_frames)
        src = np.broadcast_to(focal[:, :, None, :], (n_f, length, n_ctx, 3))
        dst = np.broadcast_to(ctx_frames[None, None, :, :], (n_f, length, n_ctx, 3))
        out["nf_q48"] = model.pair_fourier(src, dst)
        out["nf_k48"] = model.pair_fourier(dst, src)
        out["nf_mask"] = ctx_valid
    # temporal pairs: (N_f, L(q), L(k), 3)
    src = np.broadcast_to(focal[:, :, None, :], (n_f, length, length, 3))
    dst = np.broadcast_to(focal[:, None, :, :], (n_f, length, length, 3))
    out["t_q48"] = model.pair_fourier(src, dst)
    out["t_k48"] = model.pair_fourier(dst, src)
    out["t_mask"] = causal_mask(length)[None] & focal_valid[:, None, :]
    out["rope_q_pos"] = np.arange(length, dtype=np.float64).reshape(1, length, 1)
    out["rope_k_pos"] = np.arange(length, dtype=np.float64).reshape(1, 1, length)
    if cfg.spatial_attn_enabled and n_f > 0:
        l_obs = cfg.l_obs
        obs = focal[:, :l_obs].transpose(1, 0, 2)  # (L_obs, N_f, 3)
        src = np.broadcast_to(obs[:, :, None, :], (l_obs, n_f, n_f, 3))
        dst = np.broadcast_to(obs[:, None, :, :], (l_obs, n_f, n_f, 3))
        out["s_q48"] = model.pair_fourier(src, dst)
        out["s_k48"] = model.pair_fourier(dst, src)
        out["s_mask"] = focal_valid[:, :l_obs].T[:, None, :]  # (L_obs, 1, N_f)
    return out


def _cross_branch(xq: Tensor, ctx_feats: Tensor, qpos: Tensor, kpos: Tensor, attn, num_heads, mask):
    n_f, length = xq.shape[0], xq.shape[1]
    n_keys = ctx_feats.shape[0]
    h = ctx_feats.shape[-1]
    q_in = ag.concat([ag.expand(ag.reshape(xq, (n_f, length, 1, h)), 2, n_keys), qpos], -1)
    keys = ag.reshape(ctx_feats, (1, 1, n_keys, h))
    keys = ag.expand(ag.expand(keys, 0, n_f), 1, length)
    k_in = ag.concat([keys, kpos], -1)
    from .nn import pair_attention

    return pair_attention(q_in, k_in, k_in, attn.wq, attn.wk, attn.wv, attn.wo, num_heads, mask)


def decoder_layer(
    x: Tensor,
    layer,
    cache: ContextCache,
    pos: dict,
    model,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One decoder layer; the four attention branches read the same ``x``."""
    from .nn import pair_attention

    cfg = model.config
    n_f, length, h = x.shape
    num_heads = cfg.num_heads
    zeros = lambda: ag.constant(np.zeros((n_f, length, h)))  # noqa: E731

    # temporal position embedding on the cross-attention queries
    if cfg.tpe_enabled:
        tpe = ag.gather(layer.tpe, np.arange(length))
        xq = ag.add(x, ag.expand(ag.reshape(tpe, (1, length, h)), 0, n_f))
    else:
        xq = x

    if len(cache.map_frames):
        f_map = _cross_branch(
            xq, cache.map_feats, pos["map_qpos"], pos["map_kpos"], layer.map_attn, num_heads, None
        )
    else:
        f_map = zeros()

    if len(cache.ctx_frames):
        f_nf = _cross_branch(
            xq,
            cache.ctx_feats,
            pos["nf_qpos"],
            pos["nf_kpos"],
            layer.nonfocal_attn,
            num_heads,
            pos["statics"]["nf_mask"],
        )
    else:
        f_nf = zeros()

    # temporal self-attention with rotary relative encoding
    statics = pos["statics"]
    q_in = ag.concat([ag.expand(ag.reshape(x, (n_f, length, 1, h)), 2, length), pos["t_qpos"]], -1)
    k_in = ag.concat([ag.expand(ag.reshape(x, (n_f, 1, length, h)), 1, length), pos["t_kpos"]], -1)
    v_in = k_in
    if cfg.rope_enabled:
        width = h if cfg.rope_feature_only else q_in.shape[-1]
        q_in = rope_rotate(q_in, statics["rope_q_pos"], cfg.rope_base, width)
        k_in = rope_rotate(k_in, statics["rope_k_pos"], cfg.rope_base, width)
    t_attn = layer.temporal_attn
    f_temp = pair_attention(
        q_in, k_in, v_in, t_attn.wq, t_attn.wk, t_attn.wv, t_attn.wo, num_heads, statics["t_mask"]
    )

    # spatial self-attention among focal agents, observed positions only
    if cfg.spatial_attn_enabled and "s_q48" in statics and n_f > 0:
        l_obs = cfg.l_obs
        x_obs = ag.transpose(ag.slice_axis(x, 1, 0, l_obs), (1, 0, 2))  # (L_obs, N_f, H)
        sq_in = ag.concat(
            [ag.expand(ag.reshape(x_obs, (l_obs, n_f, 1, h)), 2, n_f), pos["s_qpos"]], -1
        )
        sk_in = ag.concat(
            [ag.expand(ag.reshape(x_obs, (l_obs, 1, n_f, h)), 1, n_f), pos["s_kpos"]], -1
        )
        s_attn = layer.spatial_attn
        f_s = pair_attention(
            sq_in, sk_in, sk_in, s_attn.wq, s_attn.wk, s_attn.wv, s_attn.wo, num_heads,
            statics["s_mask"],
        )
        f_s = ag.transpose(f_s, (1, 0, 2))
        f_spat = ag.concat(
            [f_s, ag.constant(np.zeros((n_f, length - l_obs, h)))], 1
        )
    else:
        f_spat = zeros()

    if train_mode and cfg.dropout > 0.0:
        f_map = ag.dropout(f_map, cfg.dropout, rng)
        f_nf = ag.dropout(f_nf, cfg.dropout, rng)
        f_temp = ag.dropout(f_temp, cfg.dropout, rng)
        f_spat = ag.dropout(f_spat, cfg.dropout, rng)

    from .nn import mlp_forward

    stacked = ag.concat([x, f_nf, f_map, f_temp, f_spat], -1)
    return mlp_forward(stacked, layer.update_mlp)


def decode_stack(
    tokens: SceneTokens,
    cache: ContextCache,
    model,
    statics: dict | None = None,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    pos_override: dict | None = None,
) -> Tensor:
    """Run all decoder layers over the focal token grid; returns (N_f, L, H)."""
    if statics is None:
        statics = decoder_statics(
            tokens.focal_frames,
            tokens.focal_valid,
            cache.map_frames,
            cache.ctx_frames,
            cache.ctx_valid,
            model,
        )
    pos = {"statics": statics}
    if pos_override is not None:
        for key in ("map_qpos", "map_kpos", "nf_qpos", "nf_kpos", "t_qpos", "t_kpos", "s_qpos", "s_kpos"):
            if key in pos_override:
                pos[key] = pos_override[key]
    else:
        if "map_q48" in statics:
            pos["map_qpos"] = model.pos_embed(statics["map_q48"])
            pos["map_kpos"] = model.pos_embed(statics["map_k48"])
        if "nf_q48" in statics:
            pos["nf_qpos"] = model.pos_embed(statics["nf_q48"])
            pos["nf_kpos"] = model.pos_embed(statics["nf_k48"])
        pos["t_qpos"] = model.pos_embed(statics["t_q48"])
        pos["t_kpos"] = model.pos_embed(statics["t_k48"])
        if "s_q48" in statics:
            pos["s_qpos"] = model.pos_embed(statics["s_q48"])
            pos["s_kpos"] = model.pos_embed(statics["s_k48"])

    x = tokens.focal_feats
    for layer in model.decoder_layers:
        x = decoder_layer(x, layer, cache, pos, model, train_mode=train_mode, rng=rng)
    return x
