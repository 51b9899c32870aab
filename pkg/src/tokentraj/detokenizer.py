"""Multi-modal detokenization: anchor fitting and the mode decode heads.

Long-term intention anchors are k-means centers of local-frame endpoints one
full horizon ahead of each token; short-term anchors cluster endpoints one
token ahead.  Each decoded token is expanded into ``k_long`` mode hypotheses
by concatenating learnable per-anchor embeddings, refined with a short-term
intention classifier, and decoded into short/long waypoint heads plus a
confidence logit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError
from .geometry import Pose2D, to_local_array
from .nn import mlp_forward


def kmeans(
    points: np.ndarray, k: int, seed: int, max_iters: int = 100
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Seeded k-means++ clustering iterated to an assignment fixpoint.

    Returns ``(centers, assignments, inertia_history)``.  Assignment ties go
    to the smaller center index; empty clusters keep their previous center.
    Inertia is recorded after each assignment step and never increases.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > n:
        raise ConfigError(f"k={k} exceeds the {n} available points")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            pick = rng.choice(n, p=d2 / total)
        else:
            pick = rng.integers(n)
        centers[j] = points[pick]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))

    assignments = np.full(n, -1, dtype=np.intp)
    history: list[float] = []
    for _ in range(max_iters):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        new_assign = dists.argmin(axis=1)
        history.append(float(dists[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for j in range(k):
            members = points[assignments == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers, assignments, history


@dataclass
class AnchorSet:
    """Fixed cluster centers of normalized endpoints at both horizons."""

    long_anchors: np.ndarray  # (k_long, 2)
    short_anchors: np.ndarray  # (k_short, 2)

    def to_json_obj(self) -> dict:
        return {
            "long": self.long_anchors.tolist(),
            "short": self.short_anchors.tolist(),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "AnchorSet":
        return cls(
            long_anchors=np.asarray(obj["long"], dtype=np.float64),
            short_anchors=np.asarray(obj["short"], dtype=np.float64),
        )


def collect_endpoints(scenes, token_config) -> tuple[np.ndarray, np.ndarray]:
    """Local-frame endpoints used for anchor fitting.

    For every focal token with a valid frame: the position one token-length
    ahead (short horizon) and, where the data reaches that far, one full
    future-horizon ahead (long horizon), both expressed in the token's frame.
    """
    tc = token_config
    long_pts, short_pts = [], []
    for scene in scenes:
        horizon = scene.t_obs + scene.t_future
        for track in scene.focal_agents():
            states = track.states
            for p in range(tc.l_total - 1):
                end = (p + 1) * tc.t_token - 1
                if states[end, 5] <= 0.5:
                    continue
                frame = Pose2D(states[end, 0], states[end, 1], states[end, 4])
                short_step = end + tc.t_token
                if short_step < horizon and states[short_step, 5] > 0.5:
                    short_pts.append(to_local_array(frame, states[short_step, 0:2]))
                long_step = end + tc.t_future
                if long_step < horizon and states[long_step, 5] > 0.5:
                    long_pts.append(to_local_array(frame, states[long_step, 0:2]))
    return (
        np.asarray(long_pts, dtype=np.float64).reshape(-1, 2),
        np.asarray(short_pts, dtype=np.float64).reshape(-1, 2),
    )


def fit_anchors(scenes, token_config, k_long: int, k_short: int, seed: int = 0) -> AnchorSet:
    """K-means anchors over the training scenes; deterministic per seed."""
    long_pts, short_pts = collect_endpoints(scenes, token_config)
    long_centers, _, _ = kmeans(long_pts, k_long, seed)
    short_centers, _, _ = kmeans(short_pts, k_short, seed + 1)
    return AnchorSet(long_anchors=long_centers, short_anchors=short_centers)


@dataclass
class ModeOutputs:
    """Per-token, per-mode decode results (leading dims preserved)."""

    short: Tensor  # (..., k_long, t_token, 2) local frame
    long: Tensor  # (..., k_long, t_future, 2) local frame
    conf_logits: Tensor  # (..., k_long)
    short_logits: Tensor  # (..., k_long, k_short)
    mode_feats: Tensor  # (..., k_long, H) refined features entering the heads


def expand_modes(feats: Tensor, f_long: Tensor) -> Tensor:
    """Concatenate every token feature with each long-term goal embedding."""
    m, h = feats.shape[0], feats.shape[-1]
    k = f_long.shape[0]
    tiled = ag.expand(ag.reshape(feats, (m, 1, h)), 1, k)
    goals = ag.expand(ag.reshape(f_long, (1, k, f_long.shape[-1])), 0, m)
    return ag.concat([tiled, goals], -1)


def short_term_refine(
    mode_tokens: Tensor, f_short: Tensor, cls_layers, refine_layers, enabled: bool = True
) -> tuple[Tensor, Tensor]:
    """Short-term classifier + probability-weighted anchor embedding.

    The classifier's softmax weights average the short-anchor embeddings;
    that local intention feature is concatenated back before the refine MLP.
    With ``enabled=False`` the local intention feature is zeroed (ablation).
    """
    logits = mlp_forward(mode_tokens, cls_layers)
    if enabled:
        weighted = ag.matmul(ag.softmax(logits, axis=-1), f_short)
    else:
        weighted = ag.constant(np.zeros(logits.shape[:-1] + (f_short.shape[-1],)))
    refined = mlp_forward(ag.concat([weighted, mode_tokens], -1), refine_layers)
    return refined, logits


def decode_trajectories(refined: Tensor, weights, t_token: int, t_future: int):
    """Decode refined mode features into waypoint heads and a confidence logit."""
    lead = refined.shape[:-1]
    short = ag.reshape(mlp_forward(refined, weights.dec_short), lead + (t_token, 2))
    long = ag.reshape(mlp_forward(refined, weights.dec_long), lead + (t_future, 2))
    conf = ag.reshape(mlp_forward(refined, weights.conf), lead)
    return short, long, conf


def detokenize(feats: Tensor, weights, cfg) -> ModeOutputs:
    """Full mode expansion of ``(..., H)`` token features."""
    lead = feats.shape[:-1]
    h = feats.shape[-1]
    m = int(np.prod(lead)) if lead else 1
    flat = ag.reshape(feats, (m, h))
    mode_tokens = expand_modes(flat, weights.f_long)
    refined, logits = short_term_refine(
        mode_tokens,
        weights.f_short,
        weights.cls_short,
        weights.refine_mlp,
        enabled=cfg.local_intention_enabled,
    )
    short, long, conf = decode_trajectories(refined, weights, cfg.t_token, cfg.t_future)
    k = cfg.k_long
    return ModeOutputs(
        short=ag.reshape(short, lead + (k, cfg.t_token, 2)),
        long=ag.reshape(long, lead + (k, cfg.t_future, 2)),
        conf_logits=ag.reshape(conf, lead + (k,)),
        short_logits=ag.reshape(logits, lead + (k, cfg.k_short)),
        mode_feats=ag.reshape(refined, lead + (k, h)),
    )
