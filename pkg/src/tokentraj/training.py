"""Winner-take-all training: targets, losses, optimizer, and the train loop.

Training is GPT-style and parallel over token positions: the decoder sees
ground-truth tokens (teacher forcing) under a causal mask, and every token
position decodes its own multi-modal prediction of the following steps.
Regression backpropagates only through the mode whose long-term anchor is
nearest the ground-truth endpoint; classification supervises that winner's
index.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .context import ContextCache, context_statics, encode_context
from .decoder import decode_stack, decoder_statics
from .detokenizer import AnchorSet, ModeOutputs, detokenize, fit_anchors
from .errors import ConfigError, NumericsError
from .geometry import Pose2D, to_local_array
from .model import Model, ModelConfig
from .scene import SceneSample, select_training_agents
from .tokenizer import SceneTokenArrays, encode_token_arrays, scene_token_arrays


@dataclass
class LossWeights:
    reg_short: float = 1.0
    cls_short: float = 1.0
    reg_long: float = 1.0
    cls_long: float = 1.0
    reg_dense: float = 1.0


@dataclass
class TrainConfig:
    """Optimization settings (desk-scale defaults; see docs for full-scale)."""

    lr: float = 1e-3
    weight_decay: float = 5e-3
    grad_clip: float = 1.0
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    decay_epochs: list[int] = field(default_factory=list)  # 1-based; lr halves entering these
    max_extra_nonfocal: int = 16
    huber_delta: float = 1.0
    disable_dropout_last_epochs: int = 2
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.lr < 0.0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if sorted(self.decay_epochs) != list(self.decay_epochs):
            raise ConfigError("decay_epochs must be sorted ascending")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        if "model" in data and isinstance(data["model"], dict):
            data["model"] = ModelConfig.from_dict(data["model"])
        if "loss_weights" in data and isinstance(data["loss_weights"], dict):
            data["loss_weights"] = LossWeights(**data["loss_weights"])
        return cls(**data)


def select_winner(endpoint: np.ndarray, anchors: np.ndarray) -> int:
    """Index of the anchor nearest the endpoint; ties go to the smaller index."""
    d2 = ((anchors - np.asarray(endpoint, dtype=np.float64)) ** 2).sum(axis=1)
    return int(d2.argmin())


@dataclass
class SceneTargets:
    """Normalized regression/classification targets for one scene."""

    short_target: np.ndarray  # (N_f, L, t_token, 2)
    short_mask: np.ndarray  # (N_f, L, t_token)
    long_target: np.ndarray  # (N_f, L, t_future, 2)
    long_mask: np.ndarray  # (N_f, L, t_future)
    short_winner: np.ndarray  # (N_f, L) anchor class; -1 where unavailable
    long_winner: np.ndarray  # (N_f, L) winner mode; -1 where unavailable
    dense_target: np.ndarray  # (N_ctx_agents, t_future, 2)
    dense_mask: np.ndarray  # (N_ctx_agents, t_future)


def build_targets(
    scene: SceneSample, arrays: SceneTokenArrays, anchors: AnchorSet, cfg: ModelConfig
) -> SceneTargets:
    """Ground-truth waypoints in each token's frame, plus winner indices.

    Token position ``p`` covers data steps up to ``e_p``; its short target is
    the next ``t_token`` steps and its long target the next ``t_future``
    steps, clipped at the data horizon and masked where invalid.  The final
    token position has nothing to predict and stays fully masked.
    """
    tc = cfg.token_config()
    n_f, length = arrays.focal_valid.shape
    horizon = scene.t_obs + scene.t_future
    by_id = {a.id: a for a in scene.agents}

    short_target = np.zeros((n_f, length, cfg.t_token, 2))
    short_mask = np.zeros((n_f, length, cfg.t_token))
    long_target = np.zeros((n_f, length, cfg.t_future, 2))
    long_mask = np.zeros((n_f, length, cfg.t_future))
    short_winner = np.full((n_f, length), -1, dtype=np.intp)
    long_winner = np.full((n_f, length), -1, dtype=np.intp)

    for i, agent_id in enumerate(arrays.focal_ids):
        states = by_id[agent_id].states
        for p in range(length - 1):
            if not arrays.focal_valid[i, p]:
                continue
            frame = Pose2D(*arrays.focal_frames[i, p])
            end = (p + 1) * tc.t_token - 1
            # short horizon
            steps = np.arange(end + 1, end + 1 + cfg.t_token)
            ok = (steps < horizon) & (states[np.minimum(steps, horizon - 1), 5] > 0.5)
            if ok.any():
                short_target[i, p, ok] = to_local_array(frame, states[steps[ok], 0:2])
                short_mask[i, p, ok] = 1.0
            endpoint_step = end + cfg.t_token
            if endpoint_step < horizon and states[endpoint_step, 5] > 0.5:
                short_winner[i, p] = select_winner(
                    to_local_array(frame, states[endpoint_step, 0:2]), anchors.short_anchors
                )
            # long horizon, clipped at the data end
            steps = np.arange(end + 1, end + 1 + cfg.t_future)
            ok = (steps < horizon) & (states[np.minimum(steps, horizon - 1), 5] > 0.5)
            if ok.any():
                long_target[i, p, ok] = to_local_array(frame, states[steps[ok], 0:2])
                long_mask[i, p, ok] = 1.0
                last = steps[ok][-1]
                long_winner[i, p] = select_winner(
                    to_local_array(frame, states[last, 0:2]), anchors.long_anchors
                )

    n_ag = len(arrays.ctx_agent_ids)
    dense_target = np.zeros((n_ag, cfg.t_future, 2))
    dense_mask = np.zeros((n_ag, cfg.t_future))
    offset = len(arrays.ctx_valid) - n_ag
    for j, agent_id in enumerate(arrays.ctx_agent_ids):
        if not arrays.ctx_valid[offset + j]:
            continue
        states = by_id[agent_id].states
        frame = Pose2D(*arrays.ctx_frames[offset + j])
        steps = np.arange(scene.t_obs, horizon)
        ok = states[steps, 5] > 0.5
        dense_target[j, ok] = to_local_array(frame, states[steps[ok], 0:2])
        dense_mask[j, ok] = 1.0

    return SceneTargets(
        short_target=short_target,
        short_mask=short_mask,
        long_target=long_target,
        long_mask=long_mask,
        short_winner=short_winner,
        long_winner=long_winner,
        dense_target=dense_target,
        dense_mask=dense_mask,
    )


@dataclass
class ScenePrep:
    """Everything weight-independent about one training scene."""

    scene: SceneSample
    target_ids: list[str]
    arrays: SceneTokenArrays
    ctx_statics: dict
    dec_statics: dict
    targets: SceneTargets | None
    pos_rows: np.ndarray | None = None  # all Fourier pair rows, stacked (rows, fourier_width)
    pos_slices: dict | None = None  # pos key -> (start, stop, pair shape)


_POS_KEYS = (
    ("ctx_q", "ctx", "qpos48"),
    ("ctx_k", "ctx", "kpos48"),
    ("map_qpos", "dec", "map_q48"),
    ("map_kpos", "dec", "map_k48"),
    ("nf_qpos", "dec", "nf_q48"),
    ("nf_kpos", "dec", "nf_k48"),
    ("t_qpos", "dec", "t_q48"),
    ("t_kpos", "dec", "t_k48"),
    ("s_qpos", "dec", "s_q48"),
    ("s_kpos", "dec", "s_k48"),
)


def _stack_pos_rows(cstat: dict, dstat: dict, fourier_width: int):
    """Concatenate every Fourier pair set into one matrix for a single MLP run."""
    rows = []
    slices = {}
    offset = 0
    for out_key, which, in_key in _POS_KEYS:
        src = cstat if which == "ctx" else dstat
        if in_key not in src:
            continue
        arr = src[in_key]
        flat = arr.reshape(-1, fourier_width)
        slices[out_key] = (offset, offset + len(flat), arr.shape[:-1])
        rows.append(flat)
        offset += len(flat)
    if not rows:
        return None, {}
    return np.concatenate(rows), slices


def prepare_scene(
    scene: SceneSample,
    target_ids: list[str],
    model: Model,
    anchors: AnchorSet | None = None,
    include_future: bool = True,
) -> ScenePrep:
    arrays = scene_token_arrays(scene, target_ids, model.config.token_config(), include_future)
    cstat = context_statics(arrays.map_frames, arrays.ctx_frames, arrays.ctx_valid, model)
    dstat = decoder_statics(
        arrays.focal_frames,
        arrays.focal_valid,
        arrays.map_frames,
        arrays.ctx_frames,
        arrays.ctx_valid,
        model,
    )
    targets = build_targets(scene, arrays, anchors, model.config) if anchors else None
    pos_rows, pos_slices = _stack_pos_rows(cstat, dstat, model.config.fourier_width)
    return ScenePrep(
        scene=scene,
        target_ids=list(target_ids),
        arrays=arrays,
        ctx_statics=cstat,
        dec_statics=dstat,
        targets=targets,
        pos_rows=pos_rows,
        pos_slices=pos_slices,
    )


@dataclass
class ForwardOutputs:
    modes: ModeOutputs
    cache: ContextCache
    decoded: Tensor  # (N_f, L, H) final decoder features
    focal_feats: Tensor  # (N_f, L, H) input tokens (perturbable in tests)


def forward_prepared(
    model: Model,
    prep: ScenePrep,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    input_override: np.ndarray | None = None,
) -> ForwardOutputs:
    """Teacher-forced forward pass over one prepared scene.

    ``input_override`` replaces the tokenized focal features (used by the
    causality tests to perturb a single input token).
    """
    tokens = encode_token_arrays(prep.arrays, model.tokenizer)
    if input_override is not None:
        tokens.focal_feats = ag.constant(input_override)
    pos_override = None
    if prep.pos_rows is not None:
        embedded = model.pos_embed(prep.pos_rows)
        pos_override = {
            key: ag.reshape(
                ag.slice_axis(embedded, 0, start, stop), shape + (embedded.shape[-1],)
            )
            for key, (start, stop, shape) in prep.pos_slices.items()
        }
    cache = encode_context(
        tokens, model, prep.ctx_statics, train_mode=train_mode, rng=rng, pos_override=pos_override
    )
    decoded = decode_stack(
        tokens,
        cache,
        model,
        prep.dec_statics,
        train_mode=train_mode,
        rng=rng,
        pos_override=pos_override,
    )
    modes = detokenize(decoded, model.detokenizer, model.config)
    return ForwardOutputs(
        modes=modes, cache=cache, decoded=decoded, focal_feats=tokens.focal_feats
    )


@dataclass
class LossBreakdown:
    reg_short: float
    cls_short: float
    reg_long: float
    cls_long: float
    reg_dense: float
    total: float
    total_tensor: Tensor | None = None

    def terms(self) -> dict:
        return {
            "reg_short": self.reg_short,
            "cls_short": self.cls_short,
            "reg_long": self.reg_long,
            "cls_long": self.cls_long,
            "reg_dense": self.reg_dense,
            "total": self.total,
        }


def _masked_huber(pred: Tensor, target: np.ndarray, mask: np.ndarray, delta: float) -> Tensor:
    """Mean Huber penalty over valid (step, coord) entries; zero if none."""
    count = float(mask.sum()) * pred.shape[-1]
    if count == 0.0:
        return ag.constant(np.asarray(0.0))
    residual = ag.add(pred, ag.constant(-target))
    penalty = ag.mul(ag.smooth_l1(residual, delta), ag.constant(np.broadcast_to(mask[..., None], pred.shape)))
    return ag.scale(ag.sum_axis(penalty), 1.0 / count)


def _winner_select(per_mode: Tensor, onehot: np.ndarray) -> Tensor:
    """Collapse the mode axis with a winner one-hot; non-winners get zero grads."""
    extra = per_mode.ndim - onehot.ndim
    shaped = onehot.reshape(onehot.shape + (1,) * extra)
    picked = ag.mul(per_mode, ag.constant(np.broadcast_to(shaped, per_mode.shape)))
    return ag.sum_axis(picked, axis=onehot.ndim - 1)


def _cross_entropy(logits: Tensor, class_onehot: np.ndarray) -> Tensor:
    """Mean cross-entropy over rows whose one-hot is nonzero."""
    rows = float(class_onehot.sum())
    if rows == 0.0:
        return ag.constant(np.asarray(0.0))
    logp = ag.log_softmax(logits, axis=-1)
    picked = ag.mul(logp, ag.constant(class_onehot))
    return ag.scale(ag.sum_axis(picked), -1.0 / rows)


def _one_hot(indices: np.ndarray, depth: int) -> np.ndarray:
    flat = indices.reshape(-1)
    out = np.zeros((flat.size, depth))
    ok = flat >= 0
    out[np.nonzero(ok)[0], flat[ok]] = 1.0
    return out.reshape(indices.shape + (depth,))


def compute_loss(
    outputs: ForwardOutputs,
    targets: SceneTargets,
    cfg: ModelConfig,
    weights: LossWeights | None = None,
    huber_delta: float = 1.0,
) -> LossBreakdown:
    """Assemble the five-term training loss for one scene."""
    weights = weights or LossWeights()
    modes = outputs.modes
    long_onehot = _one_hot(targets.long_winner, cfg.k_long)

    reg_short = _masked_huber(
        _winner_select(modes.short, long_onehot),
        targets.short_target,
        targets.short_mask * (targets.long_winner >= 0)[..., None],
        huber_delta,
    )
    reg_long = _masked_huber(
        _winner_select(modes.long, long_onehot), targets.long_target, targets.long_mask, huber_delta
    )

    both = (targets.long_winner >= 0) & (targets.short_winner >= 0)
    short_class = _one_hot(np.where(both, targets.short_winner, -1), cfg.k_short)
    cls_short = _cross_entropy(_winner_select(modes.short_logits, long_onehot), short_class)

    cls_long = _cross_entropy(modes.conf_logits, _one_hot(targets.long_winner, cfg.k_long))

    if outputs.cache.dense_traj is not None and len(targets.dense_mask):
        reg_dense = _masked_huber(
            outputs.cache.dense_traj, targets.dense_target, targets.dense_mask, huber_delta
        )
    else:
        reg_dense = ag.constant(np.asarray(0.0))

    total = ag.scale(reg_short, weights.reg_short)
    total = ag.add(total, ag.scale(cls_short, weights.cls_short))
    total = ag.add(total, ag.scale(reg_long, weights.reg_long))
    total = ag.add(total, ag.scale(cls_long, weights.cls_long))
    total = ag.add(total, ag.scale(reg_dense, weights.reg_dense))
    return LossBreakdown(
        reg_short=reg_short.item(),
        cls_short=cls_short.item(),
        reg_long=reg_long.item(),
        cls_long=cls_long.item(),
        reg_dense=reg_dense.item(),
        total=total.item(),
        total_tensor=total,
    )


def per_token_losses(
    outputs: ForwardOutputs, targets: SceneTargets, cfg: ModelConfig, huber_delta: float = 1.0
) -> np.ndarray:
    """Per-(agent, token) sum of the four focal loss terms, as plain numbers.

    Used to verify that the loss at a token position is independent of
    ground-truth inputs at later positions.
    """
    short = outputs.modes.short.data
    long = outputs.modes.long.data
    conf = outputs.modes.conf_logits.data
    short_logits = outputs.modes.short_logits.data
    n_f, length = targets.long_winner.shape
    out = np.zeros((n_f, length))

    def huber(x):
        ax = np.abs(x)
        return np.where(ax <= huber_delta, 0.5 * x * x / huber_delta, ax - 0.5 * huber_delta)

    for i in range(n_f):
        for p in range(length):
            w = targets.long_winner[i, p]
            if w < 0:
                continue
            total = (
                huber(short[i, p, w] - targets.short_target[i, p])
                * targets.short_mask[i, p][:, None]
            ).sum()
            total += (
                huber(long[i, p, w] - targets.long_target[i, p])
                * targets.long_mask[i, p][:, None]
            ).sum()
            logits = conf[i, p]
            total += -(logits[w] - np.log(np.exp(logits - logits.max()).sum()) - logits.max())
            sw = targets.short_winner[i, p]
            if sw >= 0:
                sl = short_logits[i, p, w]
                total += -(sl[sw] - np.log(np.exp(sl - sl.max()).sum()) - sl.max())
            out[i, p] = total
    return out


class AdamW:
    """Adam with decoupled weight decay over a fixed parameter order."""

    def __init__(
        self,
        params: dict[str, Tensor],
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.names = list(params)
        self.params = params
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self, lr: float):
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name in self.names:
            p = self.params[name]
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0.0 and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class TrainResult:
    model: Model
    anchors: AnchorSet
    history: list[dict]


def train(
    scenes: list[SceneSample],
    config: TrainConfig,
    log_path=None,
    max_steps: int | None = None,
) -> TrainResult:
    """Full training loop: anchors, teacher-forced batches, AdamW, schedule.

    Deterministic given (scenes, config).  ``max_steps`` caps optimizer steps
    (used by smoke tests).  Emits one JSON line per epoch when ``log_path``
    is given.
    """
    if not scenes:
        raise ConfigError("training requires at least one scene")
    cfg = config.model
    tc = cfg.token_config()
    anchors = fit_anchors(scenes, tc, cfg.k_long, cfg.k_short, seed=config.seed)
    model = Model(cfg)

    preps = []
    for idx, scene in enumerate(scenes):
        target_ids = select_training_agents(
            scene, config.max_extra_nonfocal, seed=_mix_seed(config.seed, idx)
        )
        preps.append(prepare_scene(scene, target_ids, model, anchors, include_future=True))

    optimizer = AdamW(model.parameters(), weight_decay=config.weight_decay)
    order_rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng(_mix_seed(config.seed, 0x0D0D))
    decay_set = set(config.decay_epochs)
    lr = config.lr
    history: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    steps_done = 0
    try:
        for epoch in range(1, config.epochs + 1):
            if epoch in decay_set:
                lr *= 0.5
            dropout_off = (
                config.disable_dropout_last_epochs > 0
                and epoch > config.epochs - config.disable_dropout_last_epochs
            )
            train_mode = cfg.dropout > 0.0 and not dropout_off
            perm = order_rng.permutation(len(preps))
            epoch_terms: list[LossBreakdown] = []
            for start in range(0, len(perm), config.batch_size):
                if max_steps is not None and steps_done >= max_steps:
                    break
                batch = [preps[j] for j in perm[start : start + config.batch_size]]
                model.zero_grad()
                breakdowns = []
                total = None
                for prep in batch:
                    out = forward_prepared(model, prep, train_mode=train_mode, rng=dropout_rng)
                    bd = compute_loss(
                        out, prep.targets, cfg, config.loss_weights, config.huber_delta
                    )
                    breakdowns.append(bd)
                    piece = ag.scale(bd.total_tensor, 1.0 / len(batch))
                    total = piece if total is None else ag.add(total, piece)
                if not np.isfinite(total.data):
                    bad = ag.first_nonfinite(total)
                    raise NumericsError(
                        f"non-finite loss at step {steps_done}; first bad tensor: "
                        f"op={bad.op} shape={bad.shape}" if bad is not None else "loss non-finite"
                    )
                total.backward()
                clip_gradients(model.parameters(), config.grad_clip)
                optimizer.step(lr)
                steps_done += 1
                epoch_terms.append(_mean_breakdown(breakdowns))
            if epoch_terms:
                record = {"epoch": epoch, "lr": lr, "steps": steps_done}
                record.update(_mean_breakdown(epoch_terms).terms())
                history.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if max_steps is not None and steps_done >= max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(model=model, anchors=anchors, history=history)


def _mix_seed(seed: int, salt: int) -> int:
    return (seed * 1_000_003 + salt * 7919 + 17) % (2**63)


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    n = len(items)
    return LossBreakdown(
        reg_short=sum(b.reg_short for b in items) / n,
        cls_short=sum(b.cls_short for b in items) / n,
        reg_long=sum(b.reg_long for b in items) / n,
        cls_long=sum(b.cls_long for b in items) / n,
        reg_dense=sum(b.reg_dense for b in items) / n,
        total=sum(b.total for b in items) / n,
    )
