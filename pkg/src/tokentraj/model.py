"""Model configuration, weight registry, and the teacher-forced forward pass."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError
from .geometry import geometric_frequencies, relative_transform_array, fourier_encode
from .nn import Linear, ParamStore, mlp_forward
from .scene import SceneSample
from .tokenizer import TokenConfig, tokenize_scene, SceneTokens


@dataclass
class ModelConfig:
    """Architecture and ablation knobs (desk-scale defaults)."""

    hidden: int = 64
    pos_hidden: int = 64
    num_heads: int = 4
    context_layers: int = 2
    decoder_layers: int = 2
    ffn_hidden: int = 128
    t_token: int = 5
    t_obs: int = 10
    t_future: int = 40
    k_neighbors: int = 16
    k_long: int = 6
    k_short: int = 8
    fourier_base: float = 1.0 / 128.0
    fourier_count: int = 8
    rope_base: float = 10000.0
    init_seed: int = 0
    # ablation flags
    pe_global_delta: bool = False
    rope_enabled: bool = True
    rope_feature_only: bool = False
    tpe_enabled: bool = True
    spatial_attn_enabled: bool = True
    local_intention_enabled: bool = True
    dropout: float = 0.0
    droppath: float = 0.0

    def __post_init__(self):
        if self.hidden % self.num_heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by {self.num_heads} heads")
        if (self.hidden + self.pos_hidden) % 2 != 0:
            raise ConfigError("hidden + pos_hidden must be even for the rotary encoding")
        self.token_config()  # validates divisibility

    def token_config(self) -> TokenConfig:
        return TokenConfig(t_token=self.t_token, t_obs=self.t_obs, t_future=self.t_future)

    @property
    def l_obs(self) -> int:
        return self.t_obs // self.t_token

    @property
    def l_future(self) -> int:
        return self.t_future // self.t_token

    @property
    def l_total(self) -> int:
        return self.l_obs + self.l_future

    @property
    def pair_width(self) -> int:
        return self.hidden + self.pos_hidden

    @property
    def fourier_width(self) -> int:
        return 2 * self.fourier_count * 3

    def frequencies(self) -> np.ndarray:
        return geometric_frequencies(self.fourier_base, self.fourier_count)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**data)


class AttentionWeights:
    """Projections of one attention module; the output projection is bias-free
    so that fully-masked queries emit exactly zero."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_model: int, d_out: int):
        self.wq = store.linear(f"{name}.wq", d_in, d_model)
        self.wk = store.linear(f"{name}.wk", d_in, d_model)
        self.wv = store.linear(f"{name}.wv", d_in, d_model)
        self.wo = store.linear(f"{name}.wo", d_model, d_out, bias=False)


class TokenizerWeights:
    def __init__(self, store: ParamStore, cfg: ModelConfig, map_width: int, agent_width: int):
        h = cfg.hidden
        self.hidden = h
        self.map_point = store.mlp("tokenizer.map_point", [map_width, h, h])
        self.map_out = store.mlp("tokenizer.map_out", [h, h, h])
        self.agent_point = store.mlp("tokenizer.agent_point", [agent_width, h, h])
        self.agent_out = store.mlp("tokenizer.agent_out", [h, h, h])


class ContextLayerWeights:
    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        h = cfg.hidden
        self.attn = AttentionWeights(store, f"{name}.attn", cfg.pair_width, h, h)
        self.ln1 = store.norm(f"{name}.ln1", h)
        self.ln2 = store.norm(f"{name}.ln2", h)
        self.ffn = store.mlp(f"{name}.ffn", [h, cfg.ffn_hidden, h])


class DecoderLayerWeights:
    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        h = cfg.hidden
        self.map_attn = AttentionWeights(store, f"{name}.map", cfg.pair_width, h, h)
        self.nonfocal_attn = AttentionWeights(store, f"{name}.nonfocal", cfg.pair_width, h, h)
        self.temporal_attn = AttentionWeights(store, f"{name}.temporal", cfg.pair_width, h, h)
        self.spatial_attn = AttentionWeights(store, f"{name}.spatial", cfg.pair_width, h, h)
        self.tpe = store.table(f"{name}.tpe", cfg.l_total, h)
        self.update_mlp = store.mlp(f"{name}.update", [5 * h, cfg.ffn_hidden, h])


class DetokenizerWeights:
    def __init__(self, store: ParamStore, cfg: ModelConfig):
        h = cfg.hidden
        self.f_long = store.table("detok.f_long", cfg.k_long, h)
        self.f_short = store.table("detok.f_short", cfg.k_short, h)
        self.cls_short = store.mlp("detok.cls_short", [2 * h, h, cfg.k_short])
        self.refine_mlp = store.mlp("detok.refine", [3 * h, cfg.ffn_hidden, h])
        self.dec_short = store.mlp("detok.dec_short", [h, cfg.ffn_hidden, cfg.t_token * 2])
        self.dec_long = store.mlp("detok.dec_long", [h, cfg.ffn_hidden, cfg.t_future * 2])
        self.conf = store.mlp("detok.conf", [h, h, 1])


class DenseFutureWeights:
    def __init__(self, store: ParamStore, cfg: ModelConfig):
        h = cfg.hidden
        out = cfg.t_future * 2
        self.head = store.mlp("dense.head", [h, cfg.ffn_hidden, out])
        self.fuse = store.mlp("dense.fuse", [h + out, cfg.ffn_hidden, h])


class Model:
    """All weights of the forecaster, addressable by name for checkpoints."""

    def __init__(self, config: ModelConfig):
        from .tokenizer import AGENT_POINT_WIDTH, MAP_POINT_WIDTH

        self.config = config
        self.store = ParamStore(np.random.default_rng(config.init_seed))
        self.pos_mlp = self.store.mlp(
            "pos_mlp", [config.fourier_width, config.pos_hidden, config.pos_hidden]
        )
        self.tokenizer = TokenizerWeights(self.store, config, MAP_POINT_WIDTH, AGENT_POINT_WIDTH)
        self.context_layers = [
            ContextLayerWeights(self.store, f"context.{i}", config)
            for i in range(config.context_layers)
        ]
        self.dense = DenseFutureWeights(self.store, config)
        self.decoder_layers = [
            DecoderLayerWeights(self.store, f"decoder.{i}", config)
            for i in range(config.decoder_layers)
        ]
        self.detokenizer = DetokenizerWeights(self.store, config)
        self._frequencies = config.frequencies()

    def parameters(self) -> dict[str, Tensor]:
        return self.store.params

    def zero_grad(self):
        self.store.zero_grad()

    def pair_fourier(self, src_frames: np.ndarray, dst_frames: np.ndarray) -> np.ndarray:
        """Fourier features of the relative transform of broadcast frame arrays."""
        rel = relative_transform_array(
            src_frames, dst_frames, global_delta=self.config.pe_global_delta
        )
        return fourier_encode(rel, self._frequencies)

    def pos_embed(self, fourier_features: np.ndarray) -> Tensor:
        """Shared spatial position embedding MLP over precomputed Fourier features."""
        return mlp_forward(ag.constant(fourier_features), self.pos_mlp)

    def tokenize(self, scene: SceneSample, target_ids, include_future: bool) -> SceneTokens:
        return tokenize_scene(
            scene, target_ids, self.config.token_config(), self.tokenizer, include_future
        )
