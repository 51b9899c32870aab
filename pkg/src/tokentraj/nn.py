"""Parameter storage and the layer primitives built on the tensor engine."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError


class ParamStore:
    """Flat registry of named learnable tensors.

    Names are dotted paths (``"decoder.0.temporal.wq"``); creation order is
    preserved, which keeps checkpoint files and gradient reductions stable.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def matrix(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        std = 1.0 / math.sqrt(fan_in)
        return self._register(name, self.rng.normal(0.0, std, size=(fan_in, fan_out)))

    def vector(self, name: str, size: int, fill: float = 0.0) -> Tensor:
        return self._register(name, np.full(size, fill, dtype=np.float64))

    def table(self, name: str, rows: int, cols: int, std: float = 0.02) -> Tensor:
        return self._register(name, self.rng.normal(0.0, std, size=(rows, cols)))

    def linear(self, name: str, fan_in: int, fan_out: int, bias: bool = True) -> "Linear":
        return Linear(
            self.matrix(name + ".w", fan_in, fan_out),
            self.vector(name + ".b", fan_out) if bias else None,
        )

    def mlp(self, name: str, widths: list[int]) -> list["Linear"]:
        return [
            self.linear(f"{name}.{i}", widths[i], widths[i + 1]) for i in range(len(widths) - 1)
        ]

    def norm(self, name: str, size: int) -> tuple[Tensor, Tensor]:
        return self.vector(name + ".g", size, fill=1.0), self.vector(name + ".b", size)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"param {name}: shape {arr.shape} != {t.data.shape}")
            t.data = arr

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()


class Linear:
    def __init__(self, w: Tensor, b: Tensor | None):
        self.w = w
        self.b = b

    def __call__(self, x: Tensor) -> Tensor:
        out = ag.matmul(x, self.w)
        return ag.bias_add(out, self.b) if self.b is not None else out

    @property
    def out_features(self) -> int:
        return self.w.shape[1]


def mlp_forward(x: Tensor, layers: list[Linear], activation: str = "relu") -> Tensor:
    """Affine + activation per layer, last layer linear."""
    if activation != "relu":
        raise ConfigError(f"unsupported activation {activation!r}")
    for layer in layers[:-1]:
        x = ag.relu(layer(x))
    return layers[-1](x)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    """(..., L, D) -> (..., L, heads, d_head) as a reshape."""
    d = x.shape[-1]
    if d % num_heads != 0:
        raise ConfigError(f"feature dim {d} not divisible by {num_heads} heads")
    return ag.reshape(x, x.shape[:-1] + (num_heads, d // num_heads))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    num_heads: int,
    mask=None,
) -> Tensor:
    """Standard scaled dot-product attention.

    ``q`` is ``(..., Lq, Dq)``, ``k``/``v`` are ``(..., Lk, Dk)`` with the
    same leading dims.  ``mask`` is a boolean ``(Lq, Lk)`` array (or one
    broadcastable to ``(..., heads, Lq, Lk)``); blocked entries get exactly
    zero attention weight, and a fully-blocked query row outputs zeros.
    An empty key set yields zeros for every query.
    """
    if k.shape[-2] == 0:
        return ag.constant(np.zeros(q.shape[:-1] + (wo.out_features,)))
    qp, kp, vp = wq(q), wk(k), wv(v)
    d_head = qp.shape[-1] // num_heads
    lead = qp.shape[:-2]

    def to_heads(t):
        # (..., L, D) -> (..., heads, L, d_head)
        t = _split_heads(t, num_heads)
        axes = list(range(t.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        return ag.transpose(t, axes)

    qh, kh, vh = to_heads(qp), to_heads(kp), to_heads(vp)
    scores = ag.scale(ag.matmul(qh, ag.swap_last2(kh)), 1.0 / math.sqrt(d_head))
    if mask is None:
        weights = ag.softmax(scores, axis=-1)
    else:
        weights = ag.masked_softmax(scores, np.asarray(mask, dtype=bool), axis=-1)
    ctx = ag.matmul(weights, vh)  # (..., heads, Lq, d_head)
    axes = list(range(ctx.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    ctx = ag.transpose(ctx, axes)  # (..., Lq, heads, d_head)
    ctx = ag.reshape(ctx, lead + (qp.shape[-2], num_heads * d_head))
    return wo(ctx)


def pair_attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    num_heads: int,
    mask=None,
) -> Tensor:
    """Attention where every (query, key) pair carries its own inputs.

    Relative position features are concatenated per pair, so the query
    projection of pair ``(i, j)`` differs across ``j``.  Inputs are
    ``(..., Lq, Lk, D_in)``; the score of a pair is the per-head dot product
    of its projected query and key rows.  Output is ``(..., Lq, H_out)``.
    """
    if q_in.shape[:-1] != k_in.shape[:-1] or q_in.shape[:-1] != v_in.shape[:-1]:
        raise ShapeError(
            f"pair_attention pair dims differ: {q_in.shape} {k_in.shape} {v_in.shape}"
        )
    if k_in.shape[-2] == 0:
        return ag.constant(np.zeros(q_in.shape[:-2] + (wo.out_features,)))
    qp = _split_heads(wq(q_in), num_heads)  # (..., Lq, Lk, h, dh)
    kp = _split_heads(wk(k_in), num_heads)
    vp = _split_heads(wv(v_in), num_heads)
    d_head = qp.shape[-1]
    scores = ag.dot_last(qp, kp, scale_by=1.0 / math.sqrt(d_head))
    # scores: (..., Lq, Lk, h); softmax over keys
    if mask is None:
        weights = ag.softmax(scores, axis=-2)
    else:
        weights = ag.masked_softmax(scores, np.asarray(mask, dtype=bool)[..., None], axis=-2)
    ctx = ag.weighted_sum(weights, vp)  # (..., Lq, h, dh)
    ctx = ag.reshape(ctx, ctx.shape[:-2] + (num_heads * d_head,))
    return wo(ctx)
