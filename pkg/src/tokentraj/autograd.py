"""Dense f64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous row-major ``float64`` numpy array.
Operations record closures onto an implicit tape (the graph of parent
links); ``backward()`` topologically sorts the graph and accumulates
``dLoss/dLeaf`` into every ``requires_grad`` leaf.  Repeated backward
calls without clearing grads accumulate, which the optimizer relies on
never happening by zeroing between steps.

Shapes are explicit: the only implicit broadcast is the bias add over the
last axis.  Attention, layer norm, softmax and the rotary rotation are
fused ops with hand-derived backward rules so that masked positions get
exactly zero weight and gradients stay cheap.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

_grad_enabled = True
_seq_counter = 0


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        global _seq_counter
        _seq_counter += 1
        self.seq = _seq_counter

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:  # broadcast views keep their source shape
                self.grad = np.zeros_like(self.data) + g
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate grads of all reachable ``requires_grad`` tensors.

        Only scalar roots are supported.  Calling twice without zeroing
        accumulates: each call adds exactly one unit-seeded pass, so a
        repeat pass first sets the graph's stale grads aside and restores
        them additively afterwards.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        repeat_pass = self.grad is not None
        saved = None
        if repeat_pass:
            saved = [(node, node.grad) for node in topo]
            for node in topo:
                node.grad = None
        self.accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        if repeat_pass:
            for node, old in saved:
                if old is None:
                    continue
                node.grad = old if node.grad is None else node.grad + old

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _record(data, parents, op, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _record(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return _record(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar."""
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _record(a.data * b.data, (a, b), "mul", backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * s)

    return _record(a.data * s, (a,), "scale", backward)


def bias_add(x, b) -> Tensor:
    """Add a vector over the last axis (the one permitted broadcast)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"bias_add got x{x.data.shape}, b{b.data.shape}")

    def backward(g):
        if x.requires_grad:
            x.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _record(x.data + b.data, (x, b), "bias_add", backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * (x.data > 0.0))

    return _record(out_data, (x,), "relu", backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g.reshape(x.data.shape))

    return _record(x.data.reshape(shape), (x,), "reshape", backward)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x.accumulate(g.transpose(inverse))

    return _record(x.data.transpose(axes), (x,), "transpose", backward)


def swap_last2(x) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(parts, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                p.accumulate(g[tuple(index)])

    return _record(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), "concat", backward)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[index] += g

    return _record(x.data[index], (x,), "slice", backward)


def gather(x, indices) -> Tensor:
    """Index rows along axis 0 with an integer array; backward scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(indices)

    def backward(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx.reshape(-1), g.reshape((-1,) + x.data.shape[1:]))

    return _record(x.data[idx], (x,), "gather", backward)


def expand(x, axis: int, reps: int) -> Tensor:
    """Broadcast a length-1 axis to ``reps`` (a view); backward sums back."""
    x = as_tensor(x)
    if x.data.shape[axis] != 1:
        raise ShapeError(f"expand needs size-1 axis, got {x.data.shape}[{axis}]")
    shape = list(x.data.shape)
    shape[axis] = reps

    def backward(g):
        if x.requires_grad:
            x.accumulate(g.sum(axis=axis, keepdims=True))

    return _record(np.broadcast_to(x.data, shape), (x,), "expand", backward)


def sum_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            if axis is None:
                x.accumulate(np.broadcast_to(g, x.data.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                x.accumulate(np.broadcast_to(gg, x.data.shape))

    return _record(out_data, (x,), "sum", backward)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def backward(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, float(g) / n))

    return _record(np.asarray(x.data.mean()), (x,), "mean", backward)


def max_axis(x, axis: int) -> Tensor:
    """Max-reduce one axis; gradient routes to the first argmax (ties)."""
    x = as_tensor(x)
    arg = x.data.argmax(axis=axis)
    out_data = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.put_along_axis(
                full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis
            )
            x.accumulate(full)

    return _record(out_data, (x,), "max", backward)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supports 2-D x 2-D, batched (identical leading dims) x batched, and
    N-D x 2-D (weight application over trailing feature axis).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims {a.data.shape} @ {b.data.shape}")
    if b.ndim == 2 and a.ndim > 2:
        lead = a.data.shape[:-1]
        out_data = (a.data.reshape(-1, a.data.shape[-1]) @ b.data).reshape(
            lead + (b.data.shape[1],)
        )

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a.accumulate((g2 @ b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                b.accumulate(a.data.reshape(-1, a.data.shape[-1]).T @ g2)

        return _record(out_data, (a, b), "matmul", backward)

    if a.ndim != b.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul leading dims {a.data.shape} @ {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b.accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _record(a.data @ b.data, (a, b), "matmul", backward)


# ---------------------------------------------------------------------------
# fused ops


def dot_last(a, b, scale_by: float = 1.0) -> Tensor:
    """Scaled dot product over the last axis: ``out = scale * sum(a*b, -1)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"dot_last shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        gs = g[..., None] * scale_by
        if a.requires_grad:
            a.accumulate(gs * b.data)
        if b.requires_grad:
            b.accumulate(gs * a.data)

    return _record((a.data * b.data).sum(axis=-1) * scale_by, (a, b), "dot_last", backward)


def weighted_sum(weights, values) -> Tensor:
    """Attention mix: ``out[..., h, d] = sum_k weights[..., k, h] * values[..., k, h, d]``."""
    weights, values = as_tensor(weights), as_tensor(values)
    if weights.data.shape != values.data.shape[:-1]:
        raise ShapeError(
            f"weighted_sum shapes {weights.data.shape} vs {values.data.shape}"
        )
    out_data = np.einsum("...kh,...khd->...hd", weights.data, values.data)

    def backward(g):
        if weights.requires_grad:
            weights.accumulate(np.einsum("...hd,...khd->...kh", g, values.data))
        if values.requires_grad:
            values.accumulate(weights.data[..., None] * g[..., None, :, :])

    return _record(out_data, (weights, values), "weighted_sum", backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * s).sum(axis=axis, keepdims=True)
            x.accumulate(s * (g - inner))

    return _record(s, (x,), "softmax", backward)


def masked_softmax(x, mask, axis: int = -1) -> Tensor:
    """Softmax over allowed positions only.

    ``mask`` is a boolean array broadcastable to ``x``; disallowed entries
    get exactly zero weight.  Rows with no allowed entry output all zeros
    (the defined value for fully-masked attention queries).
    """
    x = as_tensor(x)
    allowed = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    neg = np.where(allowed, x.data, -np.inf)
    m = neg.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(allowed, np.exp(neg - m), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    s = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0.0)

    def backward(g):
        if x.requires_grad:
            inner = (g * s).sum(axis=axis, keepdims=True)
            x.accumulate(s * (g - inner))

    return _record(s, (x,), "masked_softmax", backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    s = np.exp(out_data)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g - s * g.sum(axis=axis, keepdims=True))

    return _record(out_data, (x,), "log_softmax", backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            mean_g = gx.mean(axis=-1, keepdims=True)
            mean_gx = (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (gx - mean_g - xhat * mean_gx))

    return _record(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", backward)


def smooth_l1(x, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty of a residual tensor."""
    x = as_tensor(x)
    absx = np.abs(x.data)
    quad = absx <= delta
    out_data = np.where(quad, 0.5 * x.data * x.data / delta, absx - 0.5 * delta)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * np.where(quad, x.data / delta, np.sign(x.data)))

    return _record(out_data, (x,), "smooth_l1", backward)


def rope_rotate(x, positions, base: float = 10000.0, rotate_width: int | None = None) -> Tensor:
    """Rotary position encoding on interleaved coordinate pairs.

    Pair ``(x[..., 2i], x[..., 2i+1])`` is rotated by ``m * base**(-2i/d)``
    where ``m`` is the position index broadcast over the leading axes and
    ``d`` is the rotated width.  ``rotate_width`` restricts rotation to the
    first ``rotate_width`` features (the rest pass through unchanged).
    """
    x = as_tensor(x)
    d = x.data.shape[-1] if rotate_width is None else int(rotate_width)
    if d % 2 != 0:
        raise ConfigError(f"rotary width must be even, got {d}")
    if d > x.data.shape[-1]:
        raise ShapeError(f"rotate_width {d} exceeds feature dim {x.data.shape[-1]}")
    pos = np.asarray(positions, dtype=np.float64)
    theta = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angles = pos[..., None] * theta  # (..., d/2)
    c, s = np.cos(angles), np.sin(angles)
    even = x.data[..., 0:d:2]
    odd = x.data[..., 1:d:2]
    out_data = x.data.copy()
    out_data[..., 0:d:2] = even * c - odd * s
    out_data[..., 1:d:2] = even * s + odd * c

    def backward(g):
        if x.requires_grad:
            gx = g.copy()
            ge = g[..., 0:d:2]
            go = g[..., 1:d:2]
            gx[..., 0:d:2] = ge * c + go * s
            gx[..., 1:d:2] = -ge * s + go * c
            x.accumulate(gx)

    return _record(out_data, (x,), "rope", backward)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted-scaling Bernoulli dropout; identity when ``rate == 0``."""
    x = as_tensor(x)
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ConfigError(f"dropout rate must be < 1, got {rate}")
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * keep)

    return _record(x.data * keep, (x,), "dropout", backward)


def first_nonfinite(root: Tensor) -> Tensor | None:
    """Earliest-created tensor with a non-finite value reachable from ``root``."""
    seen = set()
    stack = [root]
    bad = []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if not np.all(np.isfinite(node.data)):
            bad.append(node)
        stack.extend(node._parents)
    if not bad:
        return None
    return min(bad, key=lambda t: t.seq)
