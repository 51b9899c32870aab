"""Central-difference gradient checking against the autograd engine."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


def _scalar(value) -> float:
    return float(value.data) if isinstance(value, Tensor) else float(value)


def numeric_grad(fn, tensor: Tensor, indices, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. selected entries of ``tensor``.

    ``fn`` must re-run the forward pass reading ``tensor.data`` in place.
    Returns one derivative per entry of ``indices`` (flat indices).
    """
    flat = tensor.data.reshape(-1)
    out = np.empty(len(indices), dtype=np.float64)
    for n, i in enumerate(indices):
        saved = flat[i]
        flat[i] = saved + step
        up = _scalar(fn())
        flat[i] = saved - step
        down = _scalar(fn())
        flat[i] = saved
        out[n] = (up - down) / (2.0 * step)
    return out


def check_gradients(
    fn,
    tensors: list[Tensor],
    rng: np.random.Generator,
    probes_per_tensor: int = 3,
    step: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-8,
) -> float:
    """Compare autograd grads of scalar ``fn()`` with central differences.

    Runs one backward pass, then probes random entries of each tensor.
    Returns the worst relative error; raises ``AssertionError`` past
    ``rel_tol``.  ``abs_floor`` guards the denominator for near-zero grads.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        size = t.data.size
        count = min(probes_per_tensor, size)
        indices = rng.choice(size, size=count, replace=False)
        numeric = numeric_grad(fn, t, indices, step=step)
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)[indices]
        denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), abs_floor)
        rel = np.abs(numeric - analytic) / denom
        worst = max(worst, float(rel.max()))
        if rel.max() > rel_tol:
            bad = int(np.argmax(rel))
            raise AssertionError(
                f"gradient mismatch at flat index {indices[bad]}: "
                f"numeric={numeric[bad]:.6e} analytic={analytic[bad]:.6e} rel={rel[bad]:.3e}"
            )
    return worst
