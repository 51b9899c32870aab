"""SE(2) pose algebra and Fourier relative position features.

Every token in a scene carries its own reference frame (a ``Pose2D``).
Attention modules never see absolute coordinates: they see the relative
transform between two frames, Fourier-encoded and passed through a small
MLP.  Keeping the translational part of the transform expressed in the
source frame makes the whole encoding invariant under rigid motions of
the scene; a ``global_delta=True`` escape hatch keeps the raw global
difference instead (useful only for ablations, it breaks the invariance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap an angle (scalar or array) to the half-open interval (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, TWO_PI) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if np.isscalar(theta) or getattr(theta, "ndim", 0) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    """An SE(2) reference frame: position in meters, heading in (-pi, pi]."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise DomainError(f"non-finite pose ({self.x}, {self.y}, {self.theta})")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=np.float64)


@dataclass(frozen=True)
class RelativeTransform:
    """Displacement of a destination frame expressed relative to a source frame."""

    dx: float
    dy: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta], dtype=np.float64)


def relative_transform(src: Pose2D, dst: Pose2D, global_delta: bool = False) -> RelativeTransform:
    """Relative transform from ``src`` to ``dst``.

    The translation is rotated into ``src``'s local frame so the result is
    invariant under global rigid motions.  With ``global_delta=True`` the raw
    global difference is returned instead (ablation only).
    """
    dx = dst.x - src.x
    dy = dst.y - src.y
    if not global_delta:
        c, s = math.cos(src.theta), math.sin(src.theta)
        dx, dy = c * dx + s * dy, -s * dx + c * dy
    return RelativeTransform(dx, dy, wrap_angle(dst.theta - src.theta))


def relative_transform_array(
    src: np.ndarray, dst: np.ndarray, global_delta: bool = False
) -> np.ndarray:
    """Vectorized :func:`relative_transform` on ``(..., 3)`` pose arrays.

    ``src`` and ``dst`` must broadcast against each other; the output holds
    ``(dx, dy, dtheta)`` triples.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise DomainError("non-finite pose in relative_transform_array")
    d = dst - src
    dx, dy = d[..., 0], d[..., 1]
    if not global_delta:
        c, s = np.cos(src[..., 2]), np.sin(src[..., 2])
        dx, dy = c * dx + s * dy, -s * dx + c * dy
    return np.stack([dx, dy, wrap_angle(d[..., 2])], axis=-1)


def apply_pose(frame: Pose2D, local_point) -> tuple[float, float]:
    """Map a point from ``frame``'s local coordinates into the global frame."""
    px, py = float(local_point[0]), float(local_point[1])
    if not (math.isfinite(px) and math.isfinite(py)):
        raise DomainError(f"non-finite point ({px}, {py})")
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    return (frame.x + c * px - s * py, frame.y + s * px + c * py)


def apply_pose_array(frame: Pose2D, local_points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`apply_pose` on an ``(..., 2)`` array of local points."""
    pts = np.asarray(local_points, dtype=np.float64)
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    x = frame.x + c * pts[..., 0] - s * pts[..., 1]
    y = frame.y + s * pts[..., 0] + c * pts[..., 1]
    return np.stack([x, y], axis=-1)


def to_local(frame: Pose2D, global_point) -> tuple[float, float]:
    """Inverse of :func:`apply_pose`: express a global point in ``frame``."""
    gx, gy = float(global_point[0]), float(global_point[1])
    dx, dy = gx - frame.x, gy - frame.y
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    return (c * dx + s * dy, -s * dx + c * dy)


def to_local_array(frame: Pose2D, global_points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`to_local` on an ``(..., 2)`` array of global points."""
    pts = np.asarray(global_points, dtype=np.float64)
    dx, dy = pts[..., 0] - frame.x, pts[..., 1] - frame.y
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def rotate_into(theta: float, vectors: np.ndarray) -> np.ndarray:
    """Rotate ``(..., 2)`` direction vectors into a frame with heading ``theta``."""
    vec = np.asarray(vectors, dtype=np.float64)
    c, s = math.cos(theta), math.sin(theta)
    return np.stack(
        [c * vec[..., 0] + s * vec[..., 1], -s * vec[..., 0] + c * vec[..., 1]], axis=-1
    )


def transform_pose(motion: Pose2D, pose: Pose2D) -> Pose2D:
    """Apply a rigid motion (itself an SE(2) element) to a pose."""
    x, y = apply_pose(motion, (pose.x, pose.y))
    return Pose2D(x, y, wrap_angle(pose.theta + motion.theta))


def geometric_frequencies(base: float = 1.0 / 128.0, count: int = 8) -> np.ndarray:
    """NeRF-style frequency ladder ``base * 2**k`` for ``k in [0, count)``."""
    if count < 1:
        raise ConfigError("need at least one frequency")
    return base * (2.0 ** np.arange(count, dtype=np.float64))


def fourier_encode(rel, frequencies) -> np.ndarray:
    """Sin/cos features of a relative transform.

    Accepts a single :class:`RelativeTransform` or an ``(..., 3)`` array of
    ``(dx, dy, dtheta)`` triples.  Output layout is fixed: for each input
    dimension in order (dx, dy, dtheta), for each frequency in order,
    the pair ``[sin(f*d), cos(f*d)]``.  Length is ``2 * len(frequencies) * 3``.
    """
    freqs = np.asarray(frequencies, dtype=np.float64)
    if freqs.size == 0:
        raise ConfigError("fourier_encode requires at least one frequency")
    if isinstance(rel, RelativeTransform):
        rel = rel.as_array()
    rel = np.asarray(rel, dtype=np.float64)
    # phases[..., d, f] = rel[..., d] * freqs[f]
    phases = rel[..., :, None] * freqs
    encoded = np.stack([np.sin(phases), np.cos(phases)], axis=-1)
    return encoded.reshape(rel.shape[:-1] + (2 * freqs.size * rel.shape[-1],))


def spatial_pos_embed(rel, frequencies, layers):
    """Relative spatial position embedding: MLP over Fourier features.

    ``rel`` is anything :func:`fourier_encode` accepts; ``layers`` are the
    embedding MLP's layers (see :mod:`tokentraj.nn`).  The Fourier features
    are constants; gradients flow through the MLP weights only.
    """
    from .autograd import Tensor, reshape
    from .nn import mlp_forward

    feats = fourier_encode(rel, frequencies)
    if layers[0].w.shape[0] != feats.shape[-1]:
        raise ShapeError(
            f"position MLP expects width {layers[0].w.shape[0]}, fourier gives {feats.shape[-1]}"
        )
    single = feats.ndim == 1
    out = mlp_forward(Tensor(feats[None] if single else feats), layers)
    return reshape(out, (out.shape[-1],)) if single else out
