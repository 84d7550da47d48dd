"""RoI-align pooling over a dense feature map.

Feature cell ``(r, c)`` is centred at feature coordinates ``(c, r)``; an image
point ``u`` maps to ``u / stride - 0.5``.  Bilinear corners that fall outside
the map read as zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor
from .boxes import Box, as_boxes
from .errors import InvalidInputError

DEFAULT_OUTPUT_SIZE = 7
DEFAULT_SAMPLES = 2


@dataclass
class FeatureMap:
    values: np.ndarray  # (H, W, C)
    stride: float = 4.0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise InvalidInputError(f"feature map must be a non-empty H x W x C grid, got {self.values.shape}")
        if not self.stride > 0:
            raise InvalidInputError(f"stride must be positive, got {self.stride}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("feature map values must be finite")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class PooledFeature:
    grid: np.ndarray  # (P, P, C)
    source_box: Box


def _axis_samples(start, length, stride, bins, samples):
    """Feature-space sample positions along one axis, shape ``(N, bins*samples)``."""
    steps = (np.arange(bins * samples) + 0.5) / (bins * samples)
    lo = (start - length / 2) / stride - 0.5
    pos = lo[:, None] + steps[None, :] * (length / stride)[:, None]
    dpos_dcenter = np.full_like(pos, 1.0 / stride)
    dpos_dlength = np.broadcast_to((steps - 0.5) / stride, pos.shape)
    return pos, dpos_dcenter, dpos_dlength


def _corners(pos, size):
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    i1 = i0 + 1
    valid0 = (i0 >= 0) & (i0 < size)
    valid1 = (i1 >= 0) & (i1 < size)
    return (
        (np.clip(i0, 0, size - 1), (1.0 - frac) * valid0, -1.0 * valid0),
        (np.clip(i1, 0, size - 1), frac * valid1, 1.0 * valid1),
    )


def roi_align(
    feature_map,
    boxes,
    output_size: int = DEFAULT_OUTPUT_SIZE,
    samples_per_bin: int = DEFAULT_SAMPLES,
    stride: float | None = None,
) -> Tensor:
    """Pool ``(N, P, P, C)`` features for ``N`` image-space boxes.

    Args:
        feature_map: a :class:`FeatureMap`, or an ``(H, W, C)`` array/Tensor
            together with ``stride``.  Gradients flow into a Tensor map.
        boxes: ``(N, 4)`` center-form boxes.  Passing a Tensor that requires
            grad makes the output differentiable in the box coordinates.
        output_size: bins per side.
        samples_per_bin: bilinear samples per bin along each axis.
    """
    if isinstance(feature_map, FeatureMap):
        stride = feature_map.stride if stride is None else stride
        fmap = Tensor(feature_map.values)
    else:
        fmap = as_tensor(feature_map)
        if stride is None:
            raise InvalidInputError("stride is required when pooling from a raw grid")
    if output_size < 1 or samples_per_bin < 1:
        raise InvalidInputError("output_size and samples_per_bin must be at least 1")
    box_t = boxes if isinstance(boxes, Tensor) else None
    b = box_t.data if box_t is not None else as_boxes(boxes)
    b = np.reshape(b, (-1, 4)).astype(np.float64)
    if np.any(~np.isfinite(b)) or np.any(b[:, 2:] <= 0):
        raise InvalidInputError("boxes must be finite with positive width and height")

    values = fmap.data
    height, width, channels = values.shape
    n, p, s = len(b), output_size, samples_per_bin
    xs, dxs_dx, dxs_dw = _axis_samples(b[:, 0], b[:, 2], stride, p, s)
    ys, dys_dy, dys_dh = _axis_samples(b[:, 1], b[:, 3], stride, p, s)
    xc = _corners(xs, width)
    yc = _corners(ys, height)

    sampled = np.zeros((n, p * s, p * s, channels), dtype=values.dtype)
    for yi, wy, _ in yc:
        for xi, wx, _ in xc:
            weight = wy[:, :, None] * wx[:, None, :]
            sampled += weight[..., None] * values[yi[:, :, None], xi[:, None, :]]
    out = sampled.reshape(n, p, s, p, s, channels).mean(axis=(2, 4))

    def backward(g):
        gs = np.repeat(np.repeat(g, s, axis=1), s, axis=2) / (s * s)
        grad_map = None
        if fmap.requires_grad:
            flat = np.zeros((height * width, channels), dtype=values.dtype)
            for yi, wy, _ in yc:
                for xi, wx, _ in xc:
                    weight = wy[:, :, None] * wx[:, None, :]
                    idx = (yi[:, :, None] * width + xi[:, None, :]).reshape(-1)
                    np.add.at(flat, idx, (weight[..., None] * gs).reshape(-1, channels))
            grad_map = flat.reshape(height, width, channels)
        grad_box = None
        if box_t is not None and box_t.requires_grad:
            dval_dx = np.zeros_like(sampled)
            dval_dy = np.zeros_like(sampled)
            for yi, wy, dwy in yc:
                for xi, wx, dwx in xc:
                    v = values[yi[:, :, None], xi[:, None, :]]
                    dval_dx += (wy[:, :, None] * dwx[:, None, :])[..., None] * v
                    dval_dy += (dwy[:, :, None] * wx[:, None, :])[..., None] * v
            gx = (gs * dval_dx).sum(axis=(1, 3))  # (N, Ps) over x samples
            gy = (gs * dval_dy).sum(axis=(2, 3))  # (N, Ps) over y samples
            grad_box = np.stack(
                [
                    (gx * dxs_dx).sum(axis=1),
                    (gy * dys_dy).sum(axis=1),
                    (gx * dxs_dw).sum(axis=1),
                    (gy * dys_dh).sum(axis=1),
                ],
                axis=1,
            ).reshape(box_t.shape)
        return (grad_map, grad_box)

    return Tensor._make(out, (fmap, box_t if box_t is not None else b), backward)


def pool(feature_map: FeatureMap, box, output_size: int = DEFAULT_OUTPUT_SIZE, samples_per_bin: int = DEFAULT_SAMPLES) -> PooledFeature:
    """Single-box convenience wrapper around :func:`roi_align`."""
    grid = roi_align(feature_map, np.asarray(box, dtype=np.float64)[None], output_size, samples_per_bin)
    return PooledFeature(grid.data[0], Box(*np.asarray(box, dtype=np.float64).tolist()))


def flatten(pooled) -> Tensor:
    """Row-major flattening: a ``(P, P, C)`` grid becomes ``(1, P*P*C)``, ``(N, P, P, C)`` becomes ``(N, P*P*C)``."""
    if isinstance(pooled, PooledFeature):
        return Tensor(pooled.grid.reshape(1, -1))
    t = as_tensor(pooled)
    if t.ndim == 3:
        return t.reshape(1, -1)
    return t.reshape(t.shape[0], -1)
