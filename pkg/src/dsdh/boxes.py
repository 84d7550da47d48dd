"""Box algebra in center parametrization.

Boxes are ``(x, y, w, h)`` with ``(x, y)`` the center, in image pixels.  Every
function accepts a single box or an ``(N, 4)`` array and is vectorized over the
leading axes.  Deltas are ``(dx, dy, dw, dh)`` scaled by a :class:`DeltaScale`.
"""
from __future__ import annotations

import math
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError

# Bound on dw/lw and dh/lh before exponentiation.  Heads decode their raw
# predictions with SCALE_CLAMP; the plain codec only guards against overflow so
# that any realistic size ratio survives a round trip.
SCALE_CLAMP = math.log(1000.0 / 16)
CODEC_CLAMP = math.log(1e6)


class Box(NamedTuple):
    x: float
    y: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def area(self) -> float:
        return self.w * self.h


class Delta(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float

    @property
    def offset(self) -> tuple[float, float]:
        return (self.dx, self.dy)

    @property
    def scaling(self) -> tuple[float, float]:
        return (self.dw, self.dh)

    @property
    def horizontal(self) -> tuple[float, float]:
        return (self.dx, self.dw)

    @property
    def vertical(self) -> tuple[float, float]:
        return (self.dy, self.dh)

    @classmethod
    def from_os(cls, offset, scaling) -> "Delta":
        return cls(offset[0], offset[1], scaling[0], scaling[1])

    @classmethod
    def from_hv(cls, horizontal, vertical) -> "Delta":
        return cls(horizontal[0], vertical[0], horizontal[1], vertical[1])


class DeltaScale(NamedTuple):
    lx: float = 10.0
    ly: float = 10.0
    lw: float = 5.0
    lh: float = 5.0

    def validate(self) -> "DeltaScale":
        if not all(v > 0 and math.isfinite(v) for v in self):
            raise InvalidInputError(f"delta scale must be strictly positive, got {tuple(self)}")
        return self


DEFAULT_SCALE = DeltaScale()

# Component indices of each named view into a delta, in (dx, dy, dw, dh) order.
VIEWS = {
    "O": (0, 1),
    "S": (2, 3),
    "H": (0, 2),
    "V": (1, 3),
}


class SizeBucket(str, Enum):
    SMALL = "S"
    MEDIUM = "M"
    LARGE = "L"


SMALL_MAX_AREA = 32.0**2
LARGE_MIN_AREA = 96.0**2


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.shape[-1:] != (4,):
        raise InvalidInputError(f"boxes must have a trailing dimension of 4, got shape {arr.shape}")
    return arr


def validate_boxes(boxes) -> np.ndarray:
    arr = as_boxes(boxes)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("box coordinates must be finite")
    if np.any(arr[..., 2:] <= 0):
        raise InvalidInputError("box width and height must be positive")
    return arr


def encode_delta(proposals, ground_truths, scale: DeltaScale = DEFAULT_SCALE) -> np.ndarray:
    """Regression target that carries ``proposals`` onto ``ground_truths``.

    >>> encode_delta((10, 10, 20, 20), (12, 11, 20, 20)).tolist()
    [1.0, 0.5, 0.0, 0.0]
    """
    p = validate_boxes(proposals)
    g = validate_boxes(ground_truths)
    lx, ly, lw, lh = scale.validate()
    out = np.empty(np.broadcast_shapes(p.shape, g.shape))
    out[..., 0] = lx * (g[..., 0] - p[..., 0]) / p[..., 2]
    out[..., 1] = ly * (g[..., 1] - p[..., 1]) / p[..., 3]
    out[..., 2] = lw * np.log(g[..., 2] / p[..., 2])
    out[..., 3] = lh * np.log(g[..., 3] / p[..., 3])
    return out


def _apply_offset(out, base, dx, dy, scale):
    out[..., 0] = base[..., 0] + dx * base[..., 2] / scale.lx
    out[..., 1] = base[..., 1] + dy * base[..., 3] / scale.ly


def _apply_scaling(out, base, dw, dh, scale, clamp):
    out[..., 2] = base[..., 2] * np.exp(np.minimum(dw / scale.lw, clamp))
    out[..., 3] = base[..., 3] * np.exp(np.minimum(dh / scale.lh, clamp))


def decode_full(proposals, deltas, scale: DeltaScale = DEFAULT_SCALE, clamp: float = CODEC_CLAMP) -> np.ndarray:
    """Inverse of :func:`encode_delta`; ``dw/lw`` and ``dh/lh`` saturate at ``clamp``."""
    p = validate_boxes(proposals)
    d = np.asarray(deltas, dtype=np.float64)
    scale.validate()
    out = np.array(np.broadcast_to(p, np.broadcast_shapes(p.shape, d.shape)))
    _apply_offset(out, p, d[..., 0], d[..., 1], scale)
    _apply_scaling(out, p, d[..., 2], d[..., 3], scale, clamp)
    return out


def decode_offset(proposals, offsets, scale: DeltaScale = DEFAULT_SCALE) -> np.ndarray:
    """Move box centers by an offset view ``(dx, dy)``; sizes are kept."""
    return decode_view(proposals, offsets, "O", scale)


def decode_scaling(boxes, scalings, scale: DeltaScale = DEFAULT_SCALE, clamp: float = CODEC_CLAMP) -> np.ndarray:
    """Rescale box sizes by a scaling view ``(dw, dh)``; centers are kept."""
    return decode_view(boxes, scalings, "S", scale, clamp)


def decode_view(boxes, values, view: str, scale: DeltaScale = DEFAULT_SCALE, clamp: float = CODEC_CLAMP) -> np.ndarray:
    """Apply a two-component view (``"O"``, ``"S"``, ``"H"`` or ``"V"``) to boxes.

    Each component uses the base box's own size, so an H step followed by a V
    step touches disjoint coordinates.
    """
    b = validate_boxes(boxes)
    v = np.asarray(values, dtype=np.float64)
    if v.shape[-1:] != (2,):
        raise InvalidInputError(f"a delta view has 2 components, got shape {v.shape}")
    scale.validate()
    out = np.array(np.broadcast_to(b, np.broadcast_shapes(b.shape, v.shape[:-1] + (4,))))
    lam = np.asarray(scale)
    for k, c in enumerate(VIEWS[view]):
        if c < 2:
            out[..., c] = b[..., c] + v[..., k] * b[..., c + 2] / lam[c]
        else:
            out[..., c] = b[..., c] * np.exp(np.minimum(v[..., k] / lam[c], clamp))
    return out


def to_corners(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    half_w, half_h = b[..., 2] / 2, b[..., 3] / 2
    return np.stack([b[..., 0] - half_w, b[..., 1] - half_h, b[..., 0] + half_w, b[..., 1] + half_h], axis=-1)


def from_corners(corners) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    return np.stack(
        [(c[..., 0] + c[..., 2]) / 2, (c[..., 1] + c[..., 3]) / 2, c[..., 2] - c[..., 0], c[..., 3] - c[..., 1]],
        axis=-1,
    )


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix of shape ``(len(a), len(b))``."""
    ca = to_corners(np.reshape(as_boxes(a), (-1, 4)))
    cb = to_corners(np.reshape(as_boxes(b), (-1, 4)))
    ix1 = np.maximum(ca[:, None, 0], cb[None, :, 0])
    iy1 = np.maximum(ca[:, None, 1], cb[None, :, 1])
    ix2 = np.minimum(ca[:, None, 2], cb[None, :, 2])
    iy2 = np.minimum(ca[:, None, 3], cb[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when they are disjoint."""
    return float(pairwise_iou(a, b)[0, 0])


def nms(boxes, classes, scores, iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy per-class non-maximum suppression.

    Returns indices of kept detections ordered by score descending, ties broken
    by lower input index.  A detection is dropped when its IoU with an already
    kept detection of the same class is strictly above ``iou_threshold``.
    """
    boxes = np.reshape(as_boxes(boxes), (-1, 4))
    classes = np.asarray(classes)
    scores = np.asarray(scores, dtype=np.float64)
    if not 0.0 <= iou_threshold <= 1.0:
        raise InvalidInputError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("scores must be finite")
    order = np.lexsort((np.arange(len(scores)), -scores))
    overlaps = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= (classes == classes[i]) & (overlaps[i] > iou_threshold)
    return np.asarray(keep, dtype=np.int64)


def area_bucket(box) -> SizeBucket:
    area = float(box[2] * box[3])
    if area < SMALL_MAX_AREA:
        return SizeBucket.SMALL
    if area > LARGE_MIN_AREA:
        return SizeBucket.LARGE
    return SizeBucket.MEDIUM


def area_buckets(boxes) -> np.ndarray:
    """Vectorized :func:`area_bucket`, returning the bucket codes as strings."""
    b = np.reshape(as_boxes(boxes), (-1, 4))
    area = b[:, 2] * b[:, 3]
    return np.where(area < SMALL_MAX_AREA, "S", np.where(area > LARGE_MIN_AREA, "L", "M"))


def clip_boxes(boxes, width: float, height: float) -> np.ndarray:
    """Clip boxes to the image rectangle ``[0, width] x [0, height]``.

    Boxes entirely outside collapse to a minimal 1e-3 extent at the border so
    the result stays valid.
    """
    c = to_corners(boxes)
    c[..., 0::2] = np.clip(c[..., 0::2], 0, width)
    c[..., 1::2] = np.clip(c[..., 1::2], 0, height)
    c[..., 2] = np.maximum(c[..., 2], c[..., 0] + 1e-3)
    c[..., 3] = np.maximum(c[..., 3], c[..., 1] + 1e-3)
    return from_corners(c)


def views_to_delta(first: Sequence[float], second: Sequence[float], pair: str = "OS") -> np.ndarray:
    """Reassemble a full delta from two complementary views (``"OS"`` or ``"HV"``)."""
    a, b = np.asarray(first, dtype=np.float64), np.asarray(second, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(a.shape, b.shape)[:-1] + (4,))
    for view, values in zip(pair, (a, b)):
        i, j = VIEWS[view]
        out[..., i] = values[..., 0]
        out[..., j] = values[..., 1]
    return out
