"""Synthetic scenes, the dataset container, and annotation ingestion.

A scene is generated directly at feature-map resolution: each object adds its
class signature (a fixed vector over channels) times a footprint that equals the
box convolved with a Gaussian whose width is ``boundary_softness`` times the
box size.  Soft footprints make object extents genuinely ambiguous.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .boxes import Box, SizeBucket, area_bucket, to_corners
from .errors import InvalidInputError, IntegrityError
from .npzio import write_npz
from .roi import FeatureMap

DATASET_FORMAT = "dsdh-dataset"
DATASET_VERSION = 1
# Coordinates are multiples of this so that mirroring ``x -> W - x`` is exact.
COORD_QUANTUM = 1.0 / 1024


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 10
    objects_per_scene: tuple[int, int] = (2, 10)
    size_range: tuple[float, float] = (8.0, 160.0)
    aspect_range: tuple[float, float] = (0.5, 2.0)
    boundary_softness: float = 0.3
    noise: float = 0.1
    channels: int = 16
    stride: int = 4
    image_size: tuple[int, int] = (256, 256)
    train_scenes: int = 200
    test_scenes: int = 50
    seed: int = 7
    placement_attempts: int = 50

    def __post_init__(self):
        lo, hi = self.objects_per_scene
        if not 0 <= lo <= hi:
            raise InvalidInputError(f"bad objects_per_scene {self.objects_per_scene}")
        if not 0 < self.size_range[0] <= self.size_range[1]:
            raise InvalidInputError(f"bad size_range {self.size_range}")
        if self.num_classes > self.channels:
            raise InvalidInputError("class signatures need at least as many channels as classes")
        w, h = self.image_size
        if w % self.stride or h % self.stride:
            raise InvalidInputError("image size must be a multiple of the stride")
        if self.boundary_softness < 0 or self.noise < 0:
            raise InvalidInputError("softness and noise must be non-negative")

    @property
    def scenes(self) -> int:
        return self.train_scenes + self.test_scenes

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("objects_per_scene", "size_range", "aspect_range", "image_size"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Scene:
    id: str
    feature_map: FeatureMap
    boxes: np.ndarray  # (M, 4) center form, image pixels
    classes: np.ndarray  # (M,) in 1..K
    image_size: tuple[int, int]
    split: str = "train"

    @property
    def ground_truths(self) -> list[tuple[Box, int]]:
        return [(Box(*b), int(c)) for b, c in zip(self.boxes.tolist(), self.classes.tolist())]

    def validate(self, num_classes: int | None = None) -> "Scene":
        w, h = self.image_size
        if len(self.boxes):
            c = to_corners(self.boxes)
            if np.any(c[:, :2] < 0) or np.any(c[:, 2] > w) or np.any(c[:, 3] > h):
                raise InvalidInputError(f"scene {self.id}: ground truth outside the image")
            if np.any(self.classes < 1) or (num_classes is not None and np.any(self.classes > num_classes)):
                raise InvalidInputError(f"scene {self.id}: class index out of range")
        return self


def class_signatures(config: SynthConfig) -> np.ndarray:
    """One ``channels``-long signature per class, row ``k - 1`` for class ``k``."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    sig = rng.standard_normal((config.num_classes, config.channels))
    if np.linalg.matrix_rank(sig) < config.num_classes:
        raise InvalidInputError("class signatures are linearly dependent")
    return sig


def _profile(centers, lo, hi, sigma):
    if sigma == 0:
        return ((centers >= lo) & (centers <= hi)).astype(np.float64)
    k = 1.0 / (sigma * np.sqrt(2.0))
    return 0.5 * (erf((centers - lo) * k) - erf((centers - hi) * k))


def footprint(box, shape: tuple[int, int], stride: float, softness: float) -> np.ndarray:
    """Soft box indicator evaluated at feature-cell centers, shape ``(H, W)``."""
    x, y, w, h = box
    rows = (np.arange(shape[0]) + 0.5) * stride
    cols = (np.arange(shape[1]) + 0.5) * stride
    py = _profile(rows, y - h / 2, y + h / 2, softness * h)
    px = _profile(cols, x - w / 2, x + w / 2, softness * w)
    return np.outer(py, px)


def _quantize(v):
    return np.round(np.asarray(v) / COORD_QUANTUM) * COORD_QUANTUM


def _sample_boxes(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    width, height = config.image_size
    lo, hi = config.objects_per_scene
    count = int(rng.integers(lo, hi + 1))
    log_lo, log_hi = np.log(config.size_range)
    a_lo, a_hi = np.log(config.aspect_range)
    sizes = np.exp(rng.uniform(log_lo, log_hi, size=count))
    aspects = np.exp(rng.uniform(a_lo, a_hi, size=count))
    boxes: list[np.ndarray] = []
    # largest first, so big objects are not crowded out by earlier small ones
    for size, aspect in sorted(zip(sizes, aspects), key=lambda t: -t[0]):
        w = max(_quantize(min(size * np.sqrt(aspect), width)), COORD_QUANTUM)
        h = max(_quantize(min(size / np.sqrt(aspect), height)), COORD_QUANTUM)
        for _ in range(config.placement_attempts):
            x = np.clip(_quantize(rng.uniform(w / 2, width - w / 2)), w / 2, width - w / 2)
            y = np.clip(_quantize(rng.uniform(h / 2, height - h / 2)), h / 2, height - h / 2)
            cand = np.array([x, y, w, h])
            if all(not _centers_collide(cand, other) for other in boxes):
                boxes.append(cand)
                break
    return np.array(boxes).reshape(-1, 4)


def _centers_collide(a, b) -> bool:
    """True when either box contains the other's center."""
    def inside(p, q):
        return abs(p[0] - q[0]) <= q[2] / 2 and abs(p[1] - q[1]) <= q[3] / 2

    return inside(a, b) or inside(b, a)


def generate_scene(config: SynthConfig, index: int) -> Scene:
    """Scene ``index`` of the family defined by ``config``; pure in ``(seed, index)``."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
    signatures = class_signatures(config)
    width, height = config.image_size
    shape = (height // config.stride, width // config.stride)
    boxes = _sample_boxes(config, rng)
    classes = rng.integers(1, config.num_classes + 1, size=len(boxes))
    values = np.zeros(shape + (config.channels,))
    for box, cls in zip(boxes, classes):
        values += footprint(box, shape, config.stride, config.boundary_softness)[..., None] * signatures[cls - 1]
    if config.noise > 0:
        values += config.noise * rng.standard_normal(values.shape)
    split = "train" if index < config.train_scenes else "test"
    return Scene(
        id=f"{config.seed}-{index:05d}",
        feature_map=FeatureMap(values.astype(np.float32), float(config.stride)),
        boxes=boxes,
        classes=classes.astype(np.int64),
        image_size=(width, height),
        split=split,
    ).validate(config.num_classes)


def generate_dataset(config: SynthConfig) -> list[Scene]:
    return [generate_scene(config, i) for i in range(config.scenes)]


def horizontal_flip(scene: Scene) -> Scene:
    """Mirror the scene left-to-right; classes are unchanged."""
    width = scene.image_size[0]
    boxes = scene.boxes.copy()
    boxes[:, 0] = width - boxes[:, 0]
    return Scene(
        id=scene.id,
        feature_map=FeatureMap(scene.feature_map.values[:, ::-1, :].copy(), scene.feature_map.stride),
        boxes=boxes,
        classes=scene.classes.copy(),
        image_size=scene.image_size,
        split=scene.split,
    )


def bucket_mix(scenes) -> dict[SizeBucket, float]:
    """Fraction of ground truths falling in each size bucket."""
    counts = {b: 0 for b in SizeBucket}
    for scene in scenes:
        for box in scene.boxes:
            counts[area_bucket(box)] += 1
    total = max(sum(counts.values()), 1)
    return {b: c / total for b, c in counts.items()}


# dataset container ---------------------------------------------------------------


@dataclass
class Dataset:
    scenes: list[Scene]
    config: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Scene]:
        return [s for s in self.scenes if s.split == name]


def _digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for key in sorted(arrays):
        arr = np.ascontiguousarray(arrays[key])
        h.update(key.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def write_dataset(scenes, path, config: dict | None = None) -> Path:
    """Write scenes to a versioned ``.npz`` container (layout in the README)."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    records = []
    for i, s in enumerate(scenes):
        arrays[f"map_{i}"] = s.feature_map.values
        arrays[f"boxes_{i}"] = np.asarray(s.boxes, dtype=np.float64).reshape(-1, 4)
        arrays[f"classes_{i}"] = np.asarray(s.classes, dtype=np.int64)
        records.append({
            "id": s.id,
            "split": s.split,
            "image_size": list(s.image_size),
            "stride": s.feature_map.stride,
        })
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "config": config or {},
        "scenes": records,
        "sha256": _digest(arrays),
    }
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    return write_npz(path, arrays, compress=True)


def read_dataset(path) -> Dataset:
    """Read a container written by :func:`write_dataset`, verifying its checksum."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as exc:
        raise IntegrityError(f"{path}: unreadable dataset container ({exc})") from exc
    if "header" not in arrays:
        raise IntegrityError(f"{path}: missing header")
    try:
        header = json.loads(arrays.pop("header").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    if header.get("format") != DATASET_FORMAT:
        raise IntegrityError(f"{path}: not a dataset container")
    if header.get("version") != DATASET_VERSION:
        raise IntegrityError(f"{path}: dataset version {header.get('version')} is not supported (expected {DATASET_VERSION})")
    if _digest(arrays) != header.get("sha256"):
        raise IntegrityError(f"{path}: checksum mismatch")
    scenes = []
    for i, rec in enumerate(header["scenes"]):
        scenes.append(Scene(
            id=rec["id"],
            feature_map=FeatureMap(arrays[f"map_{i}"], rec["stride"]),
            boxes=arrays[f"boxes_{i}"],
            classes=arrays[f"classes_{i}"],
            image_size=tuple(rec["image_size"]),
            split=rec["split"],
        ))
    return Dataset(scenes, header["config"])


# annotation ingestion ------------------------------------------------------------


@dataclass
class IngestedImage:
    id: str
    width: float
    height: float
    boxes: np.ndarray
    classes: np.ndarray


@dataclass
class IngestResult:
    images: list[IngestedImage]
    categories: dict[int, int]  # source category id -> 1..K
    diagnostics: list[str]


def ingest_annotations(path) -> IngestResult:
    """Load a JSON annotation file with top-left ``[x, y, w, h]`` boxes.

    Categories are renumbered ``1..K`` in ascending source-id order.  Malformed
    or unknown records are skipped and reported in ``diagnostics``.
    """
    doc = json.loads(Path(path).read_text())
    diagnostics: list[str] = []
    cat_ids = sorted({int(c["id"]) for c in doc.get("categories", [])})
    categories = {cid: k + 1 for k, cid in enumerate(cat_ids)}
    images: dict[str, dict] = {}
    for rec in doc.get("images", []):
        try:
            images[str(rec["id"])] = {"width": float(rec["width"]), "height": float(rec["height"]), "boxes": [], "classes": []}
        except (KeyError, TypeError, ValueError):
            diagnostics.append(f"malformed image record {rec!r}")
    for n, ann in enumerate(doc.get("annotations", [])):
        try:
            image_id = str(ann["image_id"])
            x, y, w, h = (float(v) for v in ann["bbox"])
            cat = int(ann["category_id"])
        except (KeyError, TypeError, ValueError):
            diagnostics.append(f"annotation {n}: malformed record")
            continue
        if image_id not in images:
            diagnostics.append(f"annotation {n}: unknown image {image_id!r}")
            continue
        if cat not in categories:
            diagnostics.append(f"annotation {n}: unknown category {cat}")
            continue
        if not (w > 0 and h > 0 and np.isfinite([x, y, w, h]).all()):
            diagnostics.append(f"annotation {n}: degenerate box")
            continue
        images[image_id]["boxes"].append([x + w / 2, y + h / 2, w, h])
        images[image_id]["classes"].append(categories[cat])
    out = [
        IngestedImage(k, v["width"], v["height"], np.array(v["boxes"], dtype=np.float64).reshape(-1, 4), np.array(v["classes"], dtype=np.int64))
        for k, v in images.items()
    ]
    return IngestResult(out, categories, diagnostics)


def attach_features(ingested: IngestResult, feature_maps: dict[str, FeatureMap], split: str = "train") -> tuple[list[Scene], list[str]]:
    """Pair ingested images with feature maps; images without one are rejected."""
    scenes, rejected = [], []
    for img in ingested.images:
        fmap = feature_maps.get(img.id)
        if fmap is None:
            rejected.append(f"image {img.id}: no feature map supplied")
            continue
        scenes.append(Scene(img.id, fmap, img.boxes, img.classes, (img.width, img.height), split))
    return scenes, rejected


def export_annotations(scenes, path, num_classes: int) -> Path:
    """Write scenes' ground truths in the format read by :func:`ingest_annotations`."""
    doc = {
        "images": [{"id": s.id, "width": s.image_size[0], "height": s.image_size[1]} for s in scenes],
        "categories": [{"id": k, "name": f"class_{k}"} for k in range(1, num_classes + 1)],
        "annotations": [
            {
                "image_id": s.id,
                "bbox": [b[0] - b[2] / 2, b[1] - b[3] / 2, b[2], b[3]],
                "category_id": int(c),
            }
            for s in scenes
            for b, c in zip(s.boxes.tolist(), s.classes.tolist())
        ],
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1))
    return path
