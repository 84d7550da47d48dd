"""PASCAL-style average precision, size-bucketed AP, and offset statistics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import no_grad
from .boxes import SizeBucket, area_buckets, encode_delta, pairwise_iou
from .errors import InvalidInputError

SCORE_THRESHOLD = 0.01
NMS_IOU = 0.5
MAX_DETECTIONS = 100
MATCH_IOU = 0.5


class Detection(NamedTuple):
    image_id: str
    box: tuple[float, float, float, float]
    cls: int
    score: float


class GroundTruth(NamedTuple):
    image_id: str
    box: tuple[float, float, float, float]
    cls: int


@dataclass
class EvalReport:
    per_class_ap: dict[int, float | None]
    mean_ap: float
    ap_small: float | None = None
    ap_medium: float | None = None
    ap_large: float | None = None
    gt_counts: dict[str, int] = field(default_factory=dict)
    det_counts: dict[str, int] = field(default_factory=dict)
    per_class_bucket_ap: dict[str, dict[int, float | None]] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)

    def bucket_ap(self, bucket: str) -> float | None:
        return {"S": self.ap_small, "M": self.ap_medium, "L": self.ap_large}[bucket]

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "mean_ap": self.mean_ap,
            "ap_small": self.ap_small,
            "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
            "gt_counts": self.gt_counts,
            "det_counts": self.det_counts,
        }

    def to_csv(self) -> str:
        """Columns: class, AP, AP_S, AP_M, AP_L, num_gt, num_det; last row is the mean."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "AP", "AP_S", "AP_M", "AP_L", "num_gt", "num_det"])

        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        for k in sorted(self.per_class_ap):
            writer.writerow([
                k,
                fmt(self.per_class_ap[k]),
                *(fmt(self.per_class_bucket_ap.get(b, {}).get(k)) for b in "SML"),
                self.gt_counts.get(f"class_{k}", 0),
                self.det_counts.get(f"class_{k}", 0),
            ])
        writer.writerow([
            "mean", fmt(self.mean_ap), fmt(self.ap_small), fmt(self.ap_medium), fmt(self.ap_large),
            self.gt_counts.get("all", 0), self.det_counts.get("all", 0),
        ])
        return buf.getvalue()


def cap_per_image(detections: Sequence[Detection], max_dets: int = MAX_DETECTIONS) -> list[Detection]:
    """Keep the ``max_dets`` highest-scoring detections of each image (stable on ties)."""
    by_image: dict[str, list[int]] = {}
    for i, d in enumerate(detections):
        by_image.setdefault(d.image_id, []).append(i)
    keep = set()
    for idx in by_image.values():
        ranked = sorted(idx, key=lambda i: (-detections[i].score, i))
        keep.update(ranked[:max_dets])
    return [d for i, d in enumerate(detections) if i in keep]


def average_precision(recall: np.ndarray, precision: np.ndarray, interpolation: str = "all_points") -> float:
    """Area under the monotone precision envelope."""
    if interpolation == "11_point":
        return float(np.mean([precision[recall >= t].max() if np.any(recall >= t) else 0.0 for t in np.linspace(0, 1, 11)]))
    if interpolation != "all_points":
        raise InvalidInputError(f"unknown interpolation {interpolation!r}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def match_detections(dets: list[Detection], gts: list[GroundTruth], ignore: np.ndarray, iou_threshold: float):
    """Greedy matching of one class's score-sorted detections.

    Returns per-detection outcome codes: 1 true positive, 0 false positive,
    -1 ignored (overlaps only ignored ground truths).
    """
    gt_by_image: dict[str, list[int]] = {}
    for j, g in enumerate(gts):
        gt_by_image.setdefault(g.image_id, []).append(j)
    matched = np.zeros(len(gts), dtype=bool)
    outcome = np.zeros(len(dets), dtype=np.int64)
    for i, d in enumerate(dets):
        cand = gt_by_image.get(d.image_id, [])
        if not cand:
            continue
        ious = pairwise_iou(np.asarray(d.box)[None], np.asarray([gts[j].box for j in cand]))[0]
        best, best_iou = -1, -1.0
        for j, v in zip(cand, ious):
            if not ignore[j] and not matched[j] and v >= iou_threshold and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            matched[best] = True
            outcome[i] = 1
        elif any(ignore[j] and v >= iou_threshold for j, v in zip(cand, ious)):
            outcome[i] = -1
    return outcome


def _sorted_class_dets(detections, cls):
    dets = [(i, d) for i, d in enumerate(detections) if d.cls == cls]
    dets.sort(key=lambda t: (-t[1].score, t[0]))
    return [d for _, d in dets]


def class_ap(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    cls: int,
    iou_threshold: float = MATCH_IOU,
    ignore: np.ndarray | None = None,
    interpolation: str = "all_points",
) -> float | None:
    """AP of one class; ``None`` when the class has no (non-ignored) ground truth."""
    gt_idx = [j for j, g in enumerate(ground_truths) if g.cls == cls]
    gts = [ground_truths[j] for j in gt_idx]
    ign = np.zeros(len(gts), dtype=bool) if ignore is None else np.asarray(ignore)[gt_idx]
    npos = int((~ign).sum())
    if npos == 0:
        return None
    dets = _sorted_class_dets(detections, cls)
    if not dets:
        return 0.0
    outcome = match_detections(dets, gts, ign, iou_threshold)
    counted = outcome >= 0
    tp = np.cumsum(outcome[counted] == 1)
    fp = np.cumsum(outcome[counted] == 0)
    if len(tp) == 0:
        return 0.0
    recall = tp / npos
    precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
    return average_precision(recall, precision, interpolation)


def pascal_ap(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    iou_threshold: float = MATCH_IOU,
    max_dets: int = MAX_DETECTIONS,
    num_classes: int | None = None,
    interpolation: str = "all_points",
    ignore: np.ndarray | None = None,
) -> EvalReport:
    """Per-class and mean AP.

    Detections are capped to ``max_dets`` per image, then, per class, matched in
    descending score order to the unmatched ground truth of highest IoU at or
    above ``iou_threshold``.  Classes without ground truth are excluded from
    the mean and listed in ``diagnostics``.
    """
    dets = cap_per_image(list(detections), max_dets)
    classes = set(range(1, num_classes + 1)) if num_classes else {g.cls for g in ground_truths} | {d.cls for d in dets}
    per_class: dict[int, float | None] = {}
    diagnostics = []
    for c in sorted(classes):
        per_class[c] = class_ap(dets, ground_truths, c, iou_threshold, ignore, interpolation)
        if per_class[c] is None:
            diagnostics.append(f"class {c}: no ground truth, excluded from the mean")
    valid = [v for v in per_class.values() if v is not None]
    mean = float(np.mean(valid)) if valid else 0.0
    report = EvalReport(per_class, mean, diagnostics=diagnostics)
    report.gt_counts = {"all": len(ground_truths), **{f"class_{c}": sum(g.cls == c for g in ground_truths) for c in classes}}
    report.det_counts = {"all": len(dets), **{f"class_{c}": sum(d.cls == c for d in dets) for c in classes}}
    return report


def ap_by_size(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    iou_threshold: float = MATCH_IOU,
    max_dets: int = MAX_DETECTIONS,
    num_classes: int | None = None,
    interpolation: str = "all_points",
) -> dict[str, EvalReport | None]:
    """AP restricted to small, medium and large ground truths.

    Ground truths outside the bucket are ignored: they cannot be matched for
    credit and a detection overlapping one of them is dropped rather than
    counted as a false positive.  An empty bucket maps to ``None``.
    """
    if ground_truths:
        buckets = area_buckets([g.box for g in ground_truths])
    else:
        buckets = np.array([], dtype=str)
    out: dict[str, EvalReport | None] = {}
    for b in "SML":
        inside = buckets == b
        if not inside.any():
            out[b] = None
            continue
        out[b] = pascal_ap(detections, ground_truths, iou_threshold, max_dets, num_classes, interpolation, ignore=~inside)
    return out


def evaluate_detections(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    iou_threshold: float = MATCH_IOU,
    max_dets: int = MAX_DETECTIONS,
    num_classes: int | None = None,
    interpolation: str = "all_points",
) -> EvalReport:
    """Full report: per-class and mean AP plus AP_S / AP_M / AP_L."""
    report = pascal_ap(detections, ground_truths, iou_threshold, max_dets, num_classes, interpolation)
    sized = ap_by_size(detections, ground_truths, iou_threshold, max_dets, num_classes, interpolation)
    report.ap_small = None if sized["S"] is None else sized["S"].mean_ap
    report.ap_medium = None if sized["M"] is None else sized["M"].mean_ap
    report.ap_large = None if sized["L"] is None else sized["L"].mean_ap
    report.per_class_bucket_ap = {b: (r.per_class_ap if r is not None else {}) for b, r in sized.items()}
    if ground_truths:
        buckets = area_buckets([g.box for g in ground_truths])
        for b in "SML":
            report.gt_counts[f"bucket_{b}"] = int((buckets == b).sum())
    capped = cap_per_image(list(detections), max_dets)
    if capped:
        dbuckets = area_buckets([d.box for d in capped])
        for b in "SML":
            report.det_counts[f"bucket_{b}"] = int((dbuckets == b).sum())
    return report


# offset statistics ----------------------------------------------------------------


@dataclass
class DeltaStats:
    """Offset components of foreground proposals before and after the first step."""

    before: np.ndarray  # (M, 2) dx, dy against the proposals
    after: np.ndarray  # (M, 2) dx, dy against the intermediate boxes
    bin_width: float = 0.5

    def summary(self) -> dict[tuple[str, str], tuple[float, float]]:
        out = {}
        for phase, arr in (("before", self.before), ("after", self.after)):
            for k, comp in enumerate(("dx", "dy")):
                col = arr[:, k] if len(arr) else np.zeros(0)
                out[(comp, phase)] = (float(col.mean()) if len(col) else 0.0, float(col.std()) if len(col) else 0.0)
        return out

    def histogram(self, component: str, phase: str):
        arr = self.before if phase == "before" else self.after
        col = arr[:, ("dx", "dy").index(component)]
        both = np.concatenate([self.before.ravel(), self.after.ravel()])
        limit = max(np.ceil(np.abs(both).max() / self.bin_width), 1) * self.bin_width if len(both) else self.bin_width
        edges = np.arange(-limit, limit + self.bin_width / 2, self.bin_width)
        counts, edges = np.histogram(col, bins=edges)
        return counts, edges

    def to_csv(self) -> str:
        """Columns: component, phase, mean, std, bin_lo, bin_hi, count (one row per bin)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["component", "phase", "mean", "std", "bin_lo", "bin_hi", "count"])
        summary = self.summary()
        for comp in ("dx", "dy"):
            for phase in ("before", "after"):
                mean, std = summary[(comp, phase)]
                counts, edges = self.histogram(comp, phase)
                for lo, hi, n in zip(edges[:-1], edges[1:], counts):
                    writer.writerow([comp, phase, f"{mean:.6f}", f"{std:.6f}", f"{lo:.3f}", f"{hi:.3f}", int(n)])
        return buf.getvalue()


def delta_statistics(model, scenes, proposal_fn, threshold: float = 0.5, bin_width: float = 0.5) -> DeltaStats:
    """Collect offset components over foreground proposals of ``scenes``.

    ``proposal_fn(scene, index)`` supplies the ``(N, 4)`` proposals of a scene.
    The model must expose intermediate boxes, i.e. be a sequential head.
    """
    if not model.architecture.is_sequential:
        raise InvalidInputError(f"{model.architecture.value} has no intermediate boxes; use a sequential head")
    from .proposals import assign_targets

    before, after = [], []
    for i, scene in enumerate(scenes):
        if len(scene.boxes) == 0:
            continue
        proposals = proposal_fn(scene, i)
        batch = assign_targets(proposals, scene.boxes, threshold)
        fg = batch.is_foreground
        if not fg.any():
            continue
        with no_grad():
            out = model(scene.feature_map, proposals[fg])
        stage = out.stages[0] if out.stages else out
        gt = scene.boxes[batch.matched_gt_index[fg]]
        before.append(encode_delta(proposals[fg], gt)[:, :2])
        after.append(encode_delta(stage.intermediate_boxes, gt)[:, :2])
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros((0, 2))  # noqa: E731
    return DeltaStats(cat(before), cat(after), bin_width)
