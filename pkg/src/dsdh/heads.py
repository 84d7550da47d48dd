"""Second-stage detection heads and their multi-task loss.

Every architecture is described by a :class:`Pipeline`: the branch that feeds
the classifier, and an ordered list of refinement steps.  All parts of one step
read features pooled at the same boxes and their delta components are applied
together; a later step re-pools at the boxes produced by the earlier one.  This
covers the parallel heads (one step) and the sequential heads (two steps) with
the same code.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple

import numpy as np

from .autodiff import (
    DenseLayer,
    Tensor,
    concat,
    im2col3x3,
    relu,
    smooth_l1,
    softmax_cross_entropy,
)
from .boxes import DEFAULT_SCALE, SCALE_CLAMP, DeltaScale, encode_delta
from .errors import InvalidInputError
from .roi import FeatureMap, roi_align


class HeadArchitecture(str, Enum):
    SINGLE = "SingleHead"
    DOUBLE = "DoubleHead"
    DECOUPLED_OS = "DecoupledOS"
    DECOUPLED_HV = "DecoupledHV"
    FULLY_DECOUPLED = "FullyDecoupled"
    SEQUENTIAL_OS = "SequentialOS"
    SEQUENTIAL_SO = "SequentialSO"
    SEQUENTIAL_HV = "SequentialHV"
    SEQUENTIAL_VH = "SequentialVH"
    DSDH = "DSDH"
    DSDH_CASCADE = "DSDHCascade"

    @property
    def is_sequential(self) -> bool:
        return len(PIPELINES[self].steps) > 1 or self is HeadArchitecture.DSDH_CASCADE


@dataclass(frozen=True)
class BranchSpec:
    num_conv: int = 0
    num_fc: int = 2
    conv_width: int = 256
    fc_width: int = 1024

    def __post_init__(self):
        if self.num_conv < 0 or self.num_fc < 1 or self.conv_width < 1 or self.fc_width < 1:
            raise InvalidInputError(f"invalid branch spec {self}")

    @property
    def label(self) -> str:
        return f"Conv-{self.num_conv} FC-{self.num_fc}"


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InvalidInputError(f"loss weights must be non-negative, got {self}")


class Part(NamedTuple):
    components: tuple[int, ...]  # indices into (dx, dy, dw, dh)
    branch: str


class Pipeline(NamedTuple):
    cls_branch: str
    steps: tuple[tuple[Part, ...], ...]


_ALL = (0, 1, 2, 3)
_O, _S, _H, _V = (0, 1), (2, 3), (0, 2), (1, 3)


def _sequential(first, second) -> Pipeline:
    return Pipeline("shared", ((Part(first, "shared"),), (Part(second, "shared"),)))


PIPELINES: dict[HeadArchitecture, Pipeline] = {
    HeadArchitecture.SINGLE: Pipeline("shared", ((Part(_ALL, "shared"),),)),
    HeadArchitecture.DOUBLE: Pipeline("cls", ((Part(_ALL, "reg"),),)),
    HeadArchitecture.DECOUPLED_OS: Pipeline("cls", ((Part(_O, "offset"), Part(_S, "scaling")),)),
    HeadArchitecture.DECOUPLED_HV: Pipeline("cls", ((Part(_H, "horizontal"), Part(_V, "vertical")),)),
    HeadArchitecture.FULLY_DECOUPLED: Pipeline(
        "cls", ((Part((0,), "dx"), Part((1,), "dy"), Part((2,), "dw"), Part((3,), "dh")),)
    ),
    HeadArchitecture.SEQUENTIAL_OS: _sequential(_O, _S),
    HeadArchitecture.SEQUENTIAL_SO: _sequential(_S, _O),
    HeadArchitecture.SEQUENTIAL_HV: _sequential(_H, _V),
    HeadArchitecture.SEQUENTIAL_VH: _sequential(_V, _H),
    HeadArchitecture.DSDH: Pipeline("cls", ((Part(_O, "offset"),), (Part(_S, "scaling"),))),
}
PIPELINES[HeadArchitecture.DSDH_CASCADE] = PIPELINES[HeadArchitecture.DSDH]


@dataclass(frozen=True)
class HeadConfig:
    architecture: HeadArchitecture = HeadArchitecture.DSDH
    branch: BranchSpec = field(default_factory=BranchSpec)
    num_classes: int = 10
    output_size: int = 7
    samples_per_bin: int = 2
    scale: DeltaScale = DEFAULT_SCALE
    through_box_gradients: bool = False
    class_specific: bool = False
    cascade_stages: int = 2
    cascade_thresholds: tuple[float, ...] = (0.5, 0.6)
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "architecture", HeadArchitecture(self.architecture))
        if self.num_classes < 1:
            raise InvalidInputError("num_classes must be positive")
        if self.architecture is HeadArchitecture.DSDH_CASCADE:
            if self.cascade_stages < 1 or len(self.cascade_thresholds) < self.cascade_stages:
                raise InvalidInputError("cascade needs one IoU threshold per stage")


class Branch:
    """Optional 3x3 convolutions followed by ReLU fully connected layers."""

    def __init__(self, spec: BranchSpec, in_shape: tuple[int, int, int], rng: np.random.Generator, dtype):
        p, _, c = in_shape
        self.convs = []
        for _ in range(spec.num_conv):
            self.convs.append(DenseLayer.initialize(9 * c, spec.conv_width, rng, dtype))
            c = spec.conv_width
        width = p * p * c
        self.fcs = []
        for _ in range(spec.num_fc):
            self.fcs.append(DenseLayer.initialize(width, spec.fc_width, rng, dtype))
            width = spec.fc_width
        self.out_width = width

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.convs):
            params.update(layer.parameters(f"{prefix}conv{i}."))
        for i, layer in enumerate(self.fcs):
            params.update(layer.parameters(f"{prefix}fc{i}."))
        return params

    def __call__(self, pooled: Tensor) -> Tensor:
        x = pooled
        n, p = x.shape[0], x.shape[1]
        for layer in self.convs:
            cols = im2col3x3(x)
            x = relu(layer(cols.reshape(n * p * p, cols.shape[-1]))).reshape(n, p, p, layer.out_width)
        x = x.reshape(n, -1)
        for layer in self.fcs:
            x = relu(layer(x))
        return x


@dataclass
class HeadOutput:
    """Everything a head produces for ``N`` proposals.

    ``bases[c]`` holds, per proposal, the box that delta component ``c`` was
    applied to; regression targets are encoded against it.
    """

    class_logits: Tensor  # (N, K+1)
    offset: Tensor  # (N, 2)
    scaling: Tensor  # (N, 2)
    refined_boxes: np.ndarray  # (N, 4)
    intermediate_boxes: np.ndarray | None
    proposals: np.ndarray
    bases: np.ndarray  # (4, N, 4)
    stages: list["HeadOutput"] = field(default_factory=list)

    @property
    def delta(self) -> Tensor:
        """Predicted components reassembled in ``(dx, dy, dw, dh)`` order."""
        return concat([self.offset, self.scaling], axis=1)


def _decode_components(base, values: dict[int, Tensor], scale: DeltaScale, differentiable: bool):
    """Apply delta components to ``base``; returns an ndarray or, if asked, a Tensor."""
    lam = np.asarray(scale)
    base_data = base.data if isinstance(base, Tensor) else base
    if not differentiable:
        out = base_data.copy()
        for c, v in values.items():
            col = v.data[:, 0].astype(np.float64)
            if c < 2:
                out[:, c] = base_data[:, c] + col * base_data[:, c + 2] / lam[c]
            else:
                out[:, c] = base_data[:, c] * np.exp(np.minimum(col / lam[c], SCALE_CLAMP))
        return out
    columns = []
    for c in range(4):
        col = base[:, c : c + 1] if isinstance(base, Tensor) else Tensor(base_data[:, c : c + 1])
        if c in values:
            if c < 2:
                size = base[:, c + 2 : c + 3] if isinstance(base, Tensor) else base_data[:, c + 2 : c + 3]
                col = col + values[c] * size * (1.0 / lam[c])
            else:
                col = col * (values[c] * (1.0 / lam[c])).clamp_max(SCALE_CLAMP).exp()
        columns.append(col)
    return concat(columns, axis=1)


class DetectionHead:
    """A trainable head for one :class:`HeadArchitecture`."""

    def __init__(self, config: HeadConfig, in_channels: int, seed: int = 0, _rng=None):
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed) if _rng is None else _rng
        if config.architecture is HeadArchitecture.DSDH_CASCADE:
            stage_config = replace(config, architecture=HeadArchitecture.DSDH)
            self.stages = [DetectionHead(stage_config, in_channels, _rng=rng) for _ in range(config.cascade_stages)]
            return
        self.stages = []
        self.pipeline = PIPELINES[config.architecture]
        k1 = config.num_classes + 1
        per_class = k1 if config.class_specific else 1
        in_shape = (config.output_size, config.output_size, in_channels)
        self.branches: dict[str, Branch] = {}
        self.projections: dict[str, DenseLayer] = {}
        names = [self.pipeline.cls_branch] + [part.branch for step in self.pipeline.steps for part in step]
        for name in dict.fromkeys(names):
            self.branches[name] = Branch(config.branch, in_shape, rng, dtype)
        width = config.branch.fc_width
        self.projections[f"{self.pipeline.cls_branch}.cls"] = DenseLayer.initialize(width, k1, rng, dtype)
        for step in self.pipeline.steps:
            for part in step:
                self.projections[self._proj_key(part)] = DenseLayer.initialize(
                    width, len(part.components) * per_class, rng, dtype
                )

    @staticmethod
    def _proj_key(part: Part) -> str:
        return f"{part.branch}.reg" + "".join("xywh"[c] for c in part.components)

    @property
    def architecture(self) -> HeadArchitecture:
        return self.config.architecture

    def parameters(self) -> dict[str, Tensor]:
        if self.stages:
            params = {}
            for i, stage in enumerate(self.stages):
                params.update({f"stage{i}.{k}": v for k, v in stage.parameters().items()})
            return params
        params = {}
        for name, branch in self.branches.items():
            params.update(branch.parameters(f"{name}."))
        for name, layer in self.projections.items():
            params.update(layer.parameters(f"{name}."))
        return params

    def branch_parameters(self, branch: str) -> dict[str, Tensor]:
        """Parameters owned by one named branch, its projections included."""
        return {k: v for k, v in self.parameters().items() if k.split(".")[0] == branch}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def zero_regression(self) -> None:
        """Zero every regression projection so all deltas vanish."""
        heads = self.stages or [self]
        for head in heads:
            for key, layer in head.projections.items():
                if not key.endswith(".cls"):
                    layer.weight.data[...] = 0
                    layer.bias.data[...] = 0

    def __call__(self, feature_map, proposals, labels=None, geometry: dict | None = None) -> HeadOutput:
        return self.forward(feature_map, proposals, labels, geometry)

    def forward(self, feature_map, proposals, labels=None, geometry: dict | None = None) -> HeadOutput:
        """Run the head on ``(N, 4)`` proposals.

        Args:
            feature_map: :class:`FeatureMap` the proposals live on.
            proposals: center-form boxes in image pixels.
            labels: per-proposal class labels; only used to pick class-specific
                regressors when that option is on.
            geometry: optional dict through which detached intermediate boxes
                (and the boxes regression targets are encoded against) are
                recorded on first use and replayed afterwards.  Gradient checks
                use it to hold stop-gradient geometry fixed.
        """
        proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
        if np.any(proposals[:, 2:] <= 0) or not np.all(np.isfinite(proposals)):
            raise InvalidInputError("proposals must be finite with positive width and height")
        if not isinstance(feature_map, FeatureMap):
            raise InvalidInputError("feature_map must be a FeatureMap")
        if self.stages:
            return self._forward_cascade(feature_map, proposals, labels, geometry)
        return self._forward_pipeline(feature_map, proposals, labels, geometry, prefix="")

    def _pool(self, feature_map: FeatureMap, boxes) -> Tensor:
        cfg = self.config
        fmap = feature_map.values.astype(cfg.dtype, copy=False)
        return roi_align(fmap, boxes, cfg.output_size, cfg.samples_per_bin, stride=feature_map.stride)

    def _select(self, out: Tensor, n_comp: int, labels, logits: Tensor) -> Tensor:
        if not self.config.class_specific:
            return out
        n = out.shape[0]
        if labels is None:
            sel = np.argmax(logits.data[:, 1:], axis=1) + 1
        else:
            sel = np.asarray(labels)
        return out.reshape(n, self.config.num_classes + 1, n_comp)[np.arange(n), sel]

    def _forward_pipeline(self, feature_map, proposals, labels, geometry, prefix) -> HeadOutput:
        cfg = self.config
        n = len(proposals)
        boxes = proposals
        bases = np.empty((4, n, 4))
        components: dict[int, Tensor] = {}
        logits = None
        intermediate = None
        for s, step in enumerate(self.pipeline.steps):
            if s > 0:
                key = f"{prefix}step{s}.boxes"
                if isinstance(boxes, Tensor):
                    intermediate = boxes.data.copy()
                elif geometry is not None:
                    boxes = geometry.setdefault(key, boxes)
                    intermediate = boxes
                else:
                    intermediate = boxes
            pooled = self._pool(feature_map, boxes)
            trunk: dict[str, Tensor] = {}

            def features(name):
                if name not in trunk:
                    trunk[name] = self.branches[name](pooled)
                return trunk[name]

            if s == 0:
                logits = self.projections[f"{self.pipeline.cls_branch}.cls"](features(self.pipeline.cls_branch))
            values = {}
            for part in step:
                out = self.projections[self._proj_key(part)](features(part.branch))
                out = self._select(out, len(part.components), labels, logits)
                for k, c in enumerate(part.components):
                    values[c] = out[:, k : k + 1]
            base = boxes.data if isinstance(boxes, Tensor) else boxes
            if geometry is not None and s > 0:
                # targets are encoded against detached boxes; replay them so a
                # finite-difference check sees the same constants as backprop
                base = geometry.setdefault(f"{prefix}step{s}.base", base)
            for c in values:
                bases[c] = base
            components.update(values)
            last = s == len(self.pipeline.steps) - 1
            differentiable = cfg.through_box_gradients and not last
            boxes = _decode_components(boxes, values, cfg.scale, differentiable)
        refined = boxes.data if isinstance(boxes, Tensor) else boxes
        return HeadOutput(
            class_logits=logits,
            offset=concat([components[0], components[1]], axis=1),
            scaling=concat([components[2], components[3]], axis=1),
            refined_boxes=refined,
            intermediate_boxes=intermediate,
            proposals=proposals,
            bases=bases,
        )

    def _forward_cascade(self, feature_map, proposals, labels, geometry) -> HeadOutput:
        outputs = []
        boxes = proposals
        for i, stage in enumerate(self.stages):
            if i > 0:
                boxes = outputs[-1].refined_boxes
                if geometry is not None:
                    boxes = geometry.setdefault(f"cascade{i}.boxes", boxes)
            outputs.append(stage._forward_pipeline(feature_map, boxes, labels, geometry, prefix=f"stage{i}."))
        logits = outputs[0].class_logits
        for out in outputs[1:]:
            logits = logits + out.class_logits
        if len(outputs) > 1:
            logits = logits * (1.0 / len(outputs))
        last = outputs[-1]
        return HeadOutput(
            class_logits=logits,
            offset=last.offset,
            scaling=last.scaling,
            refined_boxes=last.refined_boxes,
            intermediate_boxes=last.intermediate_boxes,
            proposals=proposals,
            bases=last.bases,
            stages=outputs,
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from .errors import CheckpointMismatchError

        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))[:3]
            extra = sorted(set(state) - set(params))[:3]
            raise CheckpointMismatchError(f"parameter names differ (missing {missing}, unexpected {extra})")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise CheckpointMismatchError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)


# convenience entry points, one per pipeline family ----------------------------


def _check_arch(head: DetectionHead, allowed) -> None:
    if head.architecture not in allowed:
        raise InvalidInputError(f"{head.architecture.value} is not one of {[a.value for a in allowed]}")


def forward_single(head: DetectionHead, feature_map, proposals, **kw) -> HeadOutput:
    _check_arch(head, {HeadArchitecture.SINGLE})
    return head(feature_map, proposals, **kw)


def forward_double(head: DetectionHead, feature_map, proposals, **kw) -> HeadOutput:
    _check_arch(head, {HeadArchitecture.DOUBLE})
    return head(feature_map, proposals, **kw)


DECOUPLE_VARIANTS = {
    "OS": HeadArchitecture.DECOUPLED_OS,
    "HV": HeadArchitecture.DECOUPLED_HV,
    "Fully": HeadArchitecture.FULLY_DECOUPLED,
}
SEQUENCE_VARIANTS = {
    "OS": HeadArchitecture.SEQUENTIAL_OS,
    "SO": HeadArchitecture.SEQUENTIAL_SO,
    "HV": HeadArchitecture.SEQUENTIAL_HV,
    "VH": HeadArchitecture.SEQUENTIAL_VH,
}


def forward_decoupled(head: DetectionHead, feature_map, proposals, variant: str = "OS", **kw) -> HeadOutput:
    _check_arch(head, {DECOUPLE_VARIANTS[variant]})
    return head(feature_map, proposals, **kw)


def forward_sequential(head: DetectionHead, feature_map, proposals, variant: str = "OS", **kw) -> HeadOutput:
    _check_arch(head, {SEQUENCE_VARIANTS[variant]})
    return head(feature_map, proposals, **kw)


def forward_dsdh(head: DetectionHead, feature_map, proposals, **kw) -> HeadOutput:
    _check_arch(head, {HeadArchitecture.DSDH})
    return head(feature_map, proposals, **kw)


def forward_dsdh_cascade(head: DetectionHead, feature_map, proposals, **kw) -> HeadOutput:
    _check_arch(head, {HeadArchitecture.DSDH_CASCADE})
    return head(feature_map, proposals, **kw)


# loss -------------------------------------------------------------------------------


@dataclass
class Targets:
    """Per-proposal supervision for one image.

    ``gt_boxes``/``gt_classes`` are the full ground-truth set of the image; the
    cascade re-matches later stages against them.
    """

    labels: np.ndarray  # (N,) 0 = background
    matched_boxes: np.ndarray  # (N, 4); rows of background proposals are ignored
    gt_boxes: np.ndarray | None = None
    gt_classes: np.ndarray | None = None

    @property
    def foreground(self) -> np.ndarray:
        return self.labels > 0


class LossTerms(NamedTuple):
    total: Tensor
    cls: Tensor
    offset: Tensor
    scaling: Tensor
    no_foreground: bool


def match_targets(proposals, gt_boxes, gt_classes, threshold: float = 0.5) -> Targets:
    """Build :class:`Targets` by max-IoU matching of proposals to ground truths."""
    from .proposals import assign_targets

    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if len(gt_boxes) == 0:
        return Targets(np.zeros(len(proposals), dtype=np.int64), proposals.copy(), gt_boxes, gt_classes)
    batch = assign_targets(proposals, gt_boxes, threshold)
    idx = np.maximum(batch.matched_gt_index, 0)
    labels = np.where(batch.is_foreground, gt_classes[idx], 0)
    return Targets(labels, gt_boxes[idx], gt_boxes, gt_classes)


def regression_targets(output: HeadOutput, matched_boxes: np.ndarray, scale: DeltaScale = DEFAULT_SCALE) -> np.ndarray:
    """Encode each delta component against the box it was applied to."""
    out = np.empty((len(matched_boxes), 4))
    for c in range(4):
        out[:, c] = encode_delta(output.bases[c], matched_boxes, scale)[:, c]
    return out


def _single_loss(output: HeadOutput, targets: Targets, weights: LossWeights, scale: DeltaScale) -> LossTerms:
    cls_loss = softmax_cross_entropy(output.class_logits, targets.labels)
    fg = np.flatnonzero(targets.foreground)
    if len(fg) == 0:
        zero = Tensor(np.zeros((), dtype=cls_loss.data.dtype))
        off_loss, sca_loss = zero, zero
    else:
        sub = HeadOutput(
            output.class_logits, output.offset, output.scaling, output.refined_boxes,
            output.intermediate_boxes, output.proposals, output.bases[:, fg],
        )
        t = regression_targets(sub, targets.matched_boxes[fg], scale)
        off_loss = smooth_l1(output.offset[fg], t[:, :2].astype(output.offset.data.dtype))
        sca_loss = smooth_l1(output.scaling[fg], t[:, 2:].astype(output.scaling.data.dtype))
    total = cls_loss + off_loss * weights.alpha + sca_loss * weights.beta
    return LossTerms(total, cls_loss, off_loss, sca_loss, len(fg) == 0)


def compute_loss(
    output: HeadOutput,
    targets: Targets,
    weights: LossWeights = LossWeights(),
    scale: DeltaScale = DEFAULT_SCALE,
    cascade_thresholds: tuple[float, ...] = (0.5, 0.6),
) -> LossTerms:
    """``total = cls + alpha * offset + beta * scaling``.

    Regression terms cover foreground proposals only; with none present both are
    zero and ``no_foreground`` is set.  For a cascade, stage ``i > 0`` is
    re-matched against the image's ground truths at ``cascade_thresholds[i]``
    and the per-stage terms are summed.
    """
    if not output.stages:
        return _single_loss(output, targets, weights, scale)
    terms = []
    for i, stage in enumerate(output.stages):
        if i == 0:
            stage_targets = targets
        else:
            if targets.gt_boxes is None:
                raise InvalidInputError("cascade loss needs the image's ground truths")
            stage_targets = match_targets(stage.proposals, targets.gt_boxes, targets.gt_classes, cascade_thresholds[i])
        terms.append(_single_loss(stage, stage_targets, LossWeights(1.0, 1.0), scale))
    cls_loss, off_loss, sca_loss = terms[0].cls, terms[0].offset, terms[0].scaling
    for t in terms[1:]:
        cls_loss, off_loss, sca_loss = cls_loss + t.cls, off_loss + t.offset, sca_loss + t.scaling
    total = cls_loss + off_loss * weights.alpha + sca_loss * weights.beta
    return LossTerms(total, cls_loss, off_loss, sca_loss, all(t.no_foreground for t in terms))
