"""Region-proposal stand-in: jittered and random proposals, matching, sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import pairwise_iou, validate_boxes
from .errors import InvalidInputError


@dataclass(frozen=True)
class JitterParams:
    center_noise: float = 0.25  # std of the center shift, as a fraction of gt size
    scale_noise: float = 0.35  # std of the log size ratio
    proposals_per_gt: int = 8
    background_count: int = 12
    background_size: tuple[float, float] = (8.0, 160.0)

    def __post_init__(self):
        if self.center_noise < 0 or self.scale_noise < 0:
            raise InvalidInputError("noise levels must be non-negative")
        if self.proposals_per_gt < 0 or self.background_count < 0:
            raise InvalidInputError("proposal counts must be non-negative")


@dataclass
class ProposalBatch:
    proposals: np.ndarray  # (N, 4)
    matched_gt_index: np.ndarray  # (N,), -1 where no ground truth overlaps
    is_foreground: np.ndarray  # (N,) bool
    max_iou: np.ndarray  # (N,)
    diagnostics: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.proposals)

    @property
    def num_foreground(self) -> int:
        return int(self.is_foreground.sum())

    def subset(self, index) -> "ProposalBatch":
        return ProposalBatch(
            self.proposals[index],
            self.matched_gt_index[index],
            self.is_foreground[index],
            self.max_iou[index],
            list(self.diagnostics),
        )


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def assign_targets(proposals, ground_truths, threshold: float = 0.5) -> ProposalBatch:
    """Match every proposal to its highest-IoU ground truth.

    Foreground iff that IoU is at least ``threshold``; ties go to the lower
    ground-truth index.
    """
    if not 0.0 < threshold < 1.0:
        raise InvalidInputError(f"threshold must lie in (0, 1), got {threshold}")
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(ground_truths, dtype=np.float64).reshape(-1, 4)
    n = len(proposals)
    if len(gts) == 0 or n == 0:
        return ProposalBatch(proposals, np.full(n, -1), np.zeros(n, dtype=bool), np.zeros(n))
    overlaps = pairwise_iou(proposals, gts)
    best = np.argmax(overlaps, axis=1)  # first maximum wins
    best_iou = overlaps[np.arange(n), best]
    matched = np.where(best_iou > 0, best, -1)
    return ProposalBatch(proposals, matched, best_iou >= threshold, best_iou)


def jitter_proposals(ground_truths, params: JitterParams, seed, image_size=(256, 256), threshold: float = 0.5) -> ProposalBatch:
    """Gaussian-jittered copies of each ground truth plus uniform background boxes.

    Jittered proposals come first, grouped by ground truth, followed by the
    background boxes.  The same seed always yields the same batch.
    """
    rng = _rng(seed)
    gts = np.asarray(ground_truths, dtype=np.float64).reshape(-1, 4)
    if len(gts):
        validate_boxes(gts)
    k = params.proposals_per_gt
    base = np.repeat(gts, k, axis=0)
    noise = rng.standard_normal((len(base), 4))
    jittered = base.copy()
    jittered[:, 0] += noise[:, 0] * params.center_noise * base[:, 2]
    jittered[:, 1] += noise[:, 1] * params.center_noise * base[:, 3]
    jittered[:, 2] *= np.exp(noise[:, 2] * params.scale_noise)
    jittered[:, 3] *= np.exp(noise[:, 3] * params.scale_noise)

    width, height = image_size
    lo, hi = np.log(params.background_size[0]), np.log(params.background_size[1])
    m = params.background_count
    sizes = np.exp(rng.uniform(lo, hi, size=(m, 2)))
    centers = rng.uniform(0, 1, size=(m, 2)) * np.array([width, height])
    background = np.column_stack([centers, sizes])

    batch = assign_targets(np.concatenate([jittered, background]), gts, threshold)
    if len(gts) == 0:
        batch.diagnostics.append("no ground truths: background-only batch")
    return batch


def sample_minibatch(batch: ProposalBatch, size: int, ratio: float = 3, seed=None) -> ProposalBatch:
    """Sample up to ``size`` proposals with at most ``size / (1 + ratio)`` foreground.

    When one pool runs short the other fills the remainder.  The sample keeps the
    original proposal order.
    """
    if len(batch) == 0:
        raise InvalidInputError("cannot sample from an empty proposal batch")
    if size < 4:
        raise InvalidInputError(f"minibatch size must be at least 4, got {size}")
    rng = _rng(seed)
    fg = np.flatnonzero(batch.is_foreground)
    bg = np.flatnonzero(~batch.is_foreground)
    n_fg = min(len(fg), int(size // (1 + ratio)))
    n_bg = min(len(bg), size - n_fg)
    n_fg = min(len(fg), size - n_bg)
    chosen = np.concatenate([rng.permutation(fg)[:n_fg], rng.permutation(bg)[:n_bg]])
    out = batch.subset(np.sort(chosen))
    if n_fg == 0:
        out.diagnostics.append("no foreground proposals: all-background minibatch")
    return out
