"""Training loop, inference pipeline and run records."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import OptimizerState, collect_grads, no_grad, sgd_step, softmax, zero_grads
from .boxes import clip_boxes, nms
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .errors import CheckpointMismatchError, DSDHError, InvalidInputError, NonFiniteLossError
from .heads import DetectionHead, Targets, compute_loss
from .metrics import Detection, EvalReport, GroundTruth, evaluate_detections
from .proposals import JitterParams, jitter_proposals, sample_minibatch
from .scenes import Dataset, Scene, generate_dataset, horizontal_flip, read_dataset

log = logging.getLogger(__name__)


class ReplayMismatchError(DSDHError):
    """Re-running a recorded configuration did not reproduce its results."""


# data --------------------------------------------------------------------------------


@dataclass
class LoadedData:
    train: list[Scene]
    test: list[Scene]
    num_classes: int
    channels: int
    config: dict = field(default_factory=dict)


def load_data(config: ExperimentConfig, dataset: Dataset | None = None) -> LoadedData:
    """Resolve the scenes a config refers to: a container path or a synthetic family."""
    if dataset is None:
        if config.data.path:
            dataset = read_dataset(config.data.path)
        elif config.data.synth is not None:
            dataset = Dataset(generate_dataset(config.data.synth), config.data.synth.to_dict())
        else:
            raise DSDHError("config.data needs either a path or a synth section")
    scenes = dataset.scenes
    if not scenes:
        raise DSDHError("the dataset is empty")
    num_classes = dataset.config.get("num_classes") or int(max((s.classes.max() for s in scenes if len(s.classes)), default=1))
    return LoadedData(dataset.split("train"), dataset.split("test"), int(num_classes), scenes[0].feature_map.channels, dataset.config)


def scene_targets(scene: Scene, batch) -> Targets:
    idx = np.maximum(batch.matched_gt_index, 0)
    if len(scene.boxes):
        labels = np.where(batch.is_foreground, scene.classes[idx], 0)
        matched = scene.boxes[idx]
    else:
        labels = np.zeros(len(batch), dtype=np.int64)
        matched = batch.proposals.copy()
    return Targets(labels.astype(np.int64), matched, scene.boxes, scene.classes)


def eval_proposals(scene: Scene, index: int, jitter: JitterParams, seed: int) -> np.ndarray:
    """Deterministic proposals for scene ``index`` of an evaluation set."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index, 0xE7A1]))
    return jitter_proposals(scene.boxes, jitter, rng, scene.image_size).proposals


# records ----------------------------------------------------------------------------


def config_checksum(config: ExperimentConfig) -> str:
    payload = json.dumps({"config": config.to_dict(), "seed": config.seed, "code_version": __version__}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def params_checksum(head: DetectionHead) -> str:
    h = hashlib.sha256()
    for name, p in head.parameters().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


@dataclass
class RunRecord:
    config: dict
    seed: int
    epochs: list[dict]
    report: dict | None
    wall_time: float
    checksums: dict
    code_version: str = __version__

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "config": self.config,
            "seed": self.seed,
            "epochs": self.epochs,
            "report": self.report,
            "checksums": self.checksums,
            "code_version": self.code_version,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        d = json.loads(Path(path).read_text())
        return cls(d["config"], d["seed"], d["epochs"], d["report"], d.get("wall_time", 0.0), d["checksums"], d["code_version"])

    def verify(self) -> None:
        """Raise if the stored run checksum does not match config, seed and code version."""
        config = ExperimentConfig.from_dict(self.config)
        if config.seed != self.seed or self.code_version != __version__:
            raise ReplayMismatchError("record seed or code version differs from this build")
        if config_checksum(config) != self.checksums.get("run"):
            raise ReplayMismatchError("run checksum does not match the recorded config")


@dataclass
class TrainResult:
    record: RunRecord
    head: DetectionHead
    report: EvalReport | None


# inference ---------------------------------------------------------------------------


def detect(head, scene: Scene, proposals: np.ndarray, config: ExperimentConfig) -> list[Detection]:
    """Score filter, per-class NMS and the per-image cap, in that order."""
    ev = config.eval
    if len(proposals) == 0:
        return []
    with no_grad():
        out = head(scene.feature_map, proposals)
    probs = softmax(out.class_logits.data.astype(np.float64))
    boxes = out.refined_boxes
    if ev.clip_to_image:
        boxes = clip_boxes(boxes, *scene.image_size)
    rows, cols = np.nonzero(probs[:, 1:] > ev.score_threshold)
    classes = cols + 1
    scores = probs[rows, classes]
    keep = nms(boxes[rows], classes, scores, ev.nms_iou)[: ev.max_dets]
    return [Detection(scene.id, tuple(boxes[rows[k]].tolist()), int(classes[k]), float(scores[k])) for k in keep]


def ground_truths(scenes) -> list[GroundTruth]:
    return [GroundTruth(s.id, tuple(b), int(c)) for s in scenes for b, c in zip(s.boxes.tolist(), s.classes.tolist())]


def evaluate_head(head, scenes, config: ExperimentConfig, num_classes: int | None = None) -> EvalReport:
    """Run the full inference pipeline over ``scenes`` and score it."""
    ev = config.eval
    jitter = config.proposal.jitter()

    def run(item):
        i, scene = item
        return detect(head, scene, eval_proposals(scene, i, jitter, ev.proposal_seed), config)

    if ev.workers > 1:
        # scenes are independent; map() keeps input order so the reduction is deterministic
        with ThreadPoolExecutor(ev.workers) as pool:
            per_scene = list(pool.map(run, enumerate(scenes)))
    else:
        per_scene = [run(item) for item in enumerate(scenes)]
    detections = [d for dets in per_scene for d in dets]
    return evaluate_detections(detections, ground_truths(scenes), ev.match_iou, ev.max_dets, num_classes, ev.interpolation)


# training ------------------------------------------------------------------------------


def _checkpoint_extra(config: ExperimentConfig, data: LoadedData) -> dict:
    return {"experiment": config.to_dict(), "num_classes": data.num_classes, "in_channels": data.channels}


def _abort(out_dir, last_good, extra, message):
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.npz", last_good, extra)
    raise NonFiniteLossError(message)


def train(config: ExperimentConfig, out_dir=None, dataset: Dataset | None = None, evaluate: bool = True) -> TrainResult:
    """Train a head from scratch and, unless disabled, evaluate it on the test split.

    With ``out_dir`` the checkpoint, run record and evaluation CSV are written
    there.  A non-finite loss aborts the run after saving the parameters of the
    last completed epoch.
    """
    start = time.perf_counter()
    data = load_data(config, dataset)
    head = DetectionHead(config.head_config(data.num_classes), data.channels, seed=config.seed)
    params = head.parameters()
    state = OptimizerState(config.optimizer.learning_rate, config.optimizer.momentum)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7EA1]))
    jitter = config.proposal.jitter()
    out_dir = Path(out_dir) if out_dir is not None else None
    extra = _checkpoint_extra(config, data)
    last_good = head.state_dict()
    history = []
    for epoch in range(1, config.optimizer.epochs + 1):
        sums = np.zeros(4)
        steps = 0
        for idx in rng.permutation(len(data.train)):
            scene = data.train[idx]
            if config.horizontal_flip and rng.random() < 0.5:
                scene = horizontal_flip(scene)
            batch = jitter_proposals(scene.boxes, jitter, rng, scene.image_size, config.proposal.fg_iou)
            batch = sample_minibatch(batch, config.proposal.minibatch_size, config.proposal.bg_fg_ratio, rng)
            targets = scene_targets(scene, batch)
            zero_grads(params)
            try:
                out = head(scene.feature_map, batch.proposals, labels=targets.labels)
            except InvalidInputError as exc:
                # proposals are valid here, so a rejected intermediate box means the weights blew up
                _abort(out_dir, last_good, extra, f"forward pass failed in epoch {epoch} on scene {scene.id}: {exc}")
            terms = compute_loss(out, targets, config.loss, head.config.scale, head.config.cascade_thresholds)
            total = terms.total.item()
            if not math.isfinite(total):
                _abort(out_dir, last_good, extra, f"loss became {total} in epoch {epoch} on scene {scene.id}")
            terms.total.backward()
            sgd_step(params, collect_grads(params), state)
            sums += [total, terms.cls.item(), terms.offset.item(), terms.scaling.item()]
            steps += 1
        mean = sums / max(steps, 1)
        history.append({"epoch": epoch, "total": float(mean[0]), "cls": float(mean[1]), "offset": float(mean[2]), "scaling": float(mean[3])})
        log.info("epoch %d: total %.4f cls %.4f off %.4f sca %.4f", epoch, *mean)
        last_good = head.state_dict()

    report = evaluate_head(head, data.test, config, data.num_classes) if evaluate and data.test else None
    record = RunRecord(
        config=config.to_dict(),
        seed=config.seed,
        epochs=history,
        report=report.to_dict() if report else None,
        wall_time=time.perf_counter() - start,
        checksums={"run": config_checksum(config), "parameters": params_checksum(head)},
    )
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.npz", head.state_dict(), extra)
        record.save(out_dir / "run_record.json")
        if report is not None:
            (out_dir / "report.csv").write_text(report.to_csv())
    return TrainResult(record, head, report)


def replay(record: RunRecord, dataset: Dataset | None = None) -> TrainResult:
    """Re-run a record's config and fail loudly if anything differs."""
    record.verify()
    result = train(ExperimentConfig.from_dict(record.config), dataset=dataset)
    if result.record.to_dict(include_timing=False) != record.to_dict(include_timing=False):
        raise ReplayMismatchError("replayed run differs from the record")
    return result


def load_head(checkpoint) -> tuple[DetectionHead, ExperimentConfig, dict]:
    params, extra = load_checkpoint(checkpoint)
    if "experiment" not in extra:
        raise CheckpointMismatchError(f"{checkpoint}: checkpoint carries no experiment config")
    config = ExperimentConfig.from_dict(extra["experiment"])
    head = DetectionHead(config.head_config(extra["num_classes"]), extra["in_channels"], seed=config.seed)
    head.load_state_dict(params)
    return head, config, extra


def evaluate(checkpoint, dataset, config: ExperimentConfig | None = None, split: str = "test") -> EvalReport:
    """Evaluate a saved head on a dataset container (or an in-memory :class:`Dataset`).

    ``config``, when given, overrides the evaluation settings and must name the
    same architecture as the checkpoint.
    """
    head, saved, extra = load_head(checkpoint)
    if config is not None and config.architecture != saved.architecture:
        raise CheckpointMismatchError(
            f"checkpoint holds a {saved.architecture.value} head, config asks for {config.architecture.value}"
        )
    ds = dataset if isinstance(dataset, Dataset) else read_dataset(dataset)
    scenes = ds.split(split) or ds.scenes
    if scenes and scenes[0].feature_map.channels != extra["in_channels"]:
        raise CheckpointMismatchError(
            f"dataset has {scenes[0].feature_map.channels} channels, checkpoint expects {extra['in_channels']}"
        )
    return evaluate_head(head, scenes, config or saved, extra["num_classes"])
