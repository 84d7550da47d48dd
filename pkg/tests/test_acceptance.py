"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The learnability, shrinkage and model-design criteria share one session-wide
cache of training runs on the canonical fixture (200 train / 50 test scenes,
seed 7), so the DSDH seed-7 run is trained once.  Expect this module to take
tens of minutes on one CPU core.
"""
import contextlib
import json
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

from dsdh.autodiff import gradient_check
from dsdh.boxes import (
    DEFAULT_SCALE,
    LARGE_MIN_AREA,
    SMALL_MAX_AREA,
    SizeBucket,
    area_bucket,
    decode_full,
    decode_offset,
    decode_scaling,
    encode_delta,
    nms,
)
from dsdh.cli import main as cli_main
from dsdh.config import EvalConfig, ExperimentConfig, OptimizerConfig
from dsdh.experiments import ablate, stats
from dsdh.heads import BranchSpec, HeadArchitecture, LossWeights, compute_loss, match_targets
from dsdh.metrics import MAX_DETECTIONS, NMS_IOU, SCORE_THRESHOLD, Detection, GroundTruth, evaluate_detections, pascal_ap
from dsdh.roi import FeatureMap, roi_align
from dsdh.scenes import Dataset, Scene, generate_dataset
from dsdh.training import detect, train

from . import oracles
from .conftest import TINY_SYNTH, tiny_config
from .test_heads import GRAD_GTS, GRAD_PROPOSALS, jitter_parameters, loss_fn, make_head

RESULTS: list[str] = []


@contextlib.contextmanager
def criterion(number, title):
    """Print and record one PASS/FAIL line; failures still propagate."""
    try:
        yield
    except BaseException as exc:
        line = f"FAIL criterion {number}: {title} ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
        RESULTS.append(line)
        print(line)
        raise
    line = f"PASS criterion {number}: {title}"
    RESULTS.append(line)
    print(line)


# shared fixture runs ----------------------------------------------------------------


@pytest.fixture(scope="session")
def fixture_data():
    config = ExperimentConfig()
    return Dataset(generate_dataset(config.data.synth), config.data.synth.to_dict())


@pytest.fixture(scope="session")
def run_cache():
    return {}


@pytest.fixture(scope="session")
def dsdh_run(fixture_data, run_cache, tmp_path_factory):
    """DSDH, 13 epochs, seed 7 on the canonical fixture."""
    config = ExperimentConfig()
    out = tmp_path_factory.mktemp("dsdh-seed7")
    start = time.perf_counter()
    result = train(config, out_dir=out, dataset=fixture_data)
    elapsed = time.perf_counter() - start
    run_cache[json.dumps(config.to_dict(), sort_keys=True)] = result.record
    return SimpleNamespace(result=result, out=out, elapsed=elapsed)


# 1-5: properties ------------------------------------------------------------------


def test_criterion_01_codec_round_trip():
    with criterion(1, "codec round trip within 1e-9 over 10^4 pairs; sequential decode equals full decode"):
        start = time.perf_counter()
        rng = np.random.default_rng(2024)
        n = 10_000
        p = np.column_stack([rng.uniform(-500, 500, (n, 2)), np.exp(rng.uniform(0, np.log(512), (n, 2)))])
        g = np.column_stack([rng.uniform(-500, 500, (n, 2)), np.exp(rng.uniform(0, np.log(512), (n, 2)))])
        d = encode_delta(p, g)
        back = decode_full(p, d)
        assert np.abs(back - g).max() <= 1e-9
        assert np.array_equal(decode_scaling(decode_offset(p, d[:, :2]), d[:, 2:]), decode_full(p, d))
        assert time.perf_counter() - start < 1.0


def test_criterion_02_delta_constants():
    with criterion(2, "delta scale (10, 10, 5, 5) and worked codec examples"):
        assert tuple(DEFAULT_SCALE) == (10.0, 10.0, 5.0, 5.0)
        assert encode_delta([10, 10, 20, 20], [10, 10, 20, 20]).tolist() == [0.0, 0.0, 0.0, 0.0]
        assert encode_delta([10, 10, 20, 20], [12, 11, 20, 20]).tolist() == [1.0, 0.5, 0.0, 0.0]
        assert encode_delta([0, 0, 10, 10], [0, 0, 20, 20]).tolist() == [0.0, 0.0, 5 * math.log(2), 5 * math.log(2)]
        assert decode_full([10, 10, 20, 20], [0, 0, 0, 0]).tolist() == [10.0, 10.0, 20.0, 20.0]
        assert decode_full([10, 10, 20, 20], [1.0, 0.5, 0, 0]).tolist() == [12.0, 11.0, 20.0, 20.0]
        assert decode_offset([10, 10, 20, 20], [1.0, 0.5]).tolist() == [12.0, 11.0, 20.0, 20.0]
        assert decode_scaling([12, 11, 10, 10], [0, 0]).tolist() == [12.0, 11.0, 10.0, 10.0]
        assert np.allclose(decode_scaling([12, 11, 10, 10], [5 * math.log(2)] * 2), [12, 11, 20, 20], rtol=0, atol=1e-12)


def test_criterion_03_gradient_checks():
    with criterion(3, "finite-difference checks of every head, max relative error < 1e-4"):
        start = time.perf_counter()
        worst = {}
        for arch in HeadArchitecture:
            rng = np.random.default_rng(7)
            fm = FeatureMap(rng.normal(size=(4, 4, 4)), stride=4)
            head = jitter_parameters(make_head(arch, BranchSpec(num_conv=0, num_fc=2, fc_width=4), seed=1), 1)
            targets = match_targets(GRAD_PROPOSALS, GRAD_GTS, np.array([1, 2]), 0.3)
            worst[arch.value] = gradient_check(head, (fm, GRAD_PROPOSALS, targets, {}), loss_fn).max_error
        print("max relative error per head:", {k: f"{v:.1e}" for k, v in worst.items()})
        assert max(worst.values()) < 1e-4, worst
        assert time.perf_counter() - start < 30.0


def test_criterion_04_oracle_equivalence():
    with criterion(4, "roi_align, nms and pascal_ap agree with brute-force oracles; hand AP = 0.5"):
        rng = np.random.default_rng(11)
        for _ in range(20):
            h, w, c = rng.integers(2, 7, 3)
            stride = float(rng.choice([1.0, 2.0, 4.0]))
            values = rng.normal(size=(h, w, c))
            boxes = np.column_stack([rng.uniform(-2, w * stride + 2, (4, 2)), rng.uniform(1, w * stride, (4, 2))])
            p, s = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            out = roi_align(FeatureMap(values, stride), boxes, p, s).data
            for k in range(4):
                ref = np.array(oracles.roi_align(values.tolist(), boxes[k].tolist(), stride, p, s))
                assert np.abs(out[k] - ref).max() <= 1e-6

        for _ in range(1000):
            n = int(rng.integers(0, 25))
            boxes = np.column_stack([rng.uniform(0, 60, (n, 2)), rng.uniform(4, 40, (n, 2))])
            classes = rng.integers(1, 4, n)
            scores = np.round(rng.uniform(0, 1, n), 1)
            assert nms(boxes, classes, scores, 0.5).tolist() == oracles.nms(boxes.tolist(), classes.tolist(), scores.tolist(), 0.5)

        for _ in range(500):
            n_gt = int(rng.integers(1, 9))
            gts = [(str(rng.integers(2)), tuple(rng.integers(0, 40, 2)) + tuple(rng.integers(2, 20, 2))) for _ in range(n_gt)]
            dets = []
            for _ in range(int(rng.integers(0, 20 - n_gt + 1))):
                img, (x, y, w, h) = gts[rng.integers(n_gt)]
                box = (x + int(rng.integers(-3, 4)), y + int(rng.integers(-3, 4)), w, h) if rng.random() < 0.6 else tuple(rng.integers(0, 40, 2)) + (w, h)
                dets.append((img, box, float(rng.choice([0.2, 0.4, 0.6, 0.8]))))
            got = pascal_ap([Detection(i, b, 1, s) for i, b, s in dets], [GroundTruth(i, b, 1) for i, b in gts]).mean_ap
            assert got == oracles.average_precision(dets, gts)

        hand = pascal_ap(
            [Detection("a", (150, 150, 20, 20), 1, 0.9), Detection("a", (50, 50, 20, 20), 1, 0.8)],
            [GroundTruth("a", (50, 50, 20, 20), 1)],
        )
        assert hand.mean_ap == 0.5


def test_criterion_05_loss_composition():
    with criterion(5, "total = cls + offset + scaling at defaults; alpha = 0 zeroes offset gradients"):
        fm = FeatureMap(np.random.default_rng(0).normal(size=(8, 8, 4)), stride=4)
        props = np.array([[12.0, 14.0, 10.0, 12.0], [20.0, 18.0, 14.0, 9.0], [9.0, 22.0, 6.0, 8.0]])
        gts = np.array([[13.0, 15.0, 12.0, 10.0], [21.0, 17.0, 12.0, 11.0], [8.0, 23.0, 7.0, 7.0]])
        targets = match_targets(props, gts, np.array([1, 2, 3]))
        assert LossWeights() == LossWeights(1.0, 1.0)
        for arch in HeadArchitecture:
            t = compute_loss(make_head(arch, seed=9)(fm, props), targets)
            assert t.total.item() == t.cls.item() + t.offset.item() + t.scaling.item()
        for arch in (HeadArchitecture.DSDH, HeadArchitecture.DECOUPLED_OS, HeadArchitecture.SEQUENTIAL_OS):
            head = make_head(arch, seed=10)
            compute_loss(head(fm, props), targets, LossWeights(alpha=0.0)).total.backward()
            for name, p in head.branch_parameters("offset").items():
                assert p.grad is None or not p.grad.any(), name


# 6-8: fixture experiments ---------------------------------------------------------


def test_criterion_06_learnability(dsdh_run):
    with criterion(6, "DSDH seed 7 reaches mean AP >= 0.5 in under 10 minutes"):
        res = dsdh_run.result
        curve = [round(e["total"], 3) for e in res.record.epochs]
        print(f"mean AP {res.report.mean_ap:.4f}, {dsdh_run.elapsed:.0f} s, loss curve {curve}")
        assert len(res.record.epochs) == 13
        assert res.record.epochs[-1]["total"] < res.record.epochs[0]["total"]
        assert res.report.mean_ap >= 0.5
        assert dsdh_run.elapsed < 600


def test_criterion_07_offset_shrinkage(dsdh_run, fixture_data):
    with criterion(7, "post-offset std of dx and dy below pre-offset std on the trained fixture model"):
        summary = stats(dsdh_run.out / "checkpoint.npz", fixture_data).summary()
        for comp in ("dx", "dy"):
            before, after = summary[(comp, "before")][1], summary[(comp, "after")][1]
            print(f"{comp}: std before {before:.4f}, after {after:.4f}")
            assert after < before


def test_criterion_08_model_design_ordering(dsdh_run, fixture_data, run_cache):
    with criterion(8, "over 5 seeds: AP(both) > AP(neither), AP(decouple-only) and AP(sequence-only) >= AP(neither)"):
        result = ablate("model-design", ExperimentConfig(), dataset=fixture_data, cache=run_cache)
        means = {r.row.label: r.mean_std("AP")[0] for r in result.rows}
        print(result.to_csv(), end="")
        assert means["both"] > means["neither"], means
        assert means["decouple-only"] >= means["neither"], means
        assert means["sequence-only"] >= means["neither"], means


# 9-10: harness contracts -----------------------------------------------------------


def test_criterion_09_cli_determinism(tmp_path, capsys):
    with criterion(9, "every CLI command is bit-identical across two runs"):
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps(tiny_config().to_dict()))
        abl = tmp_path / "ablate.json"
        abl.write_text(json.dumps(tiny_config(optimizer=OptimizerConfig(epochs=1)).to_dict()))
        outputs = []
        for k in range(2):
            d = tmp_path / f"run{k}"
            commands = [
                ["synth", "--config", cfg, "--out", d / "data.npz"],
                ["train", "--config", cfg, "--out", d / "train"],
                ["eval", "--checkpoint", d / "train" / "checkpoint.npz", "--data", d / "data.npz", "--report", d / "eval.csv"],
                ["stats", "--checkpoint", d / "train" / "checkpoint.npz", "--data", d / "data.npz", "--out", d / "stats.csv"],
                ["ablate", "--suite", "model-design", "--config", abl, "--seeds", "1,2", "--out", d / "ablate"],
            ]
            for argv in commands:
                assert cli_main([str(a) for a in argv]) == 0, argv
            capsys.readouterr()
            files = {}
            for p in sorted(d.rglob("*")):
                if not p.is_file():
                    continue
                if p.suffix == ".json":
                    # run records carry wall-clock time; everything else must match byte for byte
                    doc = json.loads(p.read_text())
                    doc.pop("wall_time", None)
                    files[p.relative_to(d)] = json.dumps(doc, sort_keys=True).encode()
                else:
                    files[p.relative_to(d)] = p.read_bytes()
            outputs.append(files)
        assert len(outputs[0]) >= 10
        assert outputs[0] == outputs[1]


class _ScoreHead:
    """Returns fixed class probabilities and leaves the proposals unrefined."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)

    def __call__(self, fmap, proposals):
        return SimpleNamespace(class_logits=SimpleNamespace(data=np.log(self.probs)), refined_boxes=np.asarray(proposals, float))


def test_criterion_10_protocol_constants():
    with criterion(10, "score filter 0.01, NMS IoU 0.5, 100-box cap, bucket bounds 32^2 / 96^2"):
        ev = EvalConfig()
        assert (SCORE_THRESHOLD, NMS_IOU, MAX_DETECTIONS) == (0.01, 0.5, 100)
        assert (ev.score_threshold, ev.nms_iou, ev.max_dets) == (0.01, 0.5, 100)
        assert (SMALL_MAX_AREA, LARGE_MIN_AREA) == (1024.0, 9216.0)
        config = ExperimentConfig()
        scene = Scene("f", FeatureMap(np.zeros((16, 16, 4)), 4.0), np.zeros((0, 4)), np.zeros(0, int), (64, 64))

        # score filter: class 1 sits just above the threshold, class 2 just below
        props = np.array([[10.0, 10.0, 8.0, 8.0]])
        dets = detect(_ScoreHead([[0.979, 0.011, 0.009, 0.001]]), scene, props, config)
        assert [d.cls for d in dets] == [1]

        # NMS: IoU 1/3 keeps both, IoU 0.6 suppresses, different classes never suppress
        pair = np.array([[5.0, 5.0, 10.0, 10.0], [10.0, 5.0, 10.0, 10.0]])
        assert len(detect(_ScoreHead([[0.1, 0.9], [0.2, 0.8]]), scene, pair, config)) == 2
        close = np.array([[5.0, 5.0, 10.0, 10.0], [7.5, 5.0, 10.0, 10.0]])
        kept = detect(_ScoreHead([[0.1, 0.9], [0.2, 0.8]]), scene, close, config)
        assert [d.score for d in kept] == pytest.approx([0.9])
        assert len(detect(_ScoreHead([[0.1, 0.9, 0.0001], [0.2, 0.0001, 0.8]]), scene, close, config)) == 2

        # cap: 150 disjoint confident boxes leave 100 detections
        grid = np.array([[4.0 + 8 * (k % 15), 4.0 + 8 * (k // 15), 4.0, 4.0] for k in range(150)])
        probs = np.tile([0.05, 0.95], (150, 1))
        probs[:, 1] -= np.arange(150) * 1e-4
        probs[:, 0] = 1 - probs[:, 1]
        capped = detect(_ScoreHead(probs), scene, grid, config)
        assert len(capped) == 100 and min(d.score for d in capped) > max(probs[100:, 1])

        # buckets at the area bounds
        assert area_bucket((0, 0, 31.9, 32)) is SizeBucket.SMALL
        assert area_bucket((0, 0, 32, 32)) is SizeBucket.MEDIUM
        assert area_bucket((0, 0, 96, 96)) is SizeBucket.MEDIUM
        assert area_bucket((0, 0, 96, 96.1)) is SizeBucket.LARGE
        gts = [GroundTruth("a", (20, 20, 30, 30), 1), GroundTruth("a", (100, 100, 60, 60), 1), GroundTruth("a", (300, 300, 100, 100), 1)]
        report = evaluate_detections([Detection("a", g.box, 1, 1.0) for g in gts], gts)
        assert report.gt_counts["bucket_S"] == report.gt_counts["bucket_M"] == report.gt_counts["bucket_L"] == 1
        assert (report.ap_small, report.ap_medium, report.ap_large) == (1.0, 1.0, 1.0)
