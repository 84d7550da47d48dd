"""Ablation suites and the report-producing commands built on top of training."""
from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError
from .heads import BranchSpec, HeadArchitecture
from .metrics import DeltaStats, delta_statistics
from .scenes import Dataset, SynthConfig, generate_dataset, read_dataset, write_dataset
from .training import eval_proposals, load_head, train

DEFAULT_SEEDS = (7, 8, 9, 10, 11)

A = HeadArchitecture


class Row(NamedTuple):
    label: str
    architecture: HeadArchitecture
    branch: BranchSpec | None = None  # None keeps the base config's branch


# Row manifests.  Each suite lists exactly the rows of the table it mirrors.
SUITES: dict[str, tuple[Row, ...]] = {
    "model-design": (
        Row("neither", A.SINGLE),
        Row("sequence-only", A.SEQUENTIAL_OS),
        Row("decouple-only", A.DECOUPLED_OS),
        Row("both", A.DSDH),
    ),
    "branch": tuple(
        Row(BranchSpec(num_conv=c, num_fc=f).label, A.DSDH, BranchSpec(num_conv=c, num_fc=f))
        for c in (0, 1, 2)
        for f in (1, 2)
    ),
    "decouple": (
        Row("No decouple", A.SINGLE),
        Row("Double-FC", A.DOUBLE),
        Row("Offset plus scaling", A.DECOUPLED_OS),
        Row("Horizontal plus vertical", A.DECOUPLED_HV),
        Row("Fully decoupled", A.FULLY_DECOUPLED),
    ),
    "sequence": (
        Row("Parallel", A.SINGLE),
        Row("Offset then scaling", A.SEQUENTIAL_OS),
        Row("Scaling then offset", A.SEQUENTIAL_SO),
        Row("Horizontal then vertical", A.SEQUENTIAL_HV),
        Row("Vertical then horizontal", A.SEQUENTIAL_VH),
    ),
}

METRICS = ("AP", "AP_S", "AP_M", "AP_L")


@dataclass
class RowResult:
    row: Row
    branch_label: str
    seeds: tuple[int, ...]
    metrics: dict[str, list[float | None]]  # metric -> one value per seed

    def mean_std(self, metric: str) -> tuple[float, float] | None:
        vals = [v for v in self.metrics[metric] if v is not None]
        if not vals:
            return None
        return float(np.mean(vals)), float(np.std(vals))


@dataclass
class AblationResult:
    suite: str
    rows: list[RowResult]

    def row(self, label: str) -> RowResult:
        for r in self.rows:
            if r.row.label == label:
                return r
        raise KeyError(label)

    def to_csv(self) -> str:
        """Columns: row, architecture, branch, seeds, then ``<metric>_mean`` / ``<metric>_std`` per metric."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["row", "architecture", "branch", "seeds"]
        for m in METRICS:
            header += [f"{m}_mean", f"{m}_std"]
        writer.writerow(header)
        for r in self.rows:
            line = [r.row.label, r.row.architecture.value, r.branch_label, len(r.seeds)]
            for m in METRICS:
                ms = r.mean_std(m)
                line += [f"{ms[0]:.6f}", f"{ms[1]:.6f}"] if ms else ["", ""]
            writer.writerow(line)
        return buf.getvalue()


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")


def suite_rows(suite: str) -> tuple[Row, ...]:
    try:
        return SUITES[suite]
    except KeyError:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}") from None


def row_config(base: ExperimentConfig, row: Row, seed: int) -> ExperimentConfig:
    return base.replace(architecture=row.architecture, branch=row.branch or base.branch, seed=seed)


def _shared_dataset(base: ExperimentConfig) -> Dataset:
    if base.data.path:
        return read_dataset(base.data.path)
    return Dataset(generate_dataset(base.data.synth), base.data.synth.to_dict())


def ablate(
    suite: str,
    base: ExperimentConfig | None = None,
    seeds=DEFAULT_SEEDS,
    out_dir=None,
    dataset: Dataset | None = None,
    cache: dict | None = None,
) -> AblationResult:
    """Train and evaluate every row of ``suite`` for each seed.

    The dataset is fixed across rows and seeds; only the model seed varies.
    With ``out_dir`` each run's record is archived under
    ``records/<row>/seed<k>.json`` and the comparison table is written to
    ``<suite>.csv``.  ``cache`` maps a serialized config to an earlier run record so
    rows shared between suites are trained once.
    """
    rows = suite_rows(suite)
    base = base or ExperimentConfig()
    seeds = tuple(int(s) for s in seeds)
    dataset = dataset or _shared_dataset(base)
    out_dir = Path(out_dir) if out_dir is not None else None
    results = []
    for row in rows:
        metrics: dict[str, list] = {m: [] for m in METRICS}
        for seed in seeds:
            config = row_config(base, row, seed)
            key = json.dumps(config.to_dict(), sort_keys=True)
            if cache is not None and key in cache:
                record = cache[key]
            else:
                record = train(config, dataset=dataset).record
                if cache is not None:
                    cache[key] = record
            if out_dir is not None:
                record.save(out_dir / "records" / _slug(row.label) / f"seed{seed}.json")
            rep = record.report or {}
            metrics["AP"].append(rep.get("mean_ap"))
            for m, key in zip(METRICS[1:], ("ap_small", "ap_medium", "ap_large")):
                metrics[m].append(rep.get(key))
        results.append(RowResult(row, (row.branch or base.branch).label, seeds, metrics))
    result = AblationResult(suite, results)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{suite}.csv").write_text(result.to_csv())
    return result


def stats(checkpoint, data, out=None, bin_width: float = 0.5, split: str = "test") -> DeltaStats:
    """Offset statistics of a trained sequential head over a dataset's foreground proposals."""
    head, config, _ = load_head(checkpoint)
    ds = data if isinstance(data, Dataset) else read_dataset(data)
    scenes = ds.split(split) or ds.scenes
    jitter = config.proposal.jitter()
    seed = config.eval.proposal_seed
    result = delta_statistics(
        head, scenes, lambda s, i: eval_proposals(s, i, jitter, seed), config.proposal.fg_iou, bin_width
    )
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(result.to_csv())
    return result


def synth(config: SynthConfig | ExperimentConfig | None, out) -> Path:
    """Generate a synthetic dataset and write it as a container with the config in its header."""
    if isinstance(config, ExperimentConfig):
        config = config.data.synth
    config = config or SynthConfig()
    return write_dataset(generate_dataset(config), out, config.to_dict())
