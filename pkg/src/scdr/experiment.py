"""End-to-end experiments built from a :class:`RunConfig`.

The run seed steers model initialisation, the k-shot draw and the batch
stream.  The dataset itself is fixed by ``[data] seed`` so that different
run seeds are evaluated on the same test images.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .data import Dataset, augment_dataset, center_chips, generate, kshot_sample
from .model import (BASELINE_WEIGHTS, EpochLog, LossWeights, Metrics, SCDRModel, build_model, evaluate,
                    train)

log = logging.getLogger(__name__)


def make_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training pool and test split, generated in memory."""
    spec = cfg.spec()
    spec.validate()
    return (generate(spec, cfg.get("data", "train_per_class"), "train"),
            generate(spec, cfg.get("data", "test_per_class"), "test"))


def prepare_train(cfg: RunConfig, pool: Dataset, seed: int) -> Dataset:
    """k-shot draw from the pool, then chip augmentation if configured."""
    ds = kshot_sample(pool, cfg.get("train", "k"), seed)
    count = cfg.get("train", "augment_chips")
    return augment_dataset(ds, count, seed) if count > 0 else ds


def prepare_test(cfg: RunConfig, test: Dataset) -> Dataset:
    # augmented training chips are rescaled; evaluate on the same scale
    return center_chips(test) if cfg.get("train", "augment_chips") > 0 else test


def fit(cfg: RunConfig, train_ds: Dataset, seed: int, weights: LossWeights | None = None,
        model: SCDRModel | None = None, start_epoch: int = 0,
        on_epoch_end: Callable[[int, EpochLog], None] | None = None) -> tuple[SCDRModel, list[EpochLog]]:
    m = cfg["model"]
    if model is None:
        model = build_model(cfg.embedding(), seed, mu=m["mu"], margin=m["margin"])
    tc = replace(cfg.train_config(), seed=seed)
    if weights is not None:
        tc = replace(tc, weights=weights)
    rows = train(model, train_ds.images, train_ds.labels, tc, start_epoch=start_epoch, on_epoch_end=on_epoch_end)
    return model, rows


@dataclass
class RunResult:
    seed: int
    k: int
    metrics: Metrics
    log: list[EpochLog]
    model: SCDRModel


def run_once(cfg: RunConfig, seed: int, pool: Dataset, test: Dataset, weights: LossWeights | None = None,
             mode: str | None = None) -> RunResult:
    train_ds = prepare_train(cfg, pool, seed)
    test_ds = prepare_test(cfg, test)
    model, rows = fit(cfg, train_ds, seed, weights)
    metrics = evaluate(model, test_ds.images, test_ds.labels, test_ds.glyph_masks,
                       mode=mode or cfg.get("eval", "mode"))
    return RunResult(seed, cfg.get("train", "k"), metrics, rows, model)


# soundness: full framework against the whole-branch-only baseline ---------


@dataclass
class SoundnessReport:
    seeds: list[int]
    scdr_accuracy: list[float]
    baseline_accuracy: list[float]
    mask_iou: list[float]
    disk_iou: list[float]
    runs: dict[str, list[RunResult]] = field(default_factory=dict, repr=False)

    @property
    def gap(self) -> float:
        return float(np.mean(self.scdr_accuracy) - np.mean(self.baseline_accuracy))

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "scdr_accuracy": self.scdr_accuracy,
            "baseline_accuracy": self.baseline_accuracy,
            "scdr_mean": float(np.mean(self.scdr_accuracy)),
            "baseline_mean": float(np.mean(self.baseline_accuracy)),
            "gap": self.gap,
            "mask_iou": self.mask_iou,
            "disk_iou": self.disk_iou,
            "mask_iou_mean": float(np.mean(self.mask_iou)),
            "disk_iou_mean": float(np.mean(self.disk_iou)),
        }


def run_soundness(cfg: RunConfig, seeds: Sequence[int]) -> SoundnessReport:
    """Train SCDR (fused prediction) and the baseline (whole branch, CE only) per seed."""
    pool, test = make_datasets(cfg)
    report = SoundnessReport(list(seeds), [], [], [], [], {"scdr": [], "baseline": []})
    for seed in seeds:
        full = run_once(cfg, seed, pool, test, mode="fused")
        base = run_once(cfg, seed, pool, test, weights=BASELINE_WEIGHTS, mode="whole")
        report.runs["scdr"].append(full)
        report.runs["baseline"].append(base)
        report.scdr_accuracy.append(full.metrics.average)
        report.baseline_accuracy.append(base.metrics.average)
        report.mask_iou.append(full.metrics.mask_iou)
        report.disk_iou.append(full.metrics.disk_iou)
        log.info("seed %d: scdr %.3f baseline %.3f iou %.3f disk %.3f", seed, full.metrics.average,
                 base.metrics.average, full.metrics.mask_iou, full.metrics.disk_iou)
    return report


# k-shot sweep ----------------------------------------------------------------


@dataclass
class SweepRow:
    k: int
    accuracy: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracy))


def run_sweep(cfg: RunConfig, ks: Sequence[int], seeds: Sequence[int],
              on_cell: Callable[[int, int, RunResult], None] | None = None) -> list[SweepRow]:
    """Train and evaluate once per (k, seed); the test split is shared by all cells."""
    if not ks:
        raise ValueError("empty k list")
    pool, test = make_datasets(cfg)
    rows = []
    for k in ks:
        cell_cfg = cfg.copy()
        cell_cfg.set("train", "k", int(k))
        cell_cfg.validate()
        accs = []
        for seed in seeds:
            res = run_once(cell_cfg, seed, pool, test)
            accs.append(res.metrics.average)
            if on_cell is not None:
                on_cell(k, seed, res)
        rows.append(SweepRow(int(k), accs))
        log.info("k=%d mean accuracy %.3f", k, rows[-1].mean)
    return rows


def sweep_csv(rows: Sequence[SweepRow], seeds: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k"] + [f"seed_{s}" for s in seeds] + ["mean"])
    for r in rows:
        w.writerow([r.k] + [repr(a) for a in r.accuracy] + [repr(r.mean)])
    return buf.getvalue()


def loss_csv(rows: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for r in rows:
        d = r.as_row()
        w.writerow([d["epoch"]] + [repr(float(d[c])) for c in LOSS_COLUMNS[1:]])
    return buf.getvalue()


LOSS_COLUMNS = ["epoch", "l_whole", "l_local", "l_disc", "l_fuse", "total", "lr"]
