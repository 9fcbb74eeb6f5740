"""Comparative experiment runner: fusion arms x seeds on paired data.

For each seed the dataset and split are generated once and shared by every
arm, so per-seed differences reflect the fusion strategy alone. Results go
to ``results.csv`` (one row per epoch plus a final test row per cell) and
``report.json`` (rows, per-arm aggregates, paired win counts, config echo).
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .config import ExperimentConfig
from .data import (gen_graphs, gen_multisource, gen_shapes, gen_token_sentiment,
                   load_csv_dataset, load_edge_list, train_test_split)
from .metrics import ClassificationReport
from .models import FusionModel, model_build
from .rng import derive
from .tensor import NonFiniteError
from .train import EpochStats, LossConfig, Optimizer, evaluate, train_epoch

INIT_SALT = 0x1A17_0000_0000_0001
SPLIT_SALT = 0x5B17_0000_0000_0002
CSV_COLUMNS = ("arm", "seed", "epoch", "split", "loss", "accuracy", "macro_f1", "wall_ms")


@dataclass
class ArmResult:
    arm: str
    seed: int
    epochs: list[EpochStats] = field(default_factory=list)
    epoch_ms: list[float] = field(default_factory=list)
    test_loss: float = math.nan
    test: ClassificationReport | None = None
    wall_ms: float = 0.0
    attention: dict[str, float] | None = None
    status: str = "ok"
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "arm": self.arm, "seed": self.seed, "status": self.status, "error": self.error,
            "epochs": [{"loss": e.loss, "accuracy": e.accuracy, "macro_f1": e.macro_f1}
                       for e in self.epochs],
            "test_loss": None if math.isnan(self.test_loss) else self.test_loss,
            "test": self.test.to_dict() if self.test else None,
            "wall_ms": self.wall_ms,
            "attention": self.attention,
        }


@dataclass
class ExperimentReport:
    results: list[ArmResult]
    aggregates: dict[str, dict[str, float]]
    paired: dict[str, dict[str, int]]
    config: dict
    version: str = __version__

    def to_dict(self) -> dict:
        return {"version": self.version, "config": self.config,
                "aggregates": self.aggregates, "paired": self.paired,
                "results": [r.to_dict() for r in self.results]}


# ---------------------------------------------------------------- data

def build_datasets(cfg: ExperimentConfig, seed: int):
    """(train, test) for one seed; identical for every arm."""
    d = cfg.data
    n = d["n_train"] + d["n_test"]
    if cfg.task == "multisource":
        if d.get("csv"):
            ds = load_csv_dataset(d["csv"], num_classes=cfg.model.num_classes)
        else:
            ds = gen_multisource(n, d["K"], d["d"], d["C"], d["sigma"], d["p_corrupt"],
                                 d["sigma_noise"], seed)
    elif cfg.task == "images":
        ds = gen_shapes(n, seed)
    elif cfg.task == "sentiment":
        ds = gen_token_sentiment(n, d["T"], d["V"], seed)
    else:
        if d.get("edge_list"):
            ds = load_edge_list(d["edge_list"], num_classes=cfg.model.num_classes)
        else:
            ds = gen_graphs(n, d["n_min"], d["n_max"], seed)
    n_test = min(d["n_test"], len(ds) - 1)
    split = train_test_split(len(ds), n_test, seed ^ SPLIT_SALT)
    return ds.subset(split.train), ds.subset(split.test)


def build_arm_model(cfg: ExperimentConfig, arm: str, seed: int) -> FusionModel:
    return model_build(cfg.model.with_mode(arm), derive(seed, INIT_SALT))


def arm_loss_config(cfg: ExperimentConfig, arm: str) -> LossConfig:
    # static arms have no auxiliary head
    return LossConfig(aux_weight=cfg.loss.aux_weight if arm == "aff" else 0.0,
                      weight_decay=cfg.loss.weight_decay)


def attention_stats(alphas, dataset) -> dict[str, float] | None:
    corrupted = getattr(dataset, "corrupted", None)
    if alphas is None or corrupted is None or alphas.shape != corrupted.shape:
        return None
    if not corrupted.any() or corrupted.all():
        return None
    return {"corrupted": float(alphas[corrupted].mean()), "clean": float(alphas[~corrupted].mean())}


# ---------------------------------------------------------------- cells

def run_cell(cfg: ExperimentConfig, arm: str, seed: int, data=None) -> tuple[ArmResult, FusionModel]:
    train_ds, test_ds = data if data is not None else build_datasets(cfg, seed)
    result = ArmResult(arm=arm, seed=seed)
    start = time.perf_counter()
    model = build_arm_model(cfg, arm, seed)
    tcfg = cfg.train
    train_cfg = type(tcfg)(**{**tcfg.__dict__, "seed": seed})
    loss_cfg = arm_loss_config(cfg, arm)
    opt = Optimizer(model.parameters(), train_cfg.optimizer, train_cfg.lr)
    try:
        for epoch in range(train_cfg.epochs):
            t0 = time.perf_counter()
            stats = train_epoch(model, train_ds, train_cfg, loss_cfg, opt, epoch)
            if not math.isfinite(stats.loss):
                raise NonFiniteError(f"epoch {epoch}: non-finite loss")
            result.epochs.append(stats)
            result.epoch_ms.append((time.perf_counter() - t0) * 1e3)
        result.test_loss, result.test, alphas = evaluate(model, test_ds)
        result.attention = attention_stats(alphas, test_ds)
    except (NonFiniteError, FloatingPointError) as exc:
        result.status = "failed"
        result.error = str(exc)
    result.wall_ms = (time.perf_counter() - start) * 1e3
    return result, model


# ---------------------------------------------------------------- aggregation and output

def _mean_std(xs: list[float]) -> tuple[float, float]:
    m = sum(xs) / len(xs)
    return m, math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))


def aggregate(rows: list[tuple[str, int, float, float]], arms: list[str]) -> dict:
    """Per-arm mean and population std of (accuracy, macro_f1) over successful seeds."""
    out = {}
    for arm in arms:
        accs = [r[2] for r in rows if r[0] == arm]
        f1s = [r[3] for r in rows if r[0] == arm]
        if not accs:
            out[arm] = {"n": 0}
            continue
        am, asd = _mean_std(accs)
        fm, fsd = _mean_std(f1s)
        out[arm] = {"n": len(accs), "accuracy_mean": am, "accuracy_std": asd,
                    "macro_f1_mean": fm, "macro_f1_std": fsd}
    return out


def paired_summary(results: list[ArmResult]) -> dict[str, dict[str, int]]:
    ok = {(r.arm, r.seed): r for r in results if r.status == "ok"}
    out: dict[str, dict[str, int]] = {}
    seeds = sorted({s for _, s in ok})
    for arm in sorted({a for a, _ in ok} - {"aff"}):
        pairs = [(ok[("aff", s)], ok[(arm, s)]) for s in seeds if ("aff", s) in ok and (arm, s) in ok]
        if pairs:
            out[f"aff_vs_{arm}"] = {
                "seeds": len(pairs),
                "aff_wins": sum(a.test.accuracy > b.test.accuracy for a, b in pairs),
            }
    att = [r.attention for r in results if r.arm == "aff" and r.attention]
    if att:
        out["attention_corrupted_below_clean"] = {
            "seeds": len(att), "count": sum(a["corrupted"] < a["clean"] for a in att)}
    return out


def _num(x: float) -> str:
    return repr(float(x))


def results_csv(results: list[ArmResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        for e, (stats, ms) in enumerate(zip(r.epochs, r.epoch_ms)):
            w.writerow([r.arm, r.seed, e, "train", _num(stats.loss), _num(stats.accuracy),
                        _num(stats.macro_f1), f"{ms:.3f}"])
        if r.status == "ok":
            w.writerow([r.arm, r.seed, -1, "test", _num(r.test_loss), _num(r.test.accuracy),
                        _num(r.test.macro_f1), f"{r.wall_ms:.3f}"])
        else:
            w.writerow([r.arm, r.seed, -1, "failed", "nan", "nan", "nan", f"{r.wall_ms:.3f}"])
    return buf.getvalue()


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def final_rows_from_csv(path) -> list[tuple[str, int, float, float]]:
    return [(r["arm"], int(r["seed"]), float(r["accuracy"]), float(r["macro_f1"]))
            for r in read_results_csv(path) if r["split"] == "test"]


def run_experiment(cfg: ExperimentConfig, out_dir=None, log=None) -> ExperimentReport:
    """Train and evaluate every (arm, seed) cell, write results.csv and report.json."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    results: list[ArmResult] = []
    for seed in sorted(cfg.seeds):
        data = build_datasets(cfg, seed)
        for arm in cfg.arms:
            result, _ = run_cell(cfg, arm, seed, data)
            results.append(result)
            if log:
                acc = f"{result.test.accuracy:.4f}" if result.test else result.status
                log(f"arm={arm} seed={seed} test_accuracy={acc} wall_ms={result.wall_ms:.0f}")
    order = {a: i for i, a in enumerate(cfg.arms)}
    results.sort(key=lambda r: (order[r.arm], r.seed))
    rows = [(r.arm, r.seed, r.test.accuracy, r.test.macro_f1) for r in results if r.status == "ok"]
    report = ExperimentReport(results, aggregate(rows, cfg.arms), paired_summary(results),
                              cfg.to_dict())
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_csv(results))
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=False) + "\n")
    return report


def summarize(report: ExperimentReport) -> str:
    lines = []
    for arm, agg in report.aggregates.items():
        if agg.get("n"):
            lines.append(f"{arm:>7}: accuracy {agg['accuracy_mean']:.4f} ± {agg['accuracy_std']:.4f}  "
                         f"macro-F1 {agg['macro_f1_mean']:.4f} ± {agg['macro_f1_std']:.4f}  (n={agg['n']})")
        else:
            lines.append(f"{arm:>7}: no successful runs")
    for key, val in report.paired.items():
        lines.append(f"{key}: {val}")
    return "\n".join(lines)


__all__ = ["ArmResult", "ExperimentReport", "run_experiment", "run_cell", "build_datasets",
           "aggregate", "results_csv", "read_results_csv", "final_rows_from_csv"]
