"""Experiment orchestration: optimizer x ER x seed matrices, ablations, sweeps, timing."""
from __future__ import annotations

import csv
import json
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import analysis
from .losses import LabeledBatch
from .model import EncoderClassifier, ModelConfig, save_checkpoint
from .modulator import DomainCenterBank
from .optim import BaseUpdate, RunReport, TrainConfig, batch_order, step, train
from .synthdata import Benchmark, BenchmarkConfig, gen_feature_benchmark

SCHEMA = 1
OUT_ENV = "DASM_OUT"

ABLATION_VARIANTS = {
    "baseline-adam": {"optimizer": "adam"},
    "dscl-only": {"optimizer": "dasm", "components": ["ce", "dscl"]},
    "adgm-only": {"optimizer": "dasm", "components": ["ce", "adgm"]},
    "full": {"optimizer": "dasm"},
}
RHO_GRID = (0.01, 0.03, 0.05, 0.08)
TAU_GRID = (0.05, 0.1, 0.2, 0.5)
# the fixed value of the other knob in each sweep
SWEEP_FIXED = {"rho": {"tau": 0.5}, "tau": {"rho": 0.03}}


def output_root(default: str = "runs") -> Path:
    return Path(os.environ.get(OUT_ENV, default))


# ---------------------------------------------------------------- configuration

@dataclass
class Analyses:
    sharpness: bool = False
    sharpness_rho: float = 0.05
    sharpness_m: int = 64
    pad: bool = False
    landscape: bool = False
    landscape_grid: int = 41
    landscape_extent: float = 1.0
    hessian: bool = False
    hessian_iters: int = 100
    features: bool = False
    seed: int = 0


@dataclass
class Variant:
    name: str
    overrides: dict = field(default_factory=dict)


@dataclass
class Cell:
    run_id: str
    variant: Variant
    er: float
    seed: int


@dataclass
class ExperimentMatrix:
    variants: list[Variant]
    embedding_rates: tuple[float, ...]
    seeds: tuple[int, ...] = (0, 1, 2)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analyses: Analyses = field(default_factory=Analyses)
    workers: int = 1
    kind: str = "matrix"

    def __post_init__(self):
        self.variants = [v if isinstance(v, Variant) else Variant(**v) for v in self.variants]
        self.embedding_rates = tuple(float(r) for r in self.embedding_rates)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.variants or not self.embedding_rates or not self.seeds:
            raise ValueError("experiment axes must be non-empty")
        missing = [r for r in self.embedding_rates
                   if not any(np.isclose(r, b) for b in self.benchmark.embedding_rates)]
        if missing:
            raise ValueError(f"embedding rates {missing} are not in the benchmark")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variant names {names}")
        for v in self.variants:
            _train_config(self.train, v.overrides, 0)   # validate early
        if self.model.input_dim != self.benchmark.input_dim:
            self.model = replace(self.model, input_dim=self.benchmark.input_dim)

    @classmethod
    def for_optimizers(cls, optimizers, **kw) -> "ExperimentMatrix":
        return cls([Variant(o, {"optimizer": o}) for o in optimizers], **kw)

    def cells(self) -> list[Cell]:
        return [Cell(f"{v.name}_er{er:g}_s{s}", v, er, s)
                for v in self.variants for er in self.embedding_rates for s in self.seeds]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "variants": [asdict(v) for v in self.variants],
                "embedding_rates": list(self.embedding_rates), "seeds": list(self.seeds),
                "benchmark": self.benchmark.to_dict(), "model": self.model.to_dict(),
                "train": self.train.to_dict(), "analyses": asdict(self.analyses),
                "workers": self.workers, "schema": SCHEMA}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentMatrix":
        d = dict(d)
        d.pop("schema", None)
        return cls(variants=d.pop("variants"), embedding_rates=d.pop("embedding_rates"),
                   seeds=d.pop("seeds", (0, 1, 2)),
                   benchmark=BenchmarkConfig.from_dict(d.pop("benchmark", {})),
                   model=ModelConfig(**d.pop("model", {})),
                   train=TrainConfig(**d.pop("train", {})),
                   analyses=Analyses(**d.pop("analyses", {})), **d)


def _train_config(base: TrainConfig, overrides: dict, seed: int) -> TrainConfig:
    d = base.to_dict()
    if "optimizer" in overrides and "components" not in overrides:
        d["components"] = None
    d.update(overrides)
    d["seed"] = seed
    return TrainConfig(**d)


def strict_fields(cls, d: dict, where: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")
    return d


# ---------------------------------------------------------------- persistence

def write_json(path, obj) -> None:
    analysis.write_json(path, obj)


def write_epochs_csv(path, report: RunReport, domain_names) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "domain", "acc", "ce", "dscl", "adgm", "gap_k", "w_k",
                    "grad_norm", "val_ce"])
        for row in report.epochs:
            tr = row["train"]
            for name in domain_names:
                dom = row["val"]["domains"].get(name, {"acc": float("nan"), "ce": float("nan")})
                w.writerow([row["epoch"], name, dom["acc"], tr["ce"], tr["dscl"], tr["adgm"],
                            row["gaps"][name], row["weights"][name], row["grad_norm"],
                            dom["ce"]])


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _write_rows(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={SCHEMA}\n")
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})


# ---------------------------------------------------------------- cells

_BENCH_CACHE: dict[str, Benchmark] = {}


def _benchmark_for(cfg: BenchmarkConfig) -> Benchmark:
    key = json.dumps(cfg.to_dict(), sort_keys=True)
    if key not in _BENCH_CACHE:
        _BENCH_CACHE.clear()
        _BENCH_CACHE[key] = gen_feature_benchmark(cfg)
    return _BENCH_CACHE[key]


def run_analyses(model: EncoderClassifier, data: Benchmark, opts: Analyses, out_dir: Path | None,
                 tag: str = "") -> dict:
    """Run the enabled diagnostics on the test split; returns their summaries."""
    res: dict = {}
    test, names = data.test, data.domain_names
    er = data.config.embedding_rates[0] if len(data.config.embedding_rates) == 1 else None
    if opts.sharpness:
        rep = analysis.zeroth_order_sharpness(model, test, names, opts.sharpness_rho,
                                              opts.sharpness_m, opts.seed)
        res["sharpness"] = rep.to_dict()
        if out_dir:
            write_json(out_dir / "sharpness.json", rep.to_dict())
    if opts.pad:
        pm = analysis.pad_matrix(model, test, names, er, opts.seed)
        res["pad"] = {"names": pm.names, "values": pm.values.tolist()}
        if out_dir:
            pm.write_csv(out_dir / f"pad_matrix_ER{er:g}.csv" if er is not None
                         else out_dir / "pad_matrix.csv")
    if opts.landscape:
        sl = analysis.landscape_slice(model, test.x, test.y, opts.landscape_grid,
                                      opts.landscape_extent, opts.seed)
        res["landscape"] = {"center_loss": sl.center_loss, "max_loss": float(np.nanmax(sl.losses)),
                            "missing": int(sl.missing.sum())}
        if out_dir:
            sl.write_csv(out_dir / f"landscape_{tag or 'model'}.csv")
    if opts.hessian:
        hr = analysis.model_hessian(model, test.x, test.y, opts.hessian_iters, opts.seed)
        res["hessian"] = hr.to_dict()
        if out_dir:
            write_json(out_dir / "hessian.json", hr.to_dict())
    if opts.features and out_dir:
        analysis.export_features(model, test, names, out_dir)
    return res


def run_cell(matrix: ExperimentMatrix, cell: Cell, out_root: Path | None) -> tuple[dict, dict]:
    """Train one cell; failures are returned as rows with status ``failed``."""
    row = {"run_id": cell.run_id, "variant": cell.variant.name, "er": cell.er,
           "seed": cell.seed, "status": "ok", "error": ""}
    out_dir = None
    if out_root is not None:
        out_dir = out_root / "runs" / cell.run_id
        out_dir.mkdir(parents=True, exist_ok=True)
    report: dict = {}
    try:
        cfg = _train_config(matrix.train, cell.variant.overrides, cell.seed)
        data = _benchmark_for(matrix.benchmark).at_er(cell.er)
        model = EncoderClassifier(replace(matrix.model, seed=cell.seed))
        bank = DomainCenterBank(len(data.domain_names), model.config.feature_dim, cfg.mu, cfg.xi)
        rep = train(model, data, cfg, bank)
        rep.config["benchmark"] = matrix.benchmark.to_dict()
        rep.config["er"] = cell.er
        extra = run_analyses(model, data, matrix.analyses, out_dir, cell.run_id)
        rep.artifacts = {k: v for k, v in extra.items()}
        report = rep.to_dict()
        for name, dom in rep.test["domains"].items():
            row[f"acc_{name}"] = dom["acc"]
        row["avg_acc"] = rep.test["avg_acc"]
        row["best_epoch"] = rep.best_epoch
        row["ms_per_batch"] = rep.ms_per_batch[0]
        if "sharpness" in extra:
            sh = extra["sharpness"]
            row.update({"sharp_mean": sh["mean"], "sharp_std": sh["std"],
                        "sharp_total": sh["total"]})
            for name, v in sh["per_domain"].items():
                row[f"sharp_{name}"] = v
        if out_dir is not None:
            write_json(out_dir / "report.json", report)
            write_epochs_csv(out_dir / "epochs.csv", rep, data.domain_names)
            save_checkpoint(out_dir / "model.ckpt", model, rep.n_steps, bank)
    except Exception as exc:  # a failed cell becomes a row, the matrix goes on
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
        report = {"status": "failed", "error": row["error"], "traceback": traceback.format_exc()}
        if out_dir is not None:
            write_json(out_dir / "report.json", report)
    return row, report


def _worker(args):
    matrix_dict, cell_index, out_root = args
    matrix = ExperimentMatrix.from_dict(matrix_dict)
    return run_cell(matrix, matrix.cells()[cell_index], Path(out_root) if out_root else None)


# ---------------------------------------------------------------- aggregation

@dataclass
class MatrixResult:
    rows: list[dict]
    summary: list[dict]
    reports: list[dict]

    @property
    def n_failed(self) -> int:
        return sum(r["status"] != "ok" for r in self.rows)

    def mean(self, variant: str, er: float | None, metric: str) -> float:
        for s in self.summary:
            if s["variant"] == variant and s["metric"] == metric and (
                    er is None and s["er"] == "all" or er is not None and s["er"] != "all"
                    and np.isclose(float(s["er"]), er)):
                return float(s["mean"])
        raise KeyError((variant, er, metric))


def summarize(rows: list[dict], metrics: list[str]) -> list[dict]:
    """Mean and sample std over seeds per (variant, ER, metric), plus an all-ER row
    holding the mean over ERs of the per-ER means."""
    out = []
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    ers = list(dict.fromkeys(float(r["er"]) for r in rows))
    for v in variants:
        for metric in metrics:
            per_er = []
            for er in ers:
                cells = [r for r in rows if r["variant"] == v and float(r["er"]) == er]
                ok = [float(r[metric]) for r in cells if r["status"] == "ok" and metric in r]
                mean = float(np.mean(ok)) if ok else float("nan")
                std = float(np.std(ok, ddof=1)) if len(ok) > 1 else 0.0 if ok else float("nan")
                out.append({"variant": v, "er": er, "metric": metric, "mean": mean, "std": std,
                            "n": len(ok), "n_failed": len(cells) - len(ok)})
                per_er.append(mean)
            if len(ers) > 1:
                out.append({"variant": v, "er": "all", "metric": metric,
                            "mean": float(np.mean(per_er)), "std": float(np.std(per_er)),
                            "n": len(ers), "n_failed": 0})
    return out


def _metrics(matrix: ExperimentMatrix, rows: list[dict]) -> list[str]:
    names = matrix.benchmark.domain_names
    metrics = [f"acc_{n}" for n in names] + ["avg_acc"]
    if matrix.analyses.sharpness:
        metrics += [f"sharp_{n}" for n in names] + ["sharp_mean", "sharp_std", "sharp_total"]
    return metrics


def run_matrix(matrix: ExperimentMatrix, out_dir=None) -> MatrixResult:
    """Run every cell (in a process pool when ``workers > 1``) and aggregate in cell order."""
    out_root = Path(out_dir) if out_dir is not None else None
    if out_root is not None:
        out_root.mkdir(parents=True, exist_ok=True)
        write_json(out_root / "config.json", matrix.to_dict())
    cells = matrix.cells()
    if matrix.workers > 1 and len(cells) > 1:
        args = [(matrix.to_dict(), i, str(out_root) if out_root else None)
                for i in range(len(cells))]
        with ProcessPoolExecutor(max_workers=matrix.workers) as pool:
            results = list(pool.map(_worker, args))
    else:
        results = [run_cell(matrix, c, out_root) for c in cells]
    rows = [r for r, _ in results]
    reports = [rep for _, rep in results]
    metrics = _metrics(matrix, rows)
    summary = summarize(rows, metrics)
    if out_root is not None:
        base = ["run_id", "variant", "er", "seed", "status", "error"]
        _write_rows(out_root / "cells.csv", rows,
                    base + metrics + ["best_epoch", "ms_per_batch"])
        _write_rows(out_root / "summary.csv", summary,
                    ["variant", "er", "metric", "mean", "std", "n", "n_failed"])
        write_table(out_root / "table.csv", summary, metrics)
    return MatrixResult(rows, summary, reports)


def write_table(path, summary: list[dict], metrics: list[str]) -> None:
    """Wide table: one row per (variant, ER), one ``mean`` and ``std`` column per metric."""
    keys = list(dict.fromkeys((s["variant"], s["er"]) for s in summary))
    rows = []
    for v, er in keys:
        row = {"variant": v, "er": er}
        for s in summary:
            if s["variant"] == v and s["er"] == er:
                row[s["metric"]] = s["mean"]
                row[f"{s['metric']}_std"] = s["std"]
        rows.append(row)
    cols = ["variant", "er"] + [c for m in metrics for c in (m, f"{m}_std")]
    _write_rows(path, rows, cols)


def ablation_matrix(base: ExperimentMatrix | None = None, er: float = 0.5) -> ExperimentMatrix:
    base = base or ExperimentMatrix.for_optimizers(["dasm"], embedding_rates=(er,))
    variants = [Variant(k, dict(v)) for k, v in ABLATION_VARIANTS.items()]
    return replace(base, variants=variants, embedding_rates=(er,), kind="ablation")


def run_ablation(base: ExperimentMatrix | None = None, er: float = 0.5, out_dir=None) -> MatrixResult:
    return run_matrix(ablation_matrix(base, er), out_dir)


def sweep_matrix(knob: str, base: ExperimentMatrix | None = None, er: float = 0.5) -> ExperimentMatrix:
    if knob not in SWEEP_FIXED:
        raise ValueError(f"unknown sweep knob {knob!r}")
    grid = RHO_GRID if knob == "rho" else TAU_GRID
    base = base or ExperimentMatrix.for_optimizers(["dasm"], embedding_rates=(er,))
    variants = [Variant(f"{knob}={g:g}", {"optimizer": "dasm", knob: g, **SWEEP_FIXED[knob]})
                for g in grid]
    return replace(base, variants=variants, embedding_rates=(er,), kind=f"sweep_{knob}")


def run_sensitivity(base: ExperimentMatrix | None = None, er: float = 0.5, out_dir=None,
                    knobs=("rho", "tau")) -> dict[str, MatrixResult]:
    out = {}
    for knob in knobs:
        sub = None if out_dir is None else Path(out_dir) / f"sweep_{knob}"
        out[knob] = run_matrix(sweep_matrix(knob, base, er), sub)
    return out


# ---------------------------------------------------------------- timing

def timing_report(model_cfg: ModelConfig | None = None, bench: Benchmark | None = None,
                  train_cfg: TrainConfig | None = None, n_batches: int = 200, warmup: int = 20,
                  kinds=("adam", "sam", "dasm"), seed: int = 0) -> dict:
    """ms/batch (mean, std) per optimizer over the same batch stream.

    Steps are interleaved (one step of each optimizer per batch) so slow drifts of
    the machine hit all of them alike. Timing covers both passes and the center
    updates; data preparation is outside the clock.
    """
    bench = bench or gen_feature_benchmark(BenchmarkConfig())
    data = bench.at_er(bench.config.embedding_rates[-1])
    model_cfg = model_cfg or ModelConfig()
    model_cfg = replace(model_cfg, input_dim=bench.config.input_dim)
    base = train_cfg or TrainConfig()
    rng = np.random.default_rng(seed)
    s = data.train
    order = []
    while len(order) < warmup + n_batches:
        order += batch_order(s.d, base.batch_size, rng, base.stratified)
    order = [o for o in order if len(o) == base.batch_size][:warmup + n_batches]
    batches = [LabeledBatch(s.x[i], s.y[i], s.d[i]) for i in order]
    runs = {}
    for k in kinds:
        cfg = _train_config(base, {"optimizer": k}, seed)
        model = EncoderClassifier(replace(model_cfg, seed=seed))
        bank = DomainCenterBank(len(data.domain_names), model_cfg.feature_dim, cfg.mu, cfg.xi)
        runs[k] = (cfg, model, bank, BaseUpdate(model, cfg), [])
    for i, batch in enumerate(batches):
        for k in kinds:
            cfg, model, bank, opt, times = runs[k]
            t0 = time.perf_counter()
            step(model, bank, batch, cfg, opt)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt * 1e3)
    out = {"n_batches": n_batches, "warmup": warmup, "model": model_cfg.to_dict(),
           "batch_size": base.batch_size, "optimizers": {}}
    ref = None
    for k in kinds:
        _, model, _, _, times = runs[k]
        n = len(batches)
        ms = np.asarray(times)
        entry = {"ms_mean": float(ms.mean()), "ms_std": float(ms.std()),
                 "ms_median": float(np.median(ms)),
                 "fwd_per_step": model.passes["forward"] / n,
                 "bwd_per_step": model.passes["backward"] / n}
        out["optimizers"][k] = entry
        if k == kinds[0]:
            ref = entry["ms_mean"]
    for k in kinds:
        out["optimizers"][k]["rel_time"] = out["optimizers"][k]["ms_mean"] / ref
    return out


def write_timing_csv(path, rep: dict) -> None:
    rows = [{"optimizer": k, **v} for k, v in rep["optimizers"].items()]
    _write_rows(path, rows, ["optimizer", "ms_mean", "ms_std", "ms_median", "rel_time",
                             "fwd_per_step", "bwd_per_step"])
