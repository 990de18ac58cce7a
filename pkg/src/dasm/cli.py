"""Command line entry point: ``dasm <verb> [options]``.

Verbs: gen, train, matrix, ablate, sweep, analyze, time. Outputs go to ``--out``
or, when omitted, to ``$DASM_OUT/<verb>`` (``./runs/<verb>`` if unset).
Exit codes: 0 success, 1 configuration error, 2 some cells failed, 3 internal error.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from dataclasses import asdict, replace
from pathlib import Path

from . import harness
from .harness import Analyses, ExperimentMatrix, Variant, output_root, write_json
from .model import ModelConfig, load_checkpoint
from .optim import KINDS, TrainConfig
from .synthdata import BenchmarkConfig, load_benchmark, save_benchmark

EXIT_OK, EXIT_CONFIG, EXIT_CELLS, EXIT_INTERNAL = 0, 1, 2, 3


class ConfigError(Exception):
    pass


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v]


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v]


def _strs(s: str) -> list[str]:
    return [v for v in s.split(",") if v]


def load_document(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


TRAIN_FLAGS = ("lr", "rho", "tau", "mu", "xi", "batch_size", "epochs", "patience", "base")


def build_matrix(args, doc: dict, default_optimizers=("adam", "sam", "dasm")) -> ExperimentMatrix:
    """Merge a JSON document and CLI flags into a fully materialized matrix."""
    allowed = {"kind", "variants", "optimizers", "embedding_rates", "seeds", "benchmark",
               "model", "train", "analyses", "workers", "schema"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        bench = dict(doc.get("benchmark", {}))
        harness.strict_fields(BenchmarkConfig, bench, "benchmark")
        if getattr(args, "n_per_cell", None):
            bench["n_per_cell"] = args.n_per_cell
        if getattr(args, "bench_seed", None) is not None:
            bench["seed"] = args.bench_seed
        bench_cfg = BenchmarkConfig.from_dict(bench)
        model = dict(doc.get("model", {}))
        harness.strict_fields(ModelConfig, model, "model")
        if getattr(args, "hidden", None):
            model["hidden"] = _ints(args.hidden)
        train = dict(doc.get("train", {}))
        harness.strict_fields(TrainConfig, train, "train")
        for k in TRAIN_FLAGS:
            v = getattr(args, k, None)
            if v is not None:
                train[k] = v
        analyses = dict(doc.get("analyses", {}))
        harness.strict_fields(Analyses, analyses, "analyses")
        for k in ("sharpness", "pad", "landscape", "hessian", "features"):
            if getattr(args, k, False):
                analyses[k] = True
        if "variants" in doc:
            variants = [Variant(**v) for v in doc["variants"]]
        else:
            opts = doc.get("optimizers", list(default_optimizers))
            if getattr(args, "optimizers", None):
                opts = _strs(args.optimizers)
            bad = [o for o in opts if o not in KINDS]
            if bad:
                raise ConfigError(f"unknown optimizers {bad}; choose from {KINDS}")
            variants = [Variant(o, {"optimizer": o}) for o in opts]
        ers = doc.get("embedding_rates", list(bench_cfg.embedding_rates))
        if getattr(args, "ers", None):
            ers = _floats(args.ers)
        seeds = doc.get("seeds", [0, 1, 2])
        if getattr(args, "seeds", None):
            seeds = _ints(args.seeds)
        workers = getattr(args, "workers", None) or doc.get("workers", 1)
        return ExperimentMatrix(variants, tuple(ers), tuple(seeds), bench_cfg,
                                ModelConfig(**model), TrainConfig(**train), Analyses(**analyses),
                                int(workers), doc.get("kind", "matrix"))
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def _out(args, verb: str) -> Path:
    return Path(args.out) if args.out else output_root() / verb


def _report(result, out: Path) -> int:
    ok = len(result.rows) - result.n_failed
    print(f"{ok}/{len(result.rows)} cells ok; outputs in {out}")
    for r in result.rows:
        if r["status"] != "ok":
            print(f"  FAILED {r['run_id']}: {r['error']}")
    return EXIT_CELLS if result.n_failed else EXIT_OK


# ---------------------------------------------------------------- verbs

def cmd_gen(args) -> int:
    doc = load_document(args.config)
    doc = doc.get("benchmark", doc)
    try:
        harness.strict_fields(BenchmarkConfig, doc, "benchmark")
        if args.n_per_cell:
            doc["n_per_cell"] = args.n_per_cell
        if args.bench_seed is not None:
            doc["seed"] = args.bench_seed
        cfg = BenchmarkConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    from .synthdata import gen_feature_benchmark
    out = _out(args, "gen")
    sums = save_benchmark(gen_feature_benchmark(cfg), out, csv_mirror=not args.no_csv)
    print(f"benchmark written to {out}")
    for name, digest in sums.items():
        print(f"  {name} sha256={digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_document(args.config)
    if args.optimizer:
        args.optimizers = args.optimizer
    matrix = build_matrix(args, doc, default_optimizers=("dasm",))
    er = args.er if args.er is not None else matrix.embedding_rates[-1]
    seed = args.seed if args.seed is not None else matrix.seeds[0]
    try:
        matrix = replace(matrix, variants=matrix.variants[:1], embedding_rates=(er,),
                         seeds=(seed,))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out(args, "train")
    result = harness.run_matrix(matrix, out)
    row = result.rows[0]
    if row["status"] == "ok":
        print(f"avg test accuracy {row['avg_acc']:.4f} (best epoch {row['best_epoch']})")
    return _report(result, out)


def cmd_matrix(args) -> int:
    matrix = build_matrix(args, load_document(args.config))
    out = _out(args, "matrix")
    return _report(harness.run_matrix(matrix, out), out)


def cmd_ablate(args) -> int:
    base = build_matrix(args, load_document(args.config), default_optimizers=("dasm",))
    out = _out(args, "ablate")
    return _report(harness.run_ablation(base, args.er, out), out)


def cmd_sweep(args) -> int:
    base = build_matrix(args, load_document(args.config), default_optimizers=("dasm",))
    out = _out(args, "sweep")
    knobs = ("rho", "tau") if args.knob == "both" else (args.knob,)
    results = harness.run_sensitivity(base, args.er, out, knobs)
    codes = [_report(r, out / f"sweep_{k}") for k, r in results.items()]
    return max(codes)


def cmd_analyze(args) -> int:
    try:
        model, header, _ = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}") from exc
    if args.data:
        bench = load_benchmark(args.data)
    else:
        doc = load_document(args.config)
        from .synthdata import gen_feature_benchmark
        bench = gen_feature_benchmark(BenchmarkConfig.from_dict(doc.get("benchmark", {})))
    try:
        data = bench.at_er(args.er)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    opts = Analyses(sharpness=args.sharpness, pad=args.pad, landscape=args.landscape,
                    hessian=args.hessian, features=args.features, seed=args.analysis_seed,
                    landscape_grid=args.grid, sharpness_m=args.m, sharpness_rho=args.sharpness_rho)
    if not any((opts.sharpness, opts.pad, opts.landscape, opts.hessian, opts.features)):
        opts = replace(opts, sharpness=True, pad=True, landscape=True, hessian=True, features=True)
    out = _out(args, "analyze")
    out.mkdir(parents=True, exist_ok=True)
    res = harness.run_analyses(model, data, opts, out, args.tag)
    write_json(out / "analysis.json", {"checkpoint": str(args.checkpoint), "er": args.er,
                                      "options": asdict(opts), "step": header.get("step"),
                                      "results": res})
    print(f"analysis outputs in {out}")
    return EXIT_OK


def cmd_time(args) -> int:
    matrix = build_matrix(args, load_document(args.config))
    from .synthdata import gen_feature_benchmark
    bench = gen_feature_benchmark(matrix.benchmark)
    rep = harness.timing_report(matrix.model, bench, matrix.train, args.batches, args.warmup)
    out = _out(args, "time")
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "timing.json", rep)
    harness.write_timing_csv(out / "timing.csv", rep)
    for k, v in rep["optimizers"].items():
        print(f"{k:5s} {v['ms_mean']:8.3f} +- {v['ms_std']:.3f} ms/batch  "
              f"rel {v['rel_time']:.2f}x  fwd/bwd {v['fwd_per_step']:.0f}/{v['bwd_per_step']:.0f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, matrix_flags: bool = True) -> None:
    p.add_argument("--config", help="JSON experiment document")
    p.add_argument("--out", help="output directory (default: $DASM_OUT/<verb>)")
    p.add_argument("--n-per-cell", dest="n_per_cell", type=int)
    p.add_argument("--bench-seed", dest="bench_seed", type=int)
    if not matrix_flags:
        return
    p.add_argument("--optimizers", help="comma list from adam,erm,sam,dasm")
    p.add_argument("--ers", help="comma list of embedding rates")
    p.add_argument("--seeds", help="comma list of seeds")
    p.add_argument("--workers", type=int)
    p.add_argument("--hidden", help="comma list of hidden widths")
    for k in TRAIN_FLAGS:
        typ = str if k == "base" else int if k in ("batch_size", "epochs", "patience") else float
        p.add_argument(f"--{k.replace('_', '-')}", dest=k, type=typ)
    for k in ("sharpness", "pad", "landscape", "hessian", "features"):
        p.add_argument(f"--{k}", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dasm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen", help="generate and save the synthetic benchmark")
    _common(p, matrix_flags=False)
    p.add_argument("--no-csv", action="store_true", help="skip the CSV mirror")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--optimizer", choices=KINDS)
    p.add_argument("--er", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("matrix", help="optimizer x ER x seed matrix")
    _common(p)
    p.set_defaults(fn=cmd_matrix)

    p = sub.add_parser("ablate", help="component ablation at one ER")
    _common(p)
    p.add_argument("--er", type=float, default=0.5)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep", help="rho / tau sensitivity sweeps")
    _common(p)
    p.add_argument("--er", type=float, default=0.5)
    p.add_argument("--knob", choices=("rho", "tau", "both"), default="both")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("analyze", help="diagnostics for a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="benchmark directory written by `gen`")
    p.add_argument("--config", help="JSON document whose benchmark section is regenerated")
    p.add_argument("--out")
    p.add_argument("--er", type=float, default=0.5)
    p.add_argument("--tag", default="model")
    p.add_argument("--grid", type=int, default=41)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--sharpness-rho", dest="sharpness_rho", type=float, default=0.05)
    p.add_argument("--analysis-seed", dest="analysis_seed", type=int, default=0)
    for k in ("sharpness", "pad", "landscape", "hessian", "features"):
        p.add_argument(f"--{k}", action="store_true")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("time", help="ms/batch and pass counts for adam, sam, dasm")
    _common(p)
    p.add_argument("--batches", type=int, default=200)
    p.add_argument("--warmup", type=int, default=20)
    p.set_defaults(fn=cmd_time)
    return ap


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:  # anything else is our bug
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
