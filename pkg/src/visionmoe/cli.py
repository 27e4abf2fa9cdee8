"""Command-line entry point: ``visionmoe {count,train,sweep,analyze,report}``.

Exit codes: 0 success, 1 user error, 2 verification failure, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .accounting import PAPER_TARGETS, cost_report, count_activated_per_image, format_table
from .analysis.export import FORMATS, export_front, export_stats
from .analysis.plotting import bar_plot
from .analysis.stats import EmptyTraceError, collect_stats, pareto_front
from .analysis.trace import RoutingTrace
from .backbones import PLACEMENTS, PRESETS, build_model, get_preset, model_spec
from .config import ConfigError, RunConfig
from .moe_layer import MoELayerConfig
from .routing import GATE_KINDS, GateKind
from .tensor import set_precision
from .training import TrainingDiverged, make_synthetic, train

EXIT_OK, EXIT_USER, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which is reserved for verification failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(None), help="override the run seed")
    p.add_argument("--threads", type=int, default=d(None), help="BLAS/OpenMP thread limit")
    p.add_argument("--precision", choices=("ref64", "fast32"), default=d(None))
    p.add_argument("--out", default=d(None), help="output directory")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    ap = _Parser(prog="visionmoe", description="Sparse mixture-of-experts vision backbones at desk scale.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("count", parents=[common], help="parameter / FLOP accounting")
    c.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    c.add_argument("--placement", default="none", choices=PLACEMENTS)
    c.add_argument("--experts", type=int, default=8)
    c.add_argument("--topk", type=int, default=None, help="default: 2 for isotropic, 1 for hierarchical")
    c.add_argument("--mlp-ratio", type=float, default=4.0)
    c.add_argument("--gate", default="linear", choices=GATE_KINDS)
    c.add_argument("--resolution", type=int, default=None)
    c.add_argument("--trace", help="routing trace for the per-image activated count")
    c.add_argument("--json", action="store_true", help="print JSON instead of the table")
    c.add_argument("--verify-paper", action="store_true",
                   help="check the published cost rows (those of --preset, if given)")

    t = sub.add_parser("train", parents=[common], help="train one configuration")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--preset")
    t.add_argument("--placement", choices=PLACEMENTS)
    t.add_argument("--experts", type=int)
    t.add_argument("--topk", type=int)
    t.add_argument("--mlp-ratio", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--balance-weight", type=float)

    s = sub.add_parser("sweep", parents=[common], help="train a grid of configurations")
    s.add_argument("--grid", required=True, help='JSON: {"base": {...}, "axes": {"moe.num_experts": [2, 4]}}')
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    a = sub.add_parser("analyze", parents=[common], help="routing statistics and figures from a trace")
    a.add_argument("--trace", required=True, help="trace JSONL file or a run directory")
    a.add_argument("--layer", type=int)
    a.add_argument("--format", default="csv", choices=FORMATS)
    a.add_argument("--experts", type=int, help="number of experts if the trace lacks it")

    r = sub.add_parser("report", parents=[common], help="Pareto front and gain over the dense baseline")
    r.add_argument("--sweep", required=True, help="sweep output directory")
    r.add_argument("--pareto", action="store_true", help="print the Pareto front points")
    r.add_argument("--format", default="csv", choices=FORMATS, help="table format for the front")
    return ap


# -- count --------------------------------------------------------------
def cmd_count(args) -> int:
    if args.verify_paper:
        rows = [t for t in PAPER_TARGETS if args.preset is None or t.preset == args.preset]
        if not rows:
            raise UserError(f"no published cost rows for preset {args.preset!r}")
        results, ok_all = [], True
        for t in rows:
            got, ok = t.check()
            ok_all &= ok
            results.append({"label": t.label, "metric": t.metric, "expected": t.value, "measured": round(got, 4),
                            "rel_tol": t.rel_tol, "ok": ok})
        if args.json:
            print(json.dumps(results, indent=1))
        else:
            w = max(len(r["label"]) for r in results)
            for r in results:
                print(f"{'PASS' if r['ok'] else 'FAIL'}  {r['label']:<{w}}  {r['metric']:<9} "
                      f"expected {r['expected']:>7}  measured {r['measured']:>9.3f}  (tol {r['rel_tol']:.0%})")
        _write_json(args.out, "verify_paper.json", results)
        return EXIT_OK if ok_all else EXIT_VERIFY
    if not args.preset:
        raise UserError("count needs --preset (or --verify-paper)")
    if args.preset not in PRESETS:
        raise UserError(f"unknown preset {args.preset!r}; available: {', '.join(PRESETS)}")
    arch = get_preset(args.preset)
    moe = None
    if args.placement != "none":
        k = args.topk if args.topk is not None else (2 if arch.family == "isotropic" else 1)
        moe = MoELayerConfig(num_experts=args.experts, top_k=k, mlp_ratio=args.mlp_ratio,
                             gate=GateKind(args.gate))
    spec = model_spec(arch, args.placement, moe)
    name = args.preset if moe is None else f"{args.preset}-{moe.num_experts} {args.placement} top{moe.top_k}"
    trace = RoutingTrace.load(args.trace) if args.trace else None
    rep = cost_report(spec, name, args.resolution)
    if trace is not None:
        rep.activated_params_per_image = count_activated_per_image(spec, trace)
    doc = rep.to_dict()
    print(json.dumps(doc, indent=1) if args.json else format_table([rep]))
    _write_json(args.out, "count.json", doc)
    return EXIT_OK


def _write_json(out, name: str, doc) -> None:
    if out:
        path = Path(out) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# -- train / sweep ------------------------------------------------------
def execute_run(cfg: RunConfig, run_dir) -> dict:
    """Train ``cfg`` in ``run_dir`` (config.json, log.jsonl, checkpoints/, traces/, reports/)."""
    run_dir = Path(run_dir)
    for d in ("checkpoints", "traces", "reports"):
        (run_dir / d).mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    set_precision(cfg.train.precision)
    a = cfg.arch_spec()
    if a.num_classes != cfg.data.num_classes:
        raise ConfigError(f"arch has {a.num_classes} classes but data has {cfg.data.num_classes}; "
                          f"set arch.num_classes")
    ds = make_synthetic(cfg.data.num_classes, cfg.data.per_class, a.image_size, cfg.data.seed,
                        cfg.data.test_per_class, cfg.data.noise)
    model = build_model(a, cfg.placement, cfg.moe_config(), seed=cfg.seed, gate_skew=cfg.gate_skew)
    res = train(model, ds, cfg.train, run_dir)
    rep = cost_report(model.spec, cfg.tag())
    ev = res.final_eval
    result = {
        "hash": cfg.config_hash(), "tag": cfg.tag(), "preset": cfg.preset, "placement": cfg.placement,
        "num_experts": 1 if cfg.placement == "none" else cfg.resolved_moe()["num_experts"],
        "top_k": 1 if cfg.placement == "none" else cfg.resolved_moe()["top_k"],
        "mlp_ratio": (cfg.resolved_moe() or {}).get("mlp_ratio", a.mlp_ratio),
        "gate": (cfg.resolved_moe() or {}).get("gate", {}).get("kind", "-"),
        "seed": cfg.seed, "steps": res.steps_done, "status": "ok",
        "test_acc": ev.accuracy, "aux_loss": ev.aux_loss,
        "total_params": rep.total_params, "activated_params_per_token": rep.activated_params_per_token,
        "flops": rep.flops_per_image, "usage": {str(k): v for k, v in ev.usage.items()},
    }
    if ev.trace is not None and len(ev.trace):
        result["activated_params_per_image"] = count_activated_per_image(model.spec, ev.trace)
    # result.json is written last: its presence marks the run complete
    _write_json(run_dir / "reports", "result.json", result)
    return result


def _train_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    up: dict = {}
    if args.preset:
        up["preset"] = args.preset
        if args.preset not in PRESETS:
            raise UserError(f"unknown preset {args.preset!r}; available: {', '.join(PRESETS)}")
    if args.placement:
        up["placement"] = args.placement
    for flag, key in (("experts", "moe.num_experts"), ("topk", "moe.top_k"), ("mlp_ratio", "moe.mlp_ratio"),
                      ("steps", "train.steps"), ("balance_weight", "train.balance_weight")):
        if getattr(args, flag) is not None:
            up[key] = getattr(args, flag)
    if args.steps is not None and cfg.train.warmup_steps > args.steps:
        up["train.warmup_steps"] = args.steps
    if args.seed is not None:
        up["seed"] = args.seed
    if args.precision:
        up["train.precision"] = args.precision
    return cfg.with_values(up) if up else cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    run_dir = Path(args.out) if args.out else Path("runs") / cfg.config_hash()
    try:
        result = execute_run(cfg, run_dir)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({k: result[k] for k in ("hash", "tag", "test_acc", "aux_loss",
                                               "activated_params_per_token")}, indent=1))
    print(f"run directory: {run_dir}")
    return EXIT_OK


SWEEP_COLUMNS = ("hash", "tag", "preset", "placement", "num_experts", "top_k", "mlp_ratio", "gate", "seed",
                 "status", "test_acc", "aux_loss", "activated_params_per_token", "total_params", "flops", "error")


def expand_grid(doc: dict, seed: int | None = None, precision: str | None = None) -> list[RunConfig]:
    """All distinct cells of the grid, in axis order; invalid combinations are rejected up front."""
    if not isinstance(doc, dict):
        raise ConfigError("grid must be a JSON object")
    unknown = set(doc) - {"base", "axes"}
    if unknown:
        raise ConfigError(f"unknown grid key(s): {', '.join(sorted(unknown))}; allowed: axes, base")
    base = RunConfig.from_dict(doc.get("base", {}))
    over: dict = {}
    if seed is not None:
        over["seed"] = seed
    if precision:
        over["train.precision"] = precision
    if over:
        base = base.with_values(over)
    axes = doc.get("axes", {})
    keys = list(axes)
    for k in keys:
        if not isinstance(axes[k], list) or not axes[k]:
            raise ConfigError(f"grid axis {k!r} must be a non-empty list")
    cells, seen = [], set()
    for values in itertools.product(*(axes[k] for k in keys)):
        cfg = base.with_values(dict(zip(keys, values)))
        h = cfg.config_hash()
        if h not in seen:
            seen.add(h)
            cells.append(cfg)
    return cells


def _run_cell(cfg_doc: dict, run_dir: str, threads: int | None) -> dict:
    cfg = RunConfig.from_dict(cfg_doc)
    try:
        with _thread_limit(threads):
            return execute_run(cfg, run_dir)
    except Exception as exc:  # isolate the failure to this cell
        (Path(run_dir) / "reports").mkdir(parents=True, exist_ok=True)
        (Path(run_dir) / "reports" / "error.txt").write_text(traceback.format_exc())
        return {"hash": cfg.config_hash(), "tag": cfg.tag(), "status": "failed", "error": str(exc)}


def run_sweep(grid_doc: dict, out_dir, jobs: int = 1, seed: int | None = None, precision: str | None = None,
              threads: int | None = None) -> dict:
    """Train every unfinished cell into ``out_dir/runs/<hash>`` and write ``out_dir/sweep.csv``."""
    out = Path(out_dir)
    cells = expand_grid(grid_doc, seed, precision)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.json").write_text(json.dumps(grid_doc, indent=1, sort_keys=True) + "\n")
    results: dict[str, dict] = {}
    todo = []
    for cfg in cells:
        h = cfg.config_hash()
        done = out / "runs" / h / "reports" / "result.json"
        if done.exists():
            results[h] = json.loads(done.read_text())
        else:
            todo.append(cfg)
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_run_cell, c.to_dict(), str(out / "runs" / c.config_hash()), threads) for c in todo]
            for c, f in zip(todo, futs):
                results[c.config_hash()] = f.result()
    else:
        for c in todo:
            results[c.config_hash()] = _run_cell(c.to_dict(), str(out / "runs" / c.config_hash()), None)
    rows = [results[c.config_hash()] for c in cells]
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in SWEEP_COLUMNS})
    return {"cells": len(cells), "trained": len(todo), "failed": sum(r.get("status") != "ok" for r in rows),
            "rows": rows}


def cmd_sweep(args) -> int:
    try:
        doc = json.loads(Path(args.grid).read_text())
    except FileNotFoundError:
        raise UserError(f"grid file not found: {args.grid}")
    except json.JSONDecodeError as exc:
        raise UserError(f"grid file {args.grid} is not valid JSON: {exc}")
    out = Path(args.out or "sweep")
    summary = run_sweep(doc, out, args.jobs, args.seed, args.precision, args.threads)
    print(f"{summary['cells']} cells, {summary['trained']} trained, {summary['failed']} failed; "
          f"table: {out / 'sweep.csv'}")
    return EXIT_RUNTIME if summary["failed"] else EXIT_OK


# -- analyze / report ---------------------------------------------------
def cmd_analyze(args) -> int:
    path = Path(args.trace)
    if path.is_dir():
        path = path / "traces" / "test_final.jsonl"
    if not path.exists():
        raise UserError(f"trace not found: {path}")
    trace = RoutingTrace.load(path)
    try:
        stats = collect_stats(trace, num_experts=args.experts)
    except EmptyTraceError as exc:
        raise UserError(str(exc))
    if args.layer is not None and args.layer not in stats.layers:
        raise UserError(f"layer {args.layer} not in trace (available: {stats.layer_ids()})")
    if args.out:
        out = Path(args.out)
    elif path.parent.name == "traces":
        out = path.parent.parent / "reports"
    else:
        out = Path("analysis")
    files = export_stats(stats, out, args.format, args.layer)
    for f in files:
        print(f)
    return EXIT_OK


def _read_sweep(sweep_dir: Path) -> list[dict]:
    runs = sweep_dir / "runs"
    if not runs.is_dir():
        raise UserError(f"{sweep_dir} has no runs/ directory; is it a sweep output?")
    rows = []
    for res in sorted(runs.glob("*/reports/result.json")):
        r = json.loads(res.read_text())
        if r.get("status") == "ok":
            rows.append(r)
    if not rows:
        raise UserError(f"no completed runs under {runs}")
    return rows


def improvement_table(rows: list[dict]) -> list[dict]:
    """Accuracy of every run minus the mean accuracy of its backbone's dense runs."""
    base: dict[str, list[float]] = {}
    for r in rows:
        if r["placement"] == "none":
            base.setdefault(r["preset"], []).append(r["test_acc"])
    out = []
    for r in rows:
        if r["preset"] not in base:
            raise UserError(f"sweep has no dense (placement 'none') baseline for backbone {r['preset']!r}")
        b = sum(base[r["preset"]]) / len(base[r["preset"]])
        out.append({"backbone": r["preset"], "tag": r["tag"], "hash": r["hash"], "seed": r["seed"],
                    "baseline_acc": b, "test_acc": r["test_acc"], "delta": r["test_acc"] - b,
                    "activated_params_per_token": r["activated_params_per_token"]})
    return out


def run_report(sweep_dir, out_dir=None, fmt: str = "csv") -> dict:
    sweep_dir = Path(sweep_dir)
    out = Path(out_dir) if out_dir else sweep_dir / "reports"
    rows = _read_sweep(sweep_dir)
    deltas = improvement_table(rows)
    out.mkdir(parents=True, exist_ok=True)
    cols = ("backbone", "tag", "hash", "seed", "baseline_acc", "test_acc", "delta", "activated_params_per_token")
    with open(out / "improvement.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for d in deltas:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in d.items()})
    bar_plot([f"{d['tag']}/s{d['seed']}" for d in deltas], [d["delta"] for d in deltas], out / "improvement.svg",
             ylabel="accuracy gain over dense", title="MoE minus dense baseline")
    points = [(r["activated_params_per_token"], r["test_acc"], r["tag"] + f"/s{r['seed']}") for r in rows]
    front = pareto_front(points)
    if fmt != "svg":
        export_front(points, front, out, fmt)
    export_front(points, front, out, "svg")
    return {"deltas": deltas, "points": points, "front": front, "out": out}


def cmd_report(args) -> int:
    rep = run_report(args.sweep, args.out, args.format)
    w = max(len(d["tag"]) for d in rep["deltas"])
    for d in rep["deltas"]:
        print(f"{d['tag']:<{w}}  seed {d['seed']:<3} acc {d['test_acc']:.4f}  delta {d['delta']:+.4f}")
    if args.pareto:
        print("pareto front (activated params per token, accuracy):")
        for p in rep["front"]:
            print(f"  {p[2]:<{w + 4}}  {p[0]:>12,}  {p[1]:.4f}")
    print(f"written to {rep['out']}")
    return EXIT_OK


# -- entry point --------------------------------------------------------
class _thread_limit:
    def __init__(self, n: int | None):
        self.n = n
        self.ctl = None

    def __enter__(self):
        if self.n:
            from threadpoolctl import threadpool_limits
            self.ctl = threadpool_limits(limits=self.n)
        return self

    def __exit__(self, *exc):
        if self.ctl is not None:
            self.ctl.restore_original_limits()
        return False


COMMANDS = {"count": cmd_count, "train": cmd_train, "sweep": cmd_sweep, "analyze": cmd_analyze,
            "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is not None and args.threads < 1:
        print("visionmoe: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USER
    if args.precision:
        set_precision(args.precision)
    try:
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except (UserError, ValueError) as exc:
        print(f"visionmoe: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except OSError as exc:
        print(f"visionmoe: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - last-resort diagnostic
        traceback.print_exc()
        print(f"visionmoe: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
