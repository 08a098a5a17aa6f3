"""Command-line entry point.

Commands: eval, optimize, sweep, search, reproduce, oracle-check.  Every
command that writes files records a run in ``manifest.json`` of its output
directory.  Exit codes: 2 parse errors, 3 numerical failures, 4 budget
exhausted before completion.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import circuit as cm
from . import gaussian as gs
from . import golden
from .metrics import InvalidBehaviorError, key_rate
from .optimize import OptimizationSettings, efficiency_sweep, optimize_binning, optimize_circuit

log = logging.getLogger("diqkd_forge")

EXIT_PARSE, EXIT_NUMERICAL, EXIT_BUDGET = 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


class ParseError(Exception):
    pass


class BudgetExhausted(Exception):
    pass


# -- helpers -----------------------------------------------------------------


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir: Path, args, timings: dict, extra: dict | None = None) -> Path:
    """Append a run record to the directory's single manifest file."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    runs = json.loads(path.read_text()) if path.exists() else []
    runs.append({
        "command": args.command,
        "argv": sys.argv[1:],
        "config": args.config,
        "seed": args.seed,
        "output_directory": str(out_dir),
        "version": version_string(),
        "timings": timings,
        **(extra or {}),
    })
    path.write_text(json.dumps(runs, indent=2) + "\n")
    return path


def load_circuit(ref: str) -> cm.CircuitSpec:
    if ref in cm.PRESETS:
        return cm.preset(ref)
    path = Path(ref)
    if not path.exists():
        raise ParseError(f"{ref!r} is neither a preset ({', '.join(cm.PRESETS)}) nor a file")
    return cm.parse(path.read_text())


def load_params(ref: str | None, golden_ref: str | None):
    """Parameter vector and flip probability from a file or a bundled table row.

    Files hold a YAML list of numbers, or a mapping with ``params`` and
    optional ``noise_p``.  ``golden_ref`` reads ``TABLE:LOSS`` (for example
    ``eff1:0.0``).
    """
    if golden_ref:
        try:
            table, loss = golden_ref.split(":")
            row = golden.row_at(table, float(loss))
        except (ValueError, KeyError) as exc:
            raise ParseError(f"bad golden reference {golden_ref!r}: {exc}") from None
        return row.phi[:-1], float(row.phi[-1])
    if ref is None:
        return None, None
    try:
        doc = yaml.safe_load(Path(ref).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ParseError(f"cannot read parameters from {ref}: {exc}") from None
    if isinstance(doc, dict):
        if "params" not in doc:
            raise ParseError(f"{ref}: parameter mapping needs a 'params' list")
        values, noise = doc["params"], doc.get("noise_p")
    else:
        values, noise = doc, None
    try:
        values = np.asarray(values, dtype=float).ravel()
    except (TypeError, ValueError):
        raise ParseError(f"{ref}: parameters must be numbers") from None
    return values, None if noise is None else float(noise)


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"config {path} must be a mapping")
    return doc


def settings_from(conf: dict, args) -> OptimizationSettings:
    fields = {f.name for f in dataclasses.fields(OptimizationSettings)}
    raw = conf.get("optimizer", {}) or {}
    unknown = set(raw) - fields
    if unknown:
        raise ParseError(f"unknown optimizer settings: {sorted(unknown)}")
    raw = dict(raw)
    if getattr(args, "restarts", None):
        raw["restarts"] = args.restarts
    if getattr(args, "max_iterations", None):
        raw["max_iterations"] = args.max_iterations
    raw.setdefault("jobs", args.jobs)
    try:
        return OptimizationSettings(**raw)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"invalid optimizer settings: {exc}") from None


def fmt(x: float) -> str:
    return f"{x:.17g}"


def out_dir(args) -> Path:
    return Path(args.out or ".")


# -- commands ----------------------------------------------------------------


def cmd_eval(args) -> int:
    circuit = load_circuit(args.circuit)
    phi, noise = load_params(args.params, args.golden)
    phi = np.zeros(circuit.n_params) if phi is None else phi
    if phi.size != circuit.n_params:
        raise ParseError(f"circuit has {circuit.n_params} free slots, parameters give {phi.size}")
    p = args.noise_p if args.noise_p is not None else (noise or 0.0)
    det = gs.DetectorModel(args.efficiency, args.dark_counts)
    report = key_rate(cm.evaluate(circuit, det, phi), p, flip=args.flip)
    doc = report.to_dict()
    doc["H_cond"] = doc.pop("H_AB")
    print(json.dumps(doc, indent=2))
    return 0


def _write_optimum(path: Path, res) -> None:
    rep = res.report()
    k = res.circuit.n_params
    header = ["efficiency", "key_rate", "extended_rate", "S", "noise_p"] + [f"param_{i + 1}" for i in range(k)]
    vals = [res.efficiency, rep.rate, rep.extended_rate, rep.S, rep.noise_p] + list(res.phi[:-1])
    path.write_text(",".join(header) + "\n" + ",".join(fmt(v) for v in vals) + "\n")


def cmd_optimize(args) -> int:
    t0 = time.perf_counter()
    conf = load_config(args.config)
    circuit = load_circuit(args.circuit or conf.get("circuit", "robust_fig3"))
    settings = settings_from(conf, args)
    det = gs.DetectorModel(args.efficiency, args.dark_counts)
    if args.binning_search:
        res = optimize_binning(circuit, det, settings, rng=args.seed)
    else:
        res = optimize_circuit(circuit, det, settings=settings, rng=args.seed)
    d = out_dir(args)
    d.mkdir(parents=True, exist_ok=True)
    _write_optimum(d / "optimum.csv", res)
    (d / "optimum_circuit.yaml").write_text(cm.serialize(res.circuit.bind(res.phi[:-1])))
    write_manifest(d, args, {"total_s": time.perf_counter() - t0}, {"objective": res.objective})
    print(json.dumps({"objective": res.objective, **res.report().to_dict()}, indent=2))
    return 0


def cmd_sweep(args) -> int:
    t0 = time.perf_counter()
    conf = load_config(args.config)
    circuit = load_circuit(args.circuit or conf.get("circuit", "robust_fig3"))
    settings = settings_from(conf, args)
    phi, noise = load_params(args.params, args.golden)
    start = None if phi is None else np.append(phi, noise or 0.0)
    det = gs.DetectorModel(1.0, args.dark_counts)
    first = None
    if args.binning_search and start is None:
        first = optimize_binning(circuit, det, settings, rng=args.seed)
        circuit = first.circuit
    schedule = efficiency_sweep(circuit, args.threshold, args.dark_counts, settings, rng=args.seed,
                                start=start, start_result=first, max_steps=args.max_steps)
    d = out_dir(args)
    d.mkdir(parents=True, exist_ok=True)
    (d / "sweep.csv").write_text(schedule.to_csv())
    write_manifest(d, args, {"total_s": time.perf_counter() - t0},
                   {"eta_min": schedule.eta_min, "diagnostic": schedule.diagnostic})
    print(json.dumps({"eta_min": schedule.eta_min, "rows": len(schedule.rows),
                      "diagnostic": schedule.diagnostic}))
    if schedule.budget_exhausted:
        raise BudgetExhausted(f"sweep stopped after {args.max_steps} steps")
    return 0


def cmd_search(args) -> int:
    from .search import PPOParams, train

    t0 = time.perf_counter()
    conf = load_config(args.config)
    fields = {f.name for f in dataclasses.fields(PPOParams)}
    raw = conf.get("ppo", {}) or {}
    if set(raw) - fields:
        raise ParseError(f"unknown PPO settings: {sorted(set(raw) - fields)}")
    try:
        params = PPOParams(**raw)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"invalid PPO settings: {exc}") from None
    settings = settings_from(conf, args)
    task = args.task or conf.get("task", "lossless_rate")
    n_modes = args.modes or int(conf.get("modes", 3))
    budget = args.budget if args.budget is not None else int(conf.get("budget", 0))
    d = out_dir(args)
    d.mkdir(parents=True, exist_ok=True)
    result = train(task, n_modes, budget, params, settings, seed=args.seed,
                   checkpoint=str(d / "checkpoint.pt") if budget else None)
    (d / "metrics.csv").write_text(result.metrics_csv())
    paths = result.write_archive(str(d / "archive"))
    write_manifest(d, args, {"total_s": time.perf_counter() - t0},
                   {"steps": result.steps, "archive": len(paths)})
    best = max((e.objective for e in result.archive), default=None)
    print(json.dumps({"steps": result.steps, "archive": len(paths), "best_objective": best}))
    return 0


def reproduce_table(table: str) -> list[dict]:
    circuit = cm.preset(golden.TABLES[table])
    rows = []
    for row in golden.load_table(table):
        det = gs.DetectorModel(row.efficiency)
        rate = key_rate(cm.evaluate(circuit, det, row.phi[:-1]), row.phi[-1]).rate
        diff = abs(rate - row.key_rate)
        rows.append({"loss": row.loss, "key_rate_table": row.key_rate, "key_rate": rate,
                     "abs_diff": diff, "rel_diff": diff / abs(row.key_rate),
                     "pass": golden.tolerance_ok(rate, row.key_rate)})
    return rows


def figure_curves(settings: OptimizationSettings, seed: int, threshold: float = 1e-9,
                  dark_count: float = 0.0) -> dict:
    """Rate-vs-efficiency sweeps of the three built-in circuits."""
    curves = {}
    for table in ("eff1", "robust"):
        circuit = cm.preset(golden.TABLES[table])
        start = golden.load_table(table)[0].phi
        curves[circuit.name] = efficiency_sweep(circuit, threshold, dark_count, settings,
                                                rng=seed, start=start)
    ref = cm.preset("reference_fig1")
    first = optimize_binning(ref, gs.DetectorModel(1.0, dark_count), settings, rng=seed)
    curves[ref.name] = efficiency_sweep(first.circuit, threshold, dark_count, settings,
                                        rng=seed, start_result=first)
    return curves


def cmd_reproduce(args) -> int:
    t0 = time.perf_counter()
    d = out_dir(args)
    d.mkdir(parents=True, exist_ok=True)
    if args.table in golden.TABLES:
        rows = reproduce_table(args.table)
        cols = ["loss", "key_rate_table", "key_rate", "abs_diff", "rel_diff", "pass"]
        lines = [",".join(cols)]
        for r in rows:
            lines.append(",".join(fmt(r[c]) if c != "pass" else str(r[c]).lower() for c in cols))
        (d / f"reproduce_{args.table}.csv").write_text("\n".join(lines) + "\n")
        for r in rows:
            status = "PASS" if r["pass"] else "FAIL"
            print(f"{status} loss={r['loss']:<8} table={r['key_rate_table']:.10g} "
                  f"computed={r['key_rate']:.10g} diff={r['abs_diff']:.3g}")
        n_fail = sum(not r["pass"] for r in rows)
        print(f"{len(rows) - n_fail}/{len(rows)} rows within tolerance")
        extra = {"rows": len(rows), "failed": n_fail}
    else:
        settings = settings_from(load_config(args.config), args)
        curves = figure_curves(settings, args.seed, args.threshold, args.dark_counts)
        for name, sched in curves.items():
            (d / f"curve_{name}.csv").write_text(sched.to_csv())
            print(f"{name}: eta_min={sched.eta_min} rows={len(sched.rows)}")
        extra = {name: s.eta_min for name, s in curves.items()}
    write_manifest(d, args, {"total_s": time.perf_counter() - t0}, extra)
    return 0


def cmd_oracle_check(args) -> int:
    from .oracle_check import run_checks

    t0 = time.perf_counter()
    summary = run_checks(args.count, seed=args.seed)
    print(json.dumps(summary, indent=2))
    if args.out:
        d = out_dir(args)
        d.mkdir(parents=True, exist_ok=True)
        (d / "oracle_check.json").write_text(json.dumps(summary, indent=2) + "\n")
        write_manifest(d, args, {"total_s": time.perf_counter() - t0}, {"max_diff": summary["max_diff"]})
    return 0 if summary["max_diff"] <= args.tol else EXIT_NUMERICAL


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--config", default=None, help="YAML configuration file")

    parser = argparse.ArgumentParser(prog="diqkd-forge", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def detector_flags(p, efficiency=True):
        if efficiency:
            p.add_argument("--efficiency", type=float, default=1.0)
        p.add_argument("--dark-counts", type=float, default=0.0)

    def optimizer_flags(p):
        p.add_argument("--restarts", type=int, default=None)
        p.add_argument("--max-iterations", type=int, default=None)

    p = sub.add_parser("eval", parents=[common], help="evaluate a circuit at fixed parameters")
    p.add_argument("circuit", help="preset name or circuit file")
    p.add_argument("params", nargs="?", default=None, help="parameter file")
    p.add_argument("--golden", default=None, help="bundled table row, TABLE:LOSS")
    p.add_argument("--noise-p", type=float, default=None)
    p.add_argument("--flip", choices=("bob", "alice"), default="bob",
                   help="party whose key bit is flipped (bob: H(B'|A), the table convention)")
    detector_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("optimize", parents=[common], help="optimize circuit parameters")
    p.add_argument("circuit", nargs="?", default=None)
    p.add_argument("--binning-search", action="store_true")
    detector_flags(p)
    optimizer_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("sweep", parents=[common], help="lower the efficiency until the rate drops")
    p.add_argument("circuit", nargs="?", default=None)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--params", default=None, help="warm-start parameter file")
    p.add_argument("--golden", default=None, help="warm start from a bundled row, TABLE:LOSS")
    p.add_argument("--binning-search", action="store_true")
    p.add_argument("--max-steps", type=int, default=None)
    detector_flags(p, efficiency=False)
    optimizer_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("search", parents=[common], help="PPO circuit search")
    p.add_argument("--task", choices=("lossless_rate", "loss_tolerance"), default=None)
    p.add_argument("--modes", type=int, default=None)
    p.add_argument("--budget", type=int, default=None, help="environment steps")
    optimizer_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("reproduce", parents=[common], help="re-evaluate the bundled tables")
    p.add_argument("table", choices=("eff1", "robust", "figure4"))
    p.add_argument("--threshold", type=float, default=1e-9)
    detector_flags(p, efficiency=False)
    optimizer_flags(p)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("oracle-check", parents=[common], help="compare against the Fock simulator")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def configure_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("DIQKD_FORGE_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, cm.CircuitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (gs.SimulationError, InvalidBehaviorError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except BudgetExhausted as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
