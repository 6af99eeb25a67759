"""Command-line entry point: ``run``, ``gradcheck`` and ``gen-data``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, parse_config, parse_value, stream
from .data import generate_synthetic_benchmark, save_csv_dataset
from .fed import ExperimentError, run_experiment
from .gradcheck import run_gradcheck
from .losses import VARIANTS

OUT_ENV = "PROMPTFCL_OUT"


def _fail(kind: str, message: str, code: int = 1) -> int:
    print(json.dumps({"error": kind, "message": message}, sort_keys=True), file=sys.stderr)
    return code


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(value.strip())
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def _output_root(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(cfg.output_dir)


def check_report(report: dict) -> list:
    """Post-run assertions; returns a list of violated invariants (empty when all hold)."""
    problems = []
    if not report["complete"]:
        problems.append("run stopped before the last task stage")
    for t, row in enumerate(report["accuracy_matrix"], start=1):
        if len(row) != t or any(not 0.0 <= a <= 1.0 for a in row):
            problems.append(f"accuracy row {t} malformed: {row}")
    sizes = {}
    for tr in report["traces"]:
        if tr["upload_bytes"]:
            sizes.setdefault(tr["task"], set()).add(tr["upload_bytes"])
    for task, s in sorted(sizes.items()):
        if len(s) != 1:
            problems.append(f"task {task}: client payload size varies across rounds: {sorted(s)}")
    return problems


def write_outputs(out: Path, result) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report = result.report
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    (out / "timing.json").write_text(json.dumps({"wall_clock_seconds": result.wall_clock}, indent=2) + "\n")

    rows = report["accuracy_matrix"]
    n = len(rows)
    with open(out / "accuracy_matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage"] + [f"task_{i}" for i in range(1, n + 1)])
        for t, row in enumerate(rows, start=1):
            w.writerow([t] + [repr(a) for a in row] + [""] * (n - len(row)))

    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "client", "task", "epoch", "loss", "n_samples", "upload_bytes"])
        for tr in report["traces"]:
            for e, loss in enumerate(tr["epoch_losses"], start=1):
                w.writerow([tr["round"], tr["client"], tr["task"], e, repr(loss), tr["n_samples"], tr["upload_bytes"]])

    if report["round_evals"]:
        with open(out / "round_accuracy.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "task", "accuracy"])
            for ev in report["round_evals"]:
                for i, a in enumerate(ev["accuracy"], start=1):
                    w.writerow([ev["round"], i, repr(a)])

    cfg = report["config"]
    comm = report["communication"]
    lines = [
        f"variant            {cfg['loss']['variant']}",
        f"seed               {cfg['seed']}",
        f"schedule           {cfg['fed']['mode']}, {cfg['fed']['n_clients']} clients, "
        f"{cfg['fed']['rounds_per_task']} rounds/task",
        f"average accuracy   {100 * report['average_accuracy']:.2f}%",
        f"average forgetting {100 * report['average_forgetting']:.2f}%",
        f"uploaded bytes     {comm['total_upload_bytes']}",
        f"downloaded bytes   {comm['total_download_bytes']}",
        f"encoder bytes      {comm['encoder_bytes_not_sent']} (never sent)",
        f"wall clock         {result.wall_clock:.1f}s",
        "",
        "accuracy matrix (%), row = after stage, column = task",
    ]
    for t, row in enumerate(rows, start=1):
        lines.append(f"  {t:>2} " + " ".join(f"{100 * a:6.2f}" for a in row))
    (out / "summary.txt").write_text("\n".join(lines) + "\n")


def cmd_run(args) -> int:
    try:
        overrides = _overrides(args)
        variants = [v.strip() for v in args.variant.split(",")] if args.variant else [None]
        for v in variants:
            if v is not None and v not in VARIANTS:
                raise ConfigError(f"--variant: must be one of {VARIANTS}, got {v!r}")
        configs = []
        for v in variants:
            ov = dict(overrides)
            if v is not None:
                ov["loss.variant"] = v
            configs.append(parse_config(args.config, ov))
    except ConfigError as exc:
        return _fail("config", str(exc), 2)

    root = _output_root(args, configs[0])
    status = 0
    for v, cfg in zip(variants, configs):
        out = root / v if len(variants) > 1 else root
        try:
            out.mkdir(parents=True, exist_ok=True)
            result = run_experiment(cfg, parallel=args.parallel, checkpoint_path=out / "checkpoint.npz")
            write_outputs(out, result)
        except ExperimentError as exc:
            return _fail("experiment", str(exc))
        except (OSError, ValueError) as exc:
            return _fail(type(exc).__name__, str(exc))
        problems = check_report(result.report)
        if problems:
            status = _fail("invariant", "; ".join(problems))
            continue
        rep = result.report
        print(f"{out}: average accuracy {100 * rep['average_accuracy']:.2f}%, "
              f"average forgetting {100 * rep['average_forgetting']:.2f}%")
    return status


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed)
    print(report.render())
    return 0 if report.ok else 1


def cmd_gen_data(args) -> int:
    try:
        tasks = generate_synthetic_benchmark(args.n_tasks, args.classes_per_task, args.d_in,
                                             args.samples_per_class, args.separation,
                                             seed=stream(args.seed, "data"))
    except ValueError as exc:
        return _fail("config", str(exc), 2)
    try:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_csv_dataset(tasks, args.out)
    except OSError as exc:
        return _fail("io", f"cannot write {args.out}: {exc}")
    print(f"wrote {sum(len(t.y) for t in tasks)} rows ({len(tasks)} tasks) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptfcl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment (or a variant sweep) from a TOML config")
    r.add_argument("--config", help="TOML config file; omitted keys take their defaults")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else output_dir from the config)")
    r.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}, or a comma list for a sweep")
    r.add_argument("--parallel", type=int, default=os.cpu_count() or 1, help="client worker threads")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. fed.lr=0.01")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("gen-data", help="write a synthetic benchmark as CSV")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--n-tasks", type=int, default=5)
    d.add_argument("--classes-per-task", type=int, default=2)
    d.add_argument("--d-in", type=int, default=32)
    d.add_argument("--samples-per-class", type=int, default=100)
    d.add_argument("--separation", type=float, default=6.0)
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "parallel", 1) < 1:
        return _fail("config", f"--parallel must be >= 1, got {args.parallel}", 2)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
