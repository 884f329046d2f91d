"""Command-line front end: train, sweep, diagnose, export.

Exit codes: 0 success, 1 usage error (bad flags, missing/invalid config,
malformed grids), 2 runtime error or diverged run, 3 run-log schema
violations. The output root defaults to ``$SPARSE_RL_OUT`` or ``./runs``.

Flags mirror ``ExperimentConfig`` fields one-to-one (``--total-steps`` also
answers to ``--steps``). Sweep grids accept comma lists (``0.0,0.5``) or
``lo:hi:step`` ranges; seed sets accept ``1..8`` or comma lists.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from .harness import (
    ConfigError,
    ExperimentConfig,
    read_run_csv,
    run_experiment,
    run_sweep,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_SCHEMA = 3


class UsageError(Exception):
    pass


def out_root() -> Path:
    return Path(os.environ.get("SPARSE_RL_OUT", "runs"))


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"override {pair!r} is not KEY=VALUE")
        out[key] = parse_value(raw)
    return out


def parse_grid(text: str, cast=float) -> list:
    """Comma list ('0.1,0.5') or inclusive range ('0.1:0.9:0.1')."""
    try:
        if ":" in text:
            lo_s, hi_s, step_s = text.split(":")
            lo, hi, step = float(lo_s), float(hi_s), float(step_s)
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(round((hi - lo) / step)) + 1
            values = [round(lo + i * step, 10) for i in range(n) if lo + i * step <= hi + 1e-9]
            return [cast(v) for v in values]
        return [cast(parse_value(part)) for part in text.split(",") if part != ""]
    except (ValueError, TypeError):
        raise UsageError(f"malformed grid {text!r}") from None


def parse_seeds(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise UsageError(f"malformed seed set {text!r}") from None


def _add_config_flags(parser: argparse.ArgumentParser, skip: tuple[str, ...] = ()) -> None:
    d = ExperimentConfig()
    if "algo" not in skip:
        parser.add_argument("--algo", choices=["sac", "ddpg", "stream_ac"], default=None,
                            help=f"algorithm (default: {d.algo})")
    if "env_id" not in skip:
        parser.add_argument("--env-id", dest="env_id", default=None,
                            help=f"environment id (default: {d.env_id})")
    if "width_scale" not in skip:
        parser.add_argument("--width-scale", dest="width_scale", type=int, default=None,
                            help=f"integer width multiplier (default: {d.width_scale})")
    if "depth_scale" not in skip:
        parser.add_argument("--depth-scale", dest="depth_scale", type=int, default=None,
                            help=f"integer depth multiplier (default: {d.depth_scale})")
    if "sparsity" not in skip:
        parser.add_argument("--sparsity", type=float, default=None,
                            help=f"global sparsity level in [0,1) (default: {d.sparsity})")
    if "method" not in skip:
        parser.add_argument("--method", choices=["dense", "er", "uniform", "sparse_init"],
                            default=None, help=f"sparsification method (default: {d.method})")
    parser.add_argument("--seed", type=int, default=None, help=f"run seed (default: {d.seed})")
    parser.add_argument("--total-steps", "--steps", dest="total_steps", type=int, default=None,
                        help=f"environment steps (default: {d.total_steps})")
    parser.add_argument("--eval-every", dest="eval_every", type=int, default=None,
                        help=f"evaluation cadence in steps (default: {d.eval_every})")
    parser.add_argument("--eval-episodes", dest="eval_episodes", type=int, default=None,
                        help=f"episodes per evaluation (default: {d.eval_episodes})")
    parser.add_argument("--metrics-every", dest="metrics_every", type=int, default=None,
                        help=f"diagnostics cadence in steps (default: {d.metrics_every})")
    parser.add_argument("--reset-interval", dest="reset_interval", type=int, default=None,
                        help="periodic reset-diagnostic interval in steps (default: off)")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="hyperparameter override, repeatable (e.g. batch_size=64)")


def resolve_config(args, skip: tuple[str, ...] = ()) -> ExperimentConfig:
    doc = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: invalid JSON ({exc})")
    try:
        cfg = ExperimentConfig.from_json(json.dumps(doc))
        updates = {}
        for f in fields(ExperimentConfig):
            if f.name in ("overrides", "stream") or f.name in skip:
                continue
            value = getattr(args, f.name, None)
            if value is not None:
                updates[f.name] = value
        overrides = dict(cfg.overrides)
        overrides.update(parse_overrides(args.override))
        cfg = replace(cfg, overrides=overrides, **updates)
        cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def run_tag(cfg: ExperimentConfig) -> str:
    return f"{cfg.algo}_{cfg.env_id}_{cfg.method}_s{cfg.sparsity:g}_w{cfg.width_scale}_d{cfg.depth_scale}_seed{cfg.seed}"


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    run_dir = Path(args.out) if args.out else out_root() / run_tag(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    log = run_experiment(
        cfg,
        out_path=run_dir / "run.csv",
        checkpoint_path=run_dir / "checkpoint.npz",
        progress=(None if args.quiet else _print_progress),
    )
    final = log.final("eval_return")
    print(f"run written to {run_dir} (final eval_return: {final})")
    if log.diverged:
        print("run diverged", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _print_progress(step: int, metric: str, value: float) -> None:
    print(f"step {step}: {metric} = {value:.4f}", flush=True)


def cmd_sweep(args) -> int:
    cfg = resolve_config(args, skip=("sparsity", "width_scale", "depth_scale"))
    sparsities = parse_grid(args.sparsity) if args.sparsity else [cfg.sparsity]
    widths = parse_grid(args.width, cast=int) if args.width else [cfg.width_scale]
    depths = parse_grid(args.depth, cast=int) if args.depth else [cfg.depth_scale]
    seeds = parse_seeds(args.seeds) if args.seeds else [cfg.seed]
    out_dir = Path(args.out) if args.out else out_root() / "sweep"
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_sweep(cfg, sparsities, widths, depths, seeds, out_dir=out_dir, jobs=args.jobs)
    for key, message in sorted(result.errors.items(), key=str):
        print(f"run {key} failed: {message}", file=sys.stderr)
    print(f"sweep written to {out_dir} ({len(result.logs)} runs, {len(result.errors)} failed)")
    return EXIT_OK if not result.errors else EXIT_RUNTIME


def cmd_diagnose(args) -> int:
    from .checkpoint import load_agent
    from .diagnostics import collect_diagnostics
    from .harness import _joint_measured_sparsity, _probe_batch

    agent, meta = load_agent(args.checkpoint)
    env_id = args.env_id or (meta.get("config") or {}).get("env_id")
    if env_id is None:
        raise UsageError("checkpoint carries no env id; pass --env-id")
    probe = _probe_batch(agent, None, env_id, agent.seed, meta.get("step", 0), n=args.probes)
    record = collect_diagnostics(
        agent, probe, step=meta.get("step", 0), covariance_csv=args.cov_out
    )
    doc = {**record.__dict__, "measured_sparsity": _joint_measured_sparsity(agent)}
    text = json.dumps(doc, indent=2)
    print(text)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "diagnostics.json"
    out.write_text(text)
    return EXIT_OK


def cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"not a directory: {run_dir}")
    files = sorted(
        p for p in run_dir.glob("*.csv") if p.name not in ("summary.csv", "merged.csv")
    )
    if not files:
        raise UsageError(f"no run CSVs in {run_dir}")
    meta_cols = ["algo", "env_id", "method", "sparsity", "width_scale", "depth_scale",
                 "seed", "total_params", "learnable_params"]
    out = Path(args.out) if args.out else run_dir / "merged.csv"
    rows_written = 0
    with open(out, "w") as fh:
        fh.write("run_id," + ",".join(meta_cols) + ",step,metric,value\n")
        for path in files:
            log = read_run_csv(path)  # raises on schema violations, naming the row
            meta = [json.dumps(log.metadata.get(c)) for c in meta_cols]
            for step, metric, value in log.rows:
                fh.write(f"{path.stem}," + ",".join(meta) + f",{step},{metric},{value!r}\n")
                rows_written += 1
    print(f"merged {rows_written} rows from {len(files)} runs into {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparse-rl",
        description="Static-sparse actor-critic training, sweeps, and diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one experiment")
    p_train.add_argument("--config", default=None, help="JSON config file (ExperimentConfig fields)")
    _add_config_flags(p_train)
    p_train.add_argument("--out", default=None, help="output directory (default: $SPARSE_RL_OUT/<tag>)")
    p_train.add_argument("--quiet", action="store_true", help="suppress progress lines")
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="grid of runs over sparsity/width/depth x seeds")
    p_sweep.add_argument("--config", default=None, help="JSON config file with the base settings")
    _add_config_flags(p_sweep, skip=("sparsity", "width_scale", "depth_scale"))
    p_sweep.add_argument("--sparsity", default=None, help="grid: comma list or lo:hi:step")
    p_sweep.add_argument("--width", default=None, help="width-scale grid: comma list or lo:hi:step")
    p_sweep.add_argument("--depth", default=None, help="depth-scale grid: comma list or lo:hi:step")
    p_sweep.add_argument("--seeds", default=None, help="seed set: '1..8' or comma list")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: 1)")
    p_sweep.add_argument("--out", default=None, help="output directory (default: $SPARSE_RL_OUT/sweep)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_diag = sub.add_parser("diagnose", help="recompute diagnostics from a checkpoint")
    p_diag.add_argument("--checkpoint", required=True, help="checkpoint .npz written by train")
    p_diag.add_argument("--probes", type=int, default=256, help="probe batch size (default: 256)")
    p_diag.add_argument("--env-id", dest="env_id", default=None,
                        help="probe environment (default: from checkpoint)")
    p_diag.add_argument("--out", default=None, help="output JSON path")
    p_diag.add_argument("--cov-out", dest="cov_out", default=None,
                        help="also dump the gradient-covariance matrix as CSV (heatmap input)")
    p_diag.set_defaults(func=cmd_diagnose)

    p_export = sub.add_parser("export", help="validate run CSVs and merge them for plotting")
    p_export.add_argument("--run-dir", dest="run_dir", required=True, help="directory of run CSVs")
    p_export.add_argument("--out", default=None, help="merged CSV path (default: <run-dir>/merged.csv)")
    p_export.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        # schema violations from run-log parsing name the file and row
        message = str(exc)
        print(f"error: {message}", file=sys.stderr)
        return EXIT_SCHEMA if "row" in message or "header" in message or "metric" in message else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
