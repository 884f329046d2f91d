"""Offline figures from run CSVs: scaling trends, sparsity sweeps, metric
curves, and gradient-covariance heatmaps.

This tool consumes the training harness's run-log files as a wire format
(``# key=json`` metadata lines, then ``step,metric,value`` rows) and never
imports the training package. Aggregation is always computed from raw rows
at render time: runs are grouped by the requested configuration keys, and
each plotted point carries the across-seed mean with a +-1 standard
deviation band. Model-size axes are logarithmic; covariance heatmaps use a
diverging colormap centered at zero.

Exit codes: 0 success, 1 usage error, 3 malformed input CSV (the message
names the offending file and row).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PLOT_KINDS = ("scaling_trend", "sparsity_sweep", "metric_curves", "covariance_heatmap")

# the run-log schema this tool accepts (mirrors the producer's contract)
KNOWN_METRICS = frozenset(
    {
        "eval_return",
        "critic_loss",
        "actor_loss",
        "alpha",
        "srank",
        "dormant_ratio_actor",
        "dormant_ratio_critic",
        "fau",
        "grad_norm_actor",
        "grad_norm_critic",
        "param_norm_actor",
        "param_norm_critic",
        "cov_offdiag_mean",
        "measured_sparsity",
        "reset_event",
        "diverged",
    }
)


class SchemaError(ValueError):
    """Malformed run CSV; message names the file and row."""


@dataclass
class RunData:
    path: Path
    metadata: dict
    rows: list[tuple[int, str, float]]

    def series(self, metric: str) -> list[tuple[int, float]]:
        return [(s, v) for s, m, v in self.rows if m == metric]

    def final(self, metric: str) -> float | None:
        values = self.series(metric)
        return values[-1][1] if values else None


@dataclass
class PlotRequest:
    inputs: list[Path]
    kind: str
    out: Path
    group_by: tuple[str, ...] = ("sparsity",)
    metric: str = "eval_return"

    def validate(self) -> None:
        if self.kind not in PLOT_KINDS:
            raise ValueError(f"unknown plot kind {self.kind!r}; choose from {PLOT_KINDS}")
        if not self.inputs:
            raise ValueError("at least one input file is required")


def read_run_csv(path) -> RunData:
    path = Path(path)
    metadata: dict = {}
    rows: list[tuple[int, str, float]] = []
    lines = path.read_text().splitlines()
    body = 0
    for i, line in enumerate(lines):
        if line.startswith("# "):
            key, sep, raw = line[2:].partition("=")
            if not sep:
                raise SchemaError(f"{path}: row {i + 1}: malformed metadata line")
            try:
                metadata[key] = json.loads(raw)
            except json.JSONDecodeError:
                raise SchemaError(f"{path}: row {i + 1}: metadata value is not JSON") from None
        else:
            body = i
            break
    else:
        raise SchemaError(f"{path}: no data header found")
    if lines[body] != "step,metric,value":
        raise SchemaError(f"{path}: row {body + 1}: expected 'step,metric,value' header")
    for lineno, line in enumerate(lines[body + 1 :], start=body + 2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise SchemaError(f"{path}: row {lineno}: expected 3 columns, got {len(parts)}")
        step_s, metric, value_s = parts
        try:
            step = int(step_s)
            value = float(value_s)
        except ValueError:
            raise SchemaError(f"{path}: row {lineno}: non-numeric step or value") from None
        if metric not in KNOWN_METRICS:
            raise SchemaError(f"{path}: row {lineno}: unknown metric {metric!r}")
        rows.append((step, metric, value))
    return RunData(path=path, metadata=metadata, rows=rows)


def _group_key(run: RunData, keys: tuple[str, ...]) -> tuple:
    return tuple(run.metadata.get(k) for k in keys)


def _mean_sd(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def _label(keys: tuple[str, ...], value: tuple) -> str:
    return ", ".join(f"{k}={v}" for k, v in zip(keys, value))


def scaling_trend_table(runs: list[RunData], group_by: tuple[str, ...], metric: str) -> list[dict]:
    """Final metric value against learnable parameter count, aggregated over
    seeds; one series per group key."""
    buckets: dict[tuple, dict[float, list[float]]] = {}
    for run in runs:
        final = run.final(metric)
        if final is None:
            continue
        size = run.metadata.get("learnable_params")
        if size is None:
            raise SchemaError(f"{run.path}: missing learnable_params metadata")
        key = _group_key(run, group_by)
        buckets.setdefault(key, {}).setdefault(float(size), []).append(final)
    table = []
    for key in sorted(buckets, key=str):
        for size in sorted(buckets[key]):
            mean, sd = _mean_sd(buckets[key][size])
            table.append(
                {"group": _label(group_by, key), "x": size, "mean": mean, "sd": sd,
                 "n": len(buckets[key][size])}
            )
    return table


def sweep_table(runs: list[RunData], group_by: tuple[str, ...], metric: str) -> list[dict]:
    """Final metric value against the sparsity level."""
    buckets: dict[tuple, dict[float, list[float]]] = {}
    for run in runs:
        final = run.final(metric)
        if final is None:
            continue
        key = _group_key(run, group_by)
        sparsity = float(run.metadata.get("sparsity", 0.0))
        buckets.setdefault(key, {}).setdefault(sparsity, []).append(final)
    table = []
    for key in sorted(buckets, key=str):
        for sparsity in sorted(buckets[key]):
            mean, sd = _mean_sd(buckets[key][sparsity])
            table.append(
                {"group": _label(group_by, key), "x": sparsity, "mean": mean, "sd": sd,
                 "n": len(buckets[key][sparsity])}
            )
    return table


def curves_table(runs: list[RunData], group_by: tuple[str, ...], metric: str) -> list[dict]:
    """Metric-over-steps curves, aggregated across seeds per group."""
    buckets: dict[tuple, dict[int, list[float]]] = {}
    for run in runs:
        key = _group_key(run, group_by)
        for step, value in run.series(metric):
            buckets.setdefault(key, {}).setdefault(step, []).append(value)
    table = []
    for key in sorted(buckets, key=str):
        for step in sorted(buckets[key]):
            mean, sd = _mean_sd(buckets[key][step])
            table.append(
                {"group": _label(group_by, key), "x": step, "mean": mean, "sd": sd,
                 "n": len(buckets[key][step])}
            )
    return table


def read_covariance_csv(path) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    try:
        k = int(lines[0])
        matrix = np.array([[float(v) for v in line.split(",")] for line in lines[1 : k + 1]])
    except (ValueError, IndexError):
        raise SchemaError(f"{path}: not a covariance dump (k header then k rows)") from None
    if matrix.shape != (k, k):
        raise SchemaError(f"{path}: expected {k}x{k} matrix, got {matrix.shape}")
    return matrix


def _plot_series(table: list[dict], ax, log_x: bool) -> None:
    groups = sorted({row["group"] for row in table})
    for group in groups:
        rows = [r for r in table if r["group"] == group]
        xs = np.array([r["x"] for r in rows])
        means = np.array([r["mean"] for r in rows])
        sds = np.array([r["sd"] for r in rows])
        ax.plot(xs, means, marker="o", label=group or "all")
        ax.fill_between(xs, means - sds, means + sds, alpha=0.25)
    if log_x:
        ax.set_xscale("log")
    if groups and any(groups):
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)


def render(request: PlotRequest) -> list[dict]:
    """Write the requested figure and return its aggregated data table.

    Inputs are never mutated; the table (and therefore the plotted data) is
    a pure function of the input files.
    """
    request.validate()

    if request.kind == "covariance_heatmap":
        matrix = read_covariance_csv(request.inputs[0])
        bound = max(1e-12, float(np.abs(matrix).max()))
        fig, ax = plt.subplots(figsize=(5, 4.4), dpi=120)
        image = ax.imshow(matrix, cmap="RdBu", vmin=-bound, vmax=bound)
        fig.colorbar(image, ax=ax, label="gradient cosine similarity")
        ax.set_xlabel("sample")
        ax.set_ylabel("sample")
        fig.tight_layout()
        fig.savefig(request.out)
        plt.close(fig)
        return [
            {"group": "", "x": float(i), "mean": float(matrix[i, j]), "sd": 0.0, "n": 1}
            for i in range(matrix.shape[0])
            for j in range(matrix.shape[1])
            if i == j
        ]

    runs = [read_run_csv(p) for p in request.inputs]
    if request.kind == "scaling_trend":
        table = scaling_trend_table(runs, request.group_by, request.metric)
        x_label, log_x = "learnable parameters", True
    elif request.kind == "sparsity_sweep":
        table = sweep_table(runs, request.group_by, request.metric)
        x_label, log_x = "sparsity", False
    else:
        table = curves_table(runs, request.group_by, request.metric)
        x_label, log_x = "environment steps", False

    fig, ax = plt.subplots(figsize=(6, 4), dpi=120)
    _plot_series(table, ax, log_x=log_x)
    ax.set_xlabel(x_label)
    ax.set_ylabel(request.metric)
    fig.tight_layout()
    fig.savefig(request.out)
    plt.close(fig)
    return table


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparse-rl-plot",
        description="Render figures from sparse-rl run CSVs.",
    )
    parser.add_argument("inputs", nargs="+", help="run CSV files (or one covariance dump)")
    parser.add_argument("--kind", choices=PLOT_KINDS, required=True, help="figure family")
    parser.add_argument("--group-by", default="sparsity",
                        help="comma-separated metadata keys forming one series each "
                             "(default: sparsity)")
    parser.add_argument("--metric", default="eval_return",
                        help="metric column to aggregate (default: eval_return)")
    parser.add_argument("--out", default="plot.png", help="output image path (png/svg)")
    parser.add_argument("--table", default=None,
                        help="also write the aggregated data table as CSV")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    request = PlotRequest(
        inputs=[Path(p) for p in args.inputs],
        kind=args.kind,
        out=Path(args.out),
        group_by=tuple(k for k in args.group_by.split(",") if k),
        metric=args.metric,
    )
    try:
        table = render(request)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.table:
        with open(args.table, "w") as fh:
            fh.write("group,x,mean,sd,n\n")
            for row in table:
                fh.write(f"\"{row['group']}\",{row['x']!r},{row['mean']!r},{row['sd']!r},{row['n']}\n")
    print(f"wrote {request.out} ({len(table)} table rows)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
