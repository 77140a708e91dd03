"""Metrics CSV I/O, repeat summaries and figures.

Run files are named ``<config>_rNN.csv``; every file is one repeat of the
configuration ``<config>``. Summaries give mean, median and sample standard
deviation over repeats; figures are written as PNGs next to the CSVs.
"""

from __future__ import annotations

import csv
import math
import re
from collections import defaultdict
from pathlib import Path

import numpy as np

from .meter import Summary

METRIC_COLUMNS = (
    "round",
    "device_id",
    "epoch",
    "accuracy",
    "loss",
    "t_local_ms",
    "t_upload_ms",
    "t_global_ms",
    "t_download_ms",
    "t_total_ms",
    "mem_bytes",
    "payload_up_bytes",
    "payload_down_bytes",
)
WALL_CLOCK_COLUMNS = ("t_local_ms", "t_global_ms", "t_total_ms")
SUMMARY_METRICS = ("max_accuracy", "final_accuracy", "final_loss", "mean_t_local_ms", "mean_t_total_ms", "mem_bytes", "payload_up_bytes")
_RUN_RE = re.compile(r"^(?P<config>.+)_r(?P<repeat>\d+)\.csv$")


class EmptyInput(ValueError):
    pass


def fmt_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([fmt_value(row.get(c)) for c in METRIC_COLUMNS])


def write_table(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_value(v) if not isinstance(v, str) else v for v in row])


def read_metrics(path: Path) -> dict[str, np.ndarray]:
    """Columns of a metrics CSV as float arrays (blank cells become NaN)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_COLUMNS:
            raise ValueError(f"{path}: not a metrics CSV")
        rows = [[float(v) if v else math.nan for v in r] for r in reader]
    data = np.array(rows, dtype=np.float64).reshape(-1, len(METRIC_COLUMNS))
    return {c: data[:, i] for i, c in enumerate(METRIC_COLUMNS)}


def _is_metrics(path: Path) -> bool:
    with open(path, newline="") as fh:
        return tuple(next(csv.reader(fh), ())) == METRIC_COLUMNS


def run_files(directory: Path) -> dict[str, list[Path]]:
    """Metrics files grouped by configuration, repeats in order."""
    groups: dict[str, list[tuple[int, Path]]] = defaultdict(list)
    for p in sorted(Path(directory).glob("*.csv")):
        m = _RUN_RE.match(p.name)
        if m and _is_metrics(p):
            groups[m["config"]].append((int(m["repeat"]), p))
    return {k: [p for _, p in sorted(v)] for k, v in sorted(groups.items())}


def file_metrics(cols: dict[str, np.ndarray]) -> dict[str, float]:
    """Per-run scalars: best/final accuracy, last-round mean loss, mean times, sizes."""
    if cols["round"].size == 0:
        return {m: math.nan for m in SUMMARY_METRICS}
    last = cols["round"] == cols["round"].max()
    if (cols["epoch"] > 0).any() and np.unique(cols["round"]).size == 1:
        last = cols["epoch"] == cols["epoch"].max()  # one centralized run: last epoch
    losses = cols["loss"][last]
    losses = losses[~np.isnan(losses)]
    return {
        "max_accuracy": float(np.nanmax(cols["accuracy"])),
        "final_accuracy": float(cols["accuracy"][last][-1]),
        "final_loss": float(losses.mean()) if losses.size else math.nan,
        "mean_t_local_ms": float(np.nanmean(cols["t_local_ms"])),
        "mean_t_total_ms": float(np.nanmean(cols["t_total_ms"])),
        "mem_bytes": float(np.nanmax(cols["mem_bytes"])),
        "payload_up_bytes": float(np.nanmean(cols["payload_up_bytes"])),
    }


def summarize_dir(directory: Path) -> list[tuple[str, int, dict[str, Summary]]]:
    groups = run_files(directory)
    if not groups:
        raise EmptyInput(f"no run files (*_rNN.csv) in {directory}")
    out = []
    for config, paths in groups.items():
        per_file = [file_metrics(read_metrics(p)) for p in paths]
        out.append((config, len(paths), {m: Summary.of([f[m] for f in per_file]) for m in SUMMARY_METRICS}))
    return out


def summary_header() -> list[str]:
    cols = ["config", "files"]
    for m in SUMMARY_METRICS:
        cols += [f"{m}_mean", f"{m}_median", f"{m}_std"]
    return cols


def summary_rows(summaries) -> list[list]:
    rows = []
    for config, n, stats in summaries:
        row: list = [config, n]
        for m in SUMMARY_METRICS:
            s = stats[m]
            row += [s.mean, s.median, s.stddev]
        rows.append(row)
    return rows


def _mean_curve(paths, x_col: str) -> tuple[np.ndarray, np.ndarray]:
    curves = []
    for p in paths:
        cols = read_metrics(p)
        xs, idx = np.unique(cols[x_col], return_index=True)
        curves.append((xs, cols["accuracy"][idx]))
    n = min(len(c[0]) for c in curves)
    return curves[0][0][:n], np.mean([c[1][:n] for c in curves], axis=0)


def render_figures(directory: Path, summaries) -> list[Path]:
    """Accuracy curves per configuration and, for train sweeps, size/format panels."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    groups = run_files(directory)
    written = []

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for config, paths in groups.items():
        cols = read_metrics(paths[0])
        x_col = "epoch" if np.unique(cols["round"]).size == 1 and cols["epoch"].max() > 1 else "round"
        xs, ys = _mean_curve(paths, x_col)
        ax.plot(xs, ys, label=config, lw=1.2)
    ax.set_xlabel("epoch / round")
    ax.set_ylabel("validation accuracy (mean over repeats)")
    ax.set_ylim(0.4, 1.0)
    ax.legend(fontsize=7)
    fig.tight_layout()
    out = directory / "accuracy.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    written.append(out)

    sweep = defaultdict(list)  # format -> [(n, stats)]
    for config, _, stats in summaries:
        m = re.match(r"^epochs_(?P<fmt>.+)_n(?P<n>\d+)$", config)
        if m:
            sweep[m["fmt"]].append((int(m["n"]), stats))
    if sweep:
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
        for fmt, pts in sorted(sweep.items()):
            pts.sort(key=lambda t: t[0])
            ns = np.array([p[0] for p in pts])
            axes[0].plot(ns, [p[1]["max_accuracy"].mean for p in pts], "o-", label=fmt)
            axes[1].errorbar(ns, [p[1]["mean_t_local_ms"].mean for p in pts], yerr=[p[1]["mean_t_local_ms"].stddev for p in pts], fmt="o-", label=fmt)
            axes[2].plot(ns, [p[1]["mem_bytes"].mean / 1e6 for p in pts], "o-", label=fmt)
        axes[0].set_ylabel("max validation accuracy")
        axes[1].set_ylabel("time per epoch (ms)")
        axes[2].set_ylabel("analytic memory (MB)")
        for ax in axes:
            ax.set_xlabel("training samples")
            ax.legend(fontsize=7)
        fig.tight_layout()
        out = directory / "sweep.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)
    return written
