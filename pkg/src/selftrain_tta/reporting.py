"""Long-format result CSVs, seed aggregation and metric-vs-budget figures."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

from .experiment import Row

COLUMNS = ("task", "method", "flags", "n", "seed", "metric_name", "value", "step")
SUMMARY_COLUMNS = ("task", "method", "flags", "n", "metric_name", "mean", "std", "count")
PLOT_METRICS = {"classification": ("accuracy",), "detection": ("map_lite", "d_ece"), "segmentation": ("miou",)}


class ReportError(RuntimeError):
    pass


def _fmt(v: float) -> str:
    return repr(float(v))


def append_rows(path, rows: list[Row]) -> None:
    """Append rows in one write; the header is written when the file is new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    lines = []
    if new:
        lines.append(",".join(COLUMNS))
    for r in rows:
        vals = list(astuple(r))
        vals[6] = _fmt(vals[6])
        lines.append(",".join(_quote(str(v)) for v in vals))
    with open(path, "a", newline="") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def _quote(s: str) -> str:
    return f'"{s}"' if ("," in s or '"' in s) else s


def read_rows(path) -> list[Row]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ReportError(f"{path}: unexpected header {reader.fieldnames}")
        return [Row(r["task"], r["method"], r["flags"], int(r["n"]), int(r["seed"]), r["metric_name"],
                    float(r["value"]), int(r["step"])) for r in reader]


@dataclass(frozen=True)
class Summary:
    task: str
    method: str
    flags: str
    n: int
    metric_name: str
    mean: float
    std: float
    count: int

    @property
    def label(self) -> str:
        return f"{self.method}+{self.flags}" if self.flags else self.method


def summarize(rows: list[Row]) -> list[Summary]:
    """Mean and population std over seeds per (task, method, flags, n, metric); NaNs are excluded."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        groups[(r.task, r.method, r.flags, r.n, r.metric_name)].append(r.value)
    out = []
    for key in sorted(groups):
        vals = np.array([v for v in groups[key] if not math.isnan(v)])
        mean = float(vals.mean()) if vals.size else math.nan
        std = float(vals.std()) if vals.size else math.nan
        out.append(Summary(*key, mean, std, int(vals.size)))
    return out


def write_summary(path, summaries: list[Summary]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in summaries:
            w.writerow([s.task, s.method, s.flags, s.n, s.metric_name, _fmt(s.mean), _fmt(s.std), s.count])


def plot_task(summaries: list[Summary], task: str, out_dir: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for metric in PLOT_METRICS[task]:
        sel = [s for s in summaries if s.task == task and s.metric_name == metric]
        if not sel:
            continue
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for label in sorted({s.label for s in sel}):
            pts = sorted((s.n, s.mean, s.std) for s in sel if s.label == label)
            n, mean, std = map(np.array, zip(*pts))
            ax.errorbar(n, mean, yerr=std, marker="o", capsize=3, label=label)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("adaptation budget n")
        ax.set_ylabel(metric)
        ax.set_title(task)
        ax.legend(fontsize=7, frameon=False)
        fig.tight_layout()
        path = out_dir / f"{task}_{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def report(results_dir) -> tuple[Path, list[Path]]:
    """Aggregate every ``results*.csv`` under ``results_dir`` into summary.csv plus figures."""
    d = Path(results_dir)
    if not d.is_dir():
        raise ReportError(f"{d}: not a directory")
    files = sorted(d.glob("results*.csv"))
    if not files:
        raise ReportError(f"{d}: no results*.csv files to report on")
    rows = [r for f in files for r in read_rows(f)]
    if not rows:
        raise ReportError(f"{d}: result files contain no rows")
    summaries = summarize(rows)
    out = d / "summary.csv"
    write_summary(out, summaries)
    plots = []
    for task in sorted({s.task for s in summaries}):
        plots += plot_task(summaries, task, d)
    return out, plots
