"""Plot-data emission: per-action series with CIs and trend-line fits."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from ..errors import MerkleMailError
from .fits import linear_and_quadratic
from .metrics import CSV_HEADER, NUMERIC_COLUMNS, SUMMARY_REP, mean_ci


class ReportParseError(MerkleMailError):
    def __init__(self, path, line: int, reason: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {reason}")


def read_runs(paths: Iterable[str | Path]) -> dict[str, dict[str, dict[int, list[float]]]]:
    """``{action: {metric: {count: [values]}}}`` from benchmark CSV data rows."""
    table: dict = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != CSV_HEADER:
                raise ReportParseError(path, 1, "missing or unexpected header")
            for row in reader:
                line = reader.line_num
                if not row:
                    continue
                if len(row) != len(CSV_HEADER):
                    raise ReportParseError(path, line, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
                action, count, rep = row[0], row[1], row[2]
                if rep == SUMMARY_REP:
                    continue
                try:
                    n = int(count)
                    int(rep)
                    values = [float(v) for v in row[3:9]]
                except ValueError as exc:
                    raise ReportParseError(path, line, str(exc)) from None
                if n <= 0 or not action:
                    raise ReportParseError(path, line, "bad action or count")
                for metric, value in zip(NUMERIC_COLUMNS, values):
                    table[action][metric][n].append(value)
    return table


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def report(csv_paths: Sequence[str | Path], out_dir: str | Path) -> list[Path]:
    """Write ``<action>-series.csv`` and ``<action>-trends.csv`` per action.

    Series rows give count, metric, n, mean and the 95% CI bounds.  Trend
    rows give linear and quadratic least-squares coefficients (constant
    term first) with R², fitted over the per-run values.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = read_runs(csv_paths)
    written = []
    for action in sorted(table):
        metrics = table[action]
        series_path = out_dir / f"{action}-series.csv"
        with open(series_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["count", "metric", "n", "mean", "ci_low", "ci_high"])
            for metric in NUMERIC_COLUMNS:
                for count in sorted(metrics[metric]):
                    values = metrics[metric][count]
                    mean, half = mean_ci(values)
                    w.writerow([count, metric, len(values), _fmt(mean), _fmt(mean - half), _fmt(mean + half)])
        trend_path = out_dir / f"{action}-trends.csv"
        with open(trend_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "model", "c0", "c1", "c2", "r2"])
            for metric in NUMERIC_COLUMNS:
                xs = [c for c, vals in sorted(metrics[metric].items()) for _ in vals]
                ys = [v for _, vals in sorted(metrics[metric].items()) for v in vals]
                if len(set(xs)) < 2:
                    continue
                lin, quad = linear_and_quadratic(xs, ys)
                w.writerow([metric, "linear", *map(_fmt, lin.coefficients), "", _fmt(lin.r2)])
                if quad is not None:
                    w.writerow([metric, "quadratic", *map(_fmt, quad.coefficients), _fmt(quad.r2)])
        written += [series_path, trend_path]
    return written
