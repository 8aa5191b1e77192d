"""Run metrics, resource sampling and the benchmark CSV format."""

from __future__ import annotations

import csv
import io
import math
import statistics
import threading
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import psutil
from scipy import stats

CSV_HEADER = (
    "action", "count", "rep", "latency_ms", "data_bytes", "control_bytes",
    "disk_bytes", "peak_rss_delta", "cpu_seconds", "sha256_of_payload",
)
NUMERIC_COLUMNS = CSV_HEADER[3:9]
SUMMARY_REP = "summary"


@dataclass
class RunMetrics:
    action: str
    message_count: int
    rep: int
    latency_ms: float
    data_bytes: int
    control_bytes: int
    disk_bytes: int
    peak_rss_delta: int
    cpu_seconds: float
    payload_sha256: str
    wire_bytes: int = 0

    def row(self) -> list[str]:
        return [self.action, str(self.message_count), str(self.rep), f"{self.latency_ms:.3f}",
                str(self.data_bytes), str(self.control_bytes), str(self.disk_bytes),
                str(self.peak_rss_delta), f"{self.cpu_seconds:.4f}", self.payload_sha256]


def mean_ci(values: Sequence[float], confidence: float = 0.95) -> tuple[float, float]:
    """Mean and t-distribution half-width; the half-width is 0 for one sample."""
    mean = statistics.fmean(values)
    if len(values) < 2:
        return mean, 0.0
    sem = statistics.stdev(values) / math.sqrt(len(values))
    return mean, float(stats.t.ppf((1 + confidence) / 2, len(values) - 1) * sem)


def summary_rows(runs: Iterable[RunMetrics]) -> list[list[str]]:
    """One row per (action, count): each numeric cell reads ``mean±halfwidth``."""
    groups: dict[tuple[str, int], list[RunMetrics]] = {}
    for r in runs:
        groups.setdefault((r.action, r.message_count), []).append(r)
    rows = []
    for (action, count), group in groups.items():
        cells = []
        for col in NUMERIC_COLUMNS:
            mean, half = mean_ci([float(getattr(r, col)) for r in group])
            cells.append(f"{mean:.6g}±{half:.6g}")
        digests = {r.payload_sha256 for r in group}
        rows.append([action, str(count), SUMMARY_REP, *cells, digests.pop() if len(digests) == 1 else "mixed"])
    return rows



def write_csv(runs: Sequence[RunMetrics], out) -> None:
    """Write data rows followed by summary rows to a path or text stream."""
    if isinstance(out, (str, bytes)) or hasattr(out, "__fspath__"):
        with open(out, "w", newline="", encoding="utf-8") as fh:
            write_csv(runs, fh)
        return
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in runs:
        w.writerow(r.row())
    w.writerows(summary_rows(runs))


def csv_text(runs: Sequence[RunMetrics]) -> str:
    buf = io.StringIO()
    write_csv(runs, buf)
    return buf.getvalue()


class RssSampler:
    """Samples this process's RSS every ``interval`` seconds in a thread."""

    def __init__(self, interval: float = 0.1):
        self.interval = interval
        self.proc = psutil.Process()
        self.baseline = 0
        self.peak = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _sample(self) -> None:
        self.peak = max(self.peak, self.proc.memory_info().rss)

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            self._sample()

    def __enter__(self) -> "RssSampler":
        self.baseline = self.peak = self.proc.memory_info().rss
        self._thread = threading.Thread(target=self._run, name="rss-sampler", daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._stop.set()
        self._thread.join()
        self._sample()

    @property
    def delta(self) -> int:
        return max(0, self.peak - self.baseline)


class Stopwatch:
    """Wall-clock and process CPU time around a block."""

    def __enter__(self) -> "Stopwatch":
        self._wall = time.perf_counter()
        self._cpu = time.process_time()
        return self

    def __exit__(self, *exc) -> None:
        self.latency_ms = (time.perf_counter() - self._wall) * 1000
        self.cpu_seconds = time.process_time() - self._cpu
