"""Benchmark harness: corpora, workloads, metrics, plot data, energy model."""

from .corpus import gen_archive, load_corpus, split_sample, synthesize_corpus, write_maildir
from .energy import EnergyEstimate, EnergyModelParams, energy_model
from .fits import Fit, fit_polynomial, linear_and_quadratic
from .metrics import CSV_HEADER, RunMetrics, mean_ci, write_csv
from .report import ReportParseError, read_runs, report
from .workload import WorkloadSpec, run_benchmark

__all__ = [
    "CSV_HEADER", "EnergyEstimate", "EnergyModelParams", "Fit", "ReportParseError", "RunMetrics",
    "WorkloadSpec", "energy_model", "fit_polynomial", "gen_archive", "linear_and_quadratic",
    "load_corpus", "mean_ci", "read_runs", "report", "run_benchmark", "split_sample",
    "synthesize_corpus", "write_csv", "write_maildir",
]
