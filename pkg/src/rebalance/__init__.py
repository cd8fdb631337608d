"""Rebalance class-imbalanced tabular data and compare oversampling treatments."""

from .data import Dataset, DataError, SplitSpec, load_csv, make_synthetic_imbalanced, stratified_split
from .metrics import MetricReport, evaluate
from .pipeline import ExperimentConfig, dazzle_train, report, run_experiment, run_treatment

__version__ = "0.1.0"

__all__ = [
    "DataError", "Dataset", "ExperimentConfig", "MetricReport", "SplitSpec", "dazzle_train",
    "evaluate", "load_csv", "make_synthetic_imbalanced", "report", "run_experiment",
    "run_treatment", "stratified_split",
]
