"""Metrics, statistics and the cross-validation harness."""

from .harness import (
    METRICS,
    ComparisonReport,
    CVResult,
    FoldResult,
    GridEntry,
    Schedule,
    compare_models,
    cross_validate,
    dumps,
    grid_search,
    metrics_csv,
    predict,
    train_model,
    write_json,
)
from .metrics import MetricsRecord, WilcoxonResult, auc, gmean, mean_std, wilcoxon_signed_rank

__all__ = [
    "METRICS",
    "CVResult",
    "ComparisonReport",
    "FoldResult",
    "GridEntry",
    "MetricsRecord",
    "Schedule",
    "WilcoxonResult",
    "auc",
    "compare_models",
    "cross_validate",
    "dumps",
    "gmean",
    "grid_search",
    "mean_std",
    "metrics_csv",
    "predict",
    "train_model",
    "wilcoxon_signed_rank",
    "write_json",
]
