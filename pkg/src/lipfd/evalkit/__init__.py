from .metrics import MetricsReport, PredictionSet, average_precision, compute_metrics, format_report, roc_auc
from .records import MetricRecord, read_records, write_records
from .weights import WeightReport, normalize_weights

__all__ = [
    "MetricRecord",
    "MetricsReport",
    "PredictionSet",
    "WeightReport",
    "average_precision",
    "compute_metrics",
    "format_report",
    "normalize_weights",
    "read_records",
    "roc_auc",
    "write_records",
]
