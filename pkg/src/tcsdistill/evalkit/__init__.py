"""Evaluation: semantic IoU, instance AP, throughput, and ablation sweeps.

``ablation`` is imported lazily by callers (it depends on the trainer).
"""

from .bench import BenchResult, bench_fps
from .metrics import (
    AP_THRESHOLDS,
    REPORT_COLUMNS,
    MetricAccumulator,
    MetricsReport,
    average_precision,
    instance_map,
    iou,
    match_instances,
    reports_to_csv,
)

__all__ = [
    "AP_THRESHOLDS", "REPORT_COLUMNS", "BenchResult", "MetricAccumulator", "MetricsReport",
    "average_precision", "bench_fps", "instance_map", "iou", "match_instances", "reports_to_csv",
]
