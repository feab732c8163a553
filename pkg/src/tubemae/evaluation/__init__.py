from tubemae.evaluation.metrics import (
    average_precision,
    image_level_accuracy,
    mean_average_precision,
    multilabel_accuracy,
    phase_level_metrics,
    triplet_metrics,
    video_level_accuracy,
)
from tubemae.evaluation.report import MetricReport, evaluate_records, read_predictions, write_predictions
from tubemae.evaluation.stats import bootstrap_ci, mse_map, wilcoxon_one_sided

__all__ = [
    "MetricReport",
    "average_precision",
    "bootstrap_ci",
    "evaluate_records",
    "image_level_accuracy",
    "mean_average_precision",
    "mse_map",
    "multilabel_accuracy",
    "phase_level_metrics",
    "read_predictions",
    "triplet_metrics",
    "video_level_accuracy",
    "wilcoxon_one_sided",
    "write_predictions",
]
