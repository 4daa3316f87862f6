"""Matching, average precision and confusion-matrix scoring."""

from .average_precision import ap_from_flags, average_precision, match_flags
from .confusion import BACKGROUND, ConfusionMatrix, confusion_matrix, match_corpus
from .matching import (
    ONE_TO_ONE,
    OVER_DETECTION,
    UNDER_DETECTION,
    EvalConfig,
    ImageMatches,
    MatchRecord,
    greedy_match,
    match_image,
    pairwise_iou,
    resolve_over_detection,
    resolve_under_detection,
)
from .report import EvalReport, evaluate, format_report, format_table, matches_csv, report_to_dict

map_all = evaluate

__all__ = [
    "BACKGROUND",
    "ConfusionMatrix",
    "EvalConfig",
    "EvalReport",
    "ImageMatches",
    "MatchRecord",
    "ONE_TO_ONE",
    "OVER_DETECTION",
    "UNDER_DETECTION",
    "ap_from_flags",
    "average_precision",
    "confusion_matrix",
    "evaluate",
    "format_report",
    "format_table",
    "greedy_match",
    "map_all",
    "match_corpus",
    "match_flags",
    "match_image",
    "matches_csv",
    "pairwise_iou",
    "report_to_dict",
    "resolve_over_detection",
    "resolve_under_detection",
]
