"""Corpus-level evaluation report and its JSON / text / CSV renderings."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, replace
from typing import Any, Sequence

from ..coco_io import DatasetDoc, Instance
from .average_precision import average_precision
from .confusion import ConfusionMatrix, match_corpus
from .matching import EvalConfig, MatchRecord


@dataclass(frozen=True)
class EvalReport:
    config: EvalConfig
    per_class_ap: dict[str, float | None]
    mean_ap: float | None
    confusion: ConfusionMatrix
    matches: tuple[MatchRecord, ...]
    per_class_accuracy: dict[str, float | None]
    # accuracy with group matching switched off, for comparison
    per_class_accuracy_one_to_one: dict[str, float | None]
    confusion_one_to_one: ConfusionMatrix


def evaluate(doc: DatasetDoc, preds: Sequence[Instance], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Score ``preds`` against the ground truth in ``doc``.

    mAP is the mean AP over classes that have ground truth.
    """
    cats = sorted(doc.categories, key=lambda c: c.id)
    per_class = {c.name: average_precision(doc, preds, c.id, cfg) for c in cats}
    present = [v for v in per_class.values() if v is not None]
    mean_ap = sum(present) / len(present) if present else None
    cm, records = match_corpus(doc, preds, cfg)
    if cfg.enable_group_matching:
        cm_plain, _ = match_corpus(doc, preds, replace(cfg, enable_group_matching=False))
    else:
        cm_plain = cm
    return EvalReport(
        config=cfg,
        per_class_ap=per_class,
        mean_ap=mean_ap,
        confusion=cm,
        matches=tuple(records),
        per_class_accuracy=cm.per_class_accuracy(),
        per_class_accuracy_one_to_one=cm_plain.per_class_accuracy(),
        confusion_one_to_one=cm_plain,
    )


def _cm_json(cm: ConfusionMatrix) -> dict[str, Any]:
    return {
        "labels": cm.labels,
        "category_ids": list(cm.category_ids),
        "counts": cm.counts.tolist(),
        "row_normalized": cm.row_normalized.tolist(),
    }


def report_to_dict(r: EvalReport, include_matches: bool = False) -> dict[str, Any]:
    out: dict[str, Any] = {
        "config": asdict(r.config),
        "per_class_ap": r.per_class_ap,
        "mAP": r.mean_ap,
        "confusion_matrix": _cm_json(r.confusion),
        "per_class_accuracy": r.per_class_accuracy,
        "confusion_matrix_one_to_one": _cm_json(r.confusion_one_to_one),
        "per_class_accuracy_one_to_one": r.per_class_accuracy_one_to_one,
        "match_counts": {
            kind: sum(1 for m in r.matches if m.kind == kind)
            for kind in ("one_to_one", "under_detection", "over_detection")
        },
    }
    if include_matches:
        out["matches"] = [
            {**asdict(m), "gt_ids": list(m.gt_ids), "pred_ids": list(m.pred_ids)} for m in r.matches
        ]
    return out


def format_table(cm: ConfusionMatrix) -> str:
    """Row-normalized matrix as whole percentages, ground truth down, prediction across."""
    labels = cm.labels
    norm = cm.row_normalized
    head = "Ground Truth"
    first = max(len(head), *(len(x) for x in labels))
    widths = [max(len(x), 4) for x in labels]
    lines = [
        " " * first + "  " + "Prediction",
        head.ljust(first) + "".join("  " + x.rjust(w) for x, w in zip(labels, widths)),
    ]
    for i, name in enumerate(labels):
        cells = [f"{round(norm[i, j] * 100):d}%".rjust(w) for j, w in enumerate(widths)]
        lines.append(name.ljust(first) + "".join("  " + c for c in cells))
    return "\n".join(lines) + "\n"


def format_report(r: EvalReport) -> str:
    mode = r.config.geometry_mode
    thr = r.config.iou_threshold
    lines = [f"{mode} AP@{thr:g}"]
    for name, ap in r.per_class_ap.items():
        lines.append(f"  {name}: " + ("n/a" if ap is None else f"{ap * 100:.1f}"))
    lines.append("  mAP: " + ("n/a" if r.mean_ap is None else f"{r.mean_ap * 100:.1f}"))
    lines.append("")
    lines.append(format_table(r.confusion))
    return "\n".join(lines)


MATCH_COLUMNS = ["kind", "image_id", "gt_ids", "pred_ids", "iou"]


def matches_csv(records: Sequence[MatchRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MATCH_COLUMNS)
    for m in records:
        w.writerow([m.kind, m.image_id, " ".join(map(str, m.gt_ids)), " ".join(map(str, m.pred_ids)), repr(m.iou)])
    return buf.getvalue()
