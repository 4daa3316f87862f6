"""Screening of annotated images against a reference model's predictions.

An image is dropped when too many of its annotations have no overlapping
prediction, or too many predictions have no overlapping annotation. Both
sides are matched class-agnostically and many-to-one.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields, replace
from typing import Sequence

from .coco_io import DatasetDoc, ImageRecord, Instance
from .evaluation.matching import pairwise_iou


class FilterError(ValueError):
    pass


@dataclass(frozen=True)
class ImageQualityStats:
    image_id: int
    n_annotations: int
    n_predictions: int
    n_unmatched_annotations: int
    n_unmatched_predictions: int
    missing_annotation_ratio: float
    missing_prediction_ratio: float
    discard: bool


def assess_image(
    gt: Sequence[Instance],
    preds: Sequence[Instance],
    image: ImageRecord,
    iou_threshold: float = 0.5,
    discard_ratio: float = 0.5,
    geometry_mode: str = "mask",
) -> ImageQualityStats:
    """Count annotations and predictions that found no partner.

    ``missing_annotation_ratio`` is the share of annotations with no
    prediction at ``iou >= iou_threshold``; ``missing_prediction_ratio`` the
    share of predictions with no such annotation. A ratio with a zero
    denominator is 0. The image is discarded when either ratio is strictly
    above ``discard_ratio``.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise FilterError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    ious = pairwise_iou(gt, preds, image, geometry_mode)
    hit = ious >= iou_threshold
    n_gt, n_pred = len(gt), len(preds)
    un_gt = int((~hit.any(axis=1)).sum()) if n_gt else 0
    un_pred = int((~hit.any(axis=0)).sum()) if n_pred else 0
    miss_ann = un_gt / n_gt if n_gt else 0.0
    miss_pred = un_pred / n_pred if n_pred else 0.0
    return ImageQualityStats(
        image_id=image.id,
        n_annotations=n_gt,
        n_predictions=n_pred,
        n_unmatched_annotations=un_gt,
        n_unmatched_predictions=un_pred,
        missing_annotation_ratio=miss_ann,
        missing_prediction_ratio=miss_pred,
        discard=miss_ann > discard_ratio or miss_pred > discard_ratio,
    )


def filter_dataset(
    d: DatasetDoc,
    preds: Sequence[Instance],
    iou_threshold: float = 0.5,
    discard_ratio: float = 0.5,
    score_threshold: float = 0.5,
    geometry_mode: str = "mask",
) -> tuple[DatasetDoc, list[ImageQualityStats]]:
    """Drop images whose annotations disagree with the reference predictions.

    Predictions scoring below ``score_threshold`` are ignored. Returns the
    kept document (images and their annotations untouched) and one stats row
    per image in ascending image id order.

    Raises:
        FilterError: a prediction references an image not in ``d``.
    """
    images = d.image_index()
    bad = sorted({p.image_id for p in preds if p.image_id not in images})
    if bad:
        raise FilterError(f"predictions reference unknown image ids {bad}")
    gt_by_image = d.annotations_by_image()
    pred_by_image: dict[int, list[Instance]] = {}
    for p in preds:
        if p.score is None or p.score >= score_threshold:
            pred_by_image.setdefault(p.image_id, []).append(p)
    report = []
    for image_id in sorted(images):
        report.append(assess_image(
            sorted(gt_by_image.get(image_id, []), key=lambda a: a.id),
            sorted(pred_by_image.get(image_id, []), key=lambda a: a.id),
            images[image_id],
            iou_threshold,
            discard_ratio,
            geometry_mode,
        ))
    keep = {s.image_id for s in report if not s.discard}
    kept = replace(
        d,
        images=tuple(i for i in d.images if i.id in keep),
        annotations=tuple(a for a in d.annotations if a.image_id in keep),
    )
    return kept, report


REPORT_COLUMNS = [f.name for f in fields(ImageQualityStats)]


def report_csv(report: Sequence[ImageQualityStats]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for s in report:
        row = [getattr(s, c) for c in REPORT_COLUMNS]
        writer.writerow([str(v).lower() if isinstance(v, bool) else v for v in row])
    return buf.getvalue()
