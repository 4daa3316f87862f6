"""Per-class average precision at a fixed IOU threshold.

Recall thresholds are the 101 points ``0, 0.01, ..., 1`` and precision at
each is the best precision reached at that recall or beyond. Recall is
compared as an exact fraction so thresholds like 3/10 are not lost to
float rounding.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..coco_io import DatasetDoc, Instance
from .matching import EvalConfig, RegionCache, pairwise_iou

RECALL_POINTS = 101


def _score_key(p: Instance) -> tuple[float, int]:
    return (-(p.score if p.score is not None else 0.0), p.id)


def match_flags(
    doc: DatasetDoc,
    preds: Sequence[Instance],
    category_id: int,
    cfg: EvalConfig = EvalConfig(),
) -> tuple[np.ndarray, int]:
    """True-positive flags for the class's predictions in ranked order, and the gt count.

    Predictions are ranked by descending score, then ascending id. Each
    claims the unclaimed same-class ground truth on its image with the
    highest IOU at or above the threshold (lowest gt id on ties).
    """
    images = doc.image_index()
    gts: dict[int, list[Instance]] = {}
    for g in doc.annotations:
        if g.category_id == category_id:
            gts.setdefault(g.image_id, []).append(g)
    n_gt = sum(len(v) for v in gts.values())
    ranked = sorted((p for p in preds if p.category_id == category_id), key=_score_key)

    by_image: dict[int, list[int]] = {}
    for rank, p in enumerate(ranked):
        by_image.setdefault(p.image_id, []).append(rank)
    ious: dict[int, np.ndarray] = {}
    for image_id, ranks in by_image.items():
        g = sorted(gts.get(image_id, []), key=lambda a: a.id)
        gts[image_id] = g
        if g:
            regions = RegionCache(images[image_id], cfg.geometry_mode)
            ious[image_id] = pairwise_iou(g, [ranked[r] for r in ranks], images[image_id], cfg.geometry_mode, regions)

    tp = np.zeros(len(ranked), dtype=bool)
    claimed: dict[int, set[int]] = {}
    column: dict[int, int] = {}
    for rank, p in enumerate(ranked):
        col = column.get(p.image_id, 0)
        column[p.image_id] = col + 1
        if p.image_id not in ious:
            continue
        taken = claimed.setdefault(p.image_id, set())
        scores = ious[p.image_id][:, col]
        best, best_iou = -1, -1.0
        for i, s in enumerate(scores):
            # strict '>' keeps the lowest gt index on ties
            if i not in taken and s >= cfg.iou_threshold and s > best_iou:
                best, best_iou = i, s
        if best >= 0:
            taken.add(best)
            tp[rank] = True
    return tp, n_gt


def ap_from_flags(tp: np.ndarray, n_gt: int) -> float | None:
    """101-point interpolated AP; ``None`` when there is no ground truth."""
    if n_gt == 0:
        return None
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    precision = tp_cum / np.arange(1, tp.size + 1)
    # best precision at this point or any later one
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ks = np.arange(RECALL_POINTS)
    # recall >= k/100  <=>  tp >= ceil(k * n_gt / 100)
    need = -(-ks * n_gt // (RECALL_POINTS - 1))
    idx = np.searchsorted(tp_cum, need, side="left")
    vals = np.where(idx < tp.size, envelope[np.minimum(idx, tp.size - 1)], 0.0)
    return float(vals.sum() / RECALL_POINTS)


def average_precision(
    doc: DatasetDoc,
    preds: Sequence[Instance],
    category_id: int,
    cfg: EvalConfig = EvalConfig(),
) -> float | None:
    """AP of one class over the whole corpus; ``None`` if the class has no ground truth.

    Group matching plays no part here; only one-to-one same-class matches
    count as true positives.
    """
    tp, n_gt = match_flags(doc, preds, category_id, cfg)
    return ap_from_flags(tp, n_gt)
