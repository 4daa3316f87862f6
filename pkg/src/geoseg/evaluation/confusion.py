"""Detection confusion matrix with a Background row and column."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..coco_io import DatasetDoc, Instance
from .matching import ONE_TO_ONE, OVER_DETECTION, UNDER_DETECTION, EvalConfig, MatchRecord, match_image

BACKGROUND = "Background"


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions; the last of each is Background."""

    classes: tuple[str, ...]
    category_ids: tuple[int, ...]
    counts: np.ndarray

    @property
    def labels(self) -> list[str]:
        return [*self.classes, BACKGROUND]

    @property
    def row_normalized(self) -> np.ndarray:
        sums = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(sums > 0, self.counts / np.where(sums > 0, sums, 1), 0.0)
        return out

    def per_class_accuracy(self) -> dict[str, float | None]:
        norm = self.row_normalized
        sums = self.counts.sum(axis=1)
        return {
            name: (float(norm[i, i]) if sums[i] > 0 else None)
            for i, name in enumerate(self.classes)
        }


def accumulate(
    counts: np.ndarray,
    index: dict[int, int],
    records: Sequence[MatchRecord],
    unmatched_gts: Sequence[Instance],
    unmatched_preds: Sequence[Instance],
) -> None:
    """Add one image's matches to ``counts`` in place."""
    bg = counts.shape[0] - 1
    for rec in records:
        g, p = index[rec.gt_class], index[rec.pred_class]
        if rec.kind == ONE_TO_ONE:
            counts[g, p] += 1
        elif rec.kind == UNDER_DETECTION:
            counts[g, p] += len(rec.gt_ids)
        elif rec.kind == OVER_DETECTION:
            counts[g, p] += 1
    for g in unmatched_gts:
        counts[index[g.category_id], bg] += 1
    for p in unmatched_preds:
        counts[bg, index[p.category_id]] += 1


def match_corpus(
    doc: DatasetDoc,
    preds: Sequence[Instance],
    cfg: EvalConfig = EvalConfig(),
) -> tuple[ConfusionMatrix, list[MatchRecord]]:
    """Match every image and tally the confusion matrix.

    Predictions below ``cfg.score_threshold`` are dropped first. A
    one-to-one match adds one count at (gt class, predicted class); an
    under-detection adds one diagonal count per covered ground truth; an
    over-detection adds one diagonal count for its ground truth and absorbs
    the extra predictions. Leftovers go to the Background column (missed
    ground truth) or row (spurious predictions).
    """
    cats = sorted(doc.categories, key=lambda c: c.id)
    index = {c.id: i for i, c in enumerate(cats)}
    n = len(cats) + 1
    counts = np.zeros((n, n), dtype=np.int64)
    images = doc.image_index()
    gt_by_image = doc.annotations_by_image()
    pred_by_image: dict[int, list[Instance]] = {}
    for p in preds:
        if p.score is None or p.score >= cfg.score_threshold:
            pred_by_image.setdefault(p.image_id, []).append(p)
    records: list[MatchRecord] = []
    for image_id in sorted(images):
        m = match_image(gt_by_image.get(image_id, []), pred_by_image.get(image_id, []), images[image_id], cfg)
        accumulate(counts, index, m.records, m.unmatched_gts, m.unmatched_preds)
        records.extend(m.records)
    cm = ConfusionMatrix(tuple(c.name for c in cats), tuple(c.id for c in cats), counts)
    return cm, records


def confusion_matrix(
    doc: DatasetDoc,
    preds: Sequence[Instance],
    cfg: EvalConfig = EvalConfig(),
) -> ConfusionMatrix:
    return match_corpus(doc, preds, cfg)[0]
