"""Prediction-to-ground-truth matching on a single image.

Matching runs in two stages. First a greedy one-to-one pass pairs
instances by descending IOU regardless of class. Then the leftovers are
searched for group matches of one class:

* under-detection: one prediction spans several ground truths, and the
  union of those ground truths overlaps the prediction well enough;
* over-detection: several predictions jointly cover one ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence, Union

import numpy as np

from ..coco_io import ImageRecord, Instance, instance_to_mask
from ..geometry import GeometryError, PixelMask, box_group_iou, box_iou, iou, union_masks

GeometryMode = Literal["bbox", "mask"]
Region = Union[PixelMask, tuple]

ONE_TO_ONE = "one_to_one"
UNDER_DETECTION = "under_detection"
OVER_DETECTION = "over_detection"


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    score_threshold: float = 0.5
    geometry_mode: GeometryMode = "mask"
    enable_group_matching: bool = True

    def __post_init__(self) -> None:
        for name in ("iou_threshold", "score_threshold"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.geometry_mode not in ("bbox", "mask"):
            raise ValueError(f"geometry_mode must be 'bbox' or 'mask', got {self.geometry_mode!r}")


@dataclass(frozen=True)
class MatchRecord:
    kind: str
    image_id: int
    gt_ids: tuple[int, ...]
    pred_ids: tuple[int, ...]
    iou: float
    gt_class: int
    pred_class: int


@dataclass
class ImageMatches:
    records: list[MatchRecord] = field(default_factory=list)
    unmatched_gts: list[Instance] = field(default_factory=list)
    unmatched_preds: list[Instance] = field(default_factory=list)


class RegionCache:
    """Memoizes the mask or box used for IOU of each instance."""

    def __init__(self, image: ImageRecord, mode: GeometryMode):
        self.image = image
        self.mode = mode
        # keyed by object identity; the instance is held so the key stays valid
        self._cache: dict[int, tuple[Instance, Region]] = {}

    def __call__(self, inst: Instance) -> Region:
        hit = self._cache.get(id(inst))
        if hit is None:
            if self.mode == "mask":
                region: Region = instance_to_mask(inst, self.image)
            else:
                region = tuple(float(v) for v in inst.bbox)
            hit = (inst, region)
            self._cache[id(inst)] = hit
        return hit[1]


def _region_empty(r: Region) -> bool:
    if isinstance(r, PixelMask):
        return r.is_empty()
    return r[2] <= 0 or r[3] <= 0


def region_iou(a: Region, b: Region) -> float:
    """IOU that treats a pair of empty regions as non-overlapping."""
    if _region_empty(a) or _region_empty(b):
        return 0.0
    if isinstance(a, PixelMask):
        return iou(a, b)
    return box_iou(a, b)


def region_group_iou(group: Sequence[Region], other: Region) -> float:
    if isinstance(other, PixelMask):
        merged = union_masks(group)
        if merged.is_empty() and other.is_empty():
            return 0.0
        return iou(merged, other)
    try:
        return box_group_iou(group, other)
    except GeometryError:
        return 0.0


def _boxes_touch(a: Region, b: Region) -> bool:
    ax, ay, aw, ah = a.bbox if isinstance(a, PixelMask) else a
    bx, by, bw, bh = b.bbox if isinstance(b, PixelMask) else b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def pairwise_iou(
    gts: Sequence[Instance],
    preds: Sequence[Instance],
    image: ImageRecord,
    mode: GeometryMode = "mask",
    regions: RegionCache | None = None,
) -> np.ndarray:
    """``(len(gts), len(preds))`` IOU matrix; pairs with disjoint boxes are 0."""
    regions = regions or RegionCache(image, mode)
    out = np.zeros((len(gts), len(preds)), dtype=np.float64)
    pr = [regions(p) for p in preds]
    for i, g in enumerate(gts):
        gr = regions(g)
        for j, p in enumerate(pr):
            if _boxes_touch(gr, p):
                out[i, j] = region_iou(gr, p)
    return out


def _score(inst: Instance) -> float:
    return inst.score if inst.score is not None else 0.0


def greedy_match(
    gts: Sequence[Instance],
    preds: Sequence[Instance],
    image: ImageRecord,
    cfg: EvalConfig = EvalConfig(),
    regions: RegionCache | None = None,
) -> tuple[list[MatchRecord], list[Instance], list[Instance]]:
    """Class-agnostic one-to-one matching by descending IOU.

    Candidate pairs need ``iou >= cfg.iou_threshold``. Ties fall back to
    higher prediction score, then lower gt id, then lower prediction id.
    """
    regions = regions or RegionCache(image, cfg.geometry_mode)
    ious = pairwise_iou(gts, preds, image, cfg.geometry_mode, regions)
    cands = [
        (-ious[i, j], -_score(preds[j]), gts[i].id, preds[j].id, i, j)
        for i, j in zip(*np.nonzero(ious >= cfg.iou_threshold))
    ]
    cands.sort()
    used_g: set[int] = set()
    used_p: set[int] = set()
    matches = []
    for neg_iou, _, _, _, i, j in cands:
        if i in used_g or j in used_p:
            continue
        used_g.add(i)
        used_p.add(j)
        matches.append(MatchRecord(
            ONE_TO_ONE, image.id, (gts[i].id,), (preds[j].id,), -neg_iou,
            gts[i].category_id, preds[j].category_id,
        ))
    un_g = [g for i, g in enumerate(gts) if i not in used_g]
    un_p = [p for j, p in enumerate(preds) if j not in used_p]
    return matches, un_g, un_p


def _resolve_group(
    single: Instance,
    others: Sequence[Instance],
    image: ImageRecord,
    cfg: EvalConfig,
    regions: RegionCache | None,
) -> tuple[list[Instance], float] | None:
    regions = regions or RegionCache(image, cfg.geometry_mode)
    target = regions(single)
    group = [
        o for o in sorted(others, key=lambda o: o.id)
        if o.category_id == single.category_id
        and _boxes_touch(regions(o), target)
        and region_iou(regions(o), target) > 0
    ]
    if len(group) < 2:
        return None
    score = region_group_iou([regions(o) for o in group], target)
    if score < cfg.iou_threshold:
        return None
    return group, score


def resolve_under_detection(
    pred: Instance,
    gts: Sequence[Instance],
    image: ImageRecord,
    cfg: EvalConfig = EvalConfig(),
    regions: RegionCache | None = None,
) -> MatchRecord | None:
    """Credit one prediction that spans two or more same-class ground truths."""
    found = _resolve_group(pred, gts, image, cfg, regions)
    if found is None:
        return None
    group, score = found
    c = pred.category_id
    return MatchRecord(UNDER_DETECTION, image.id, tuple(g.id for g in group), (pred.id,), score, c, c)


def resolve_over_detection(
    gt: Instance,
    preds: Sequence[Instance],
    image: ImageRecord,
    cfg: EvalConfig = EvalConfig(),
    regions: RegionCache | None = None,
) -> MatchRecord | None:
    """Credit two or more same-class predictions that jointly cover one ground truth."""
    found = _resolve_group(gt, preds, image, cfg, regions)
    if found is None:
        return None
    group, score = found
    c = gt.category_id
    return MatchRecord(OVER_DETECTION, image.id, (gt.id,), tuple(p.id for p in group), score, c, c)


def match_image(
    gts: Sequence[Instance],
    preds: Sequence[Instance],
    image: ImageRecord,
    cfg: EvalConfig = EvalConfig(),
) -> ImageMatches:
    """Full matching for one image.

    After the greedy pass, leftover predictions are tried as
    under-detections in descending score order, then leftover ground truths
    as over-detections in ascending id order. Every instance ends up in
    exactly one record or unmatched list.
    """
    regions = RegionCache(image, cfg.geometry_mode)
    gts = sorted(gts, key=lambda g: g.id)
    preds = sorted(preds, key=lambda p: p.id)
    records, un_g, un_p = greedy_match(gts, preds, image, cfg, regions)
    if cfg.enable_group_matching:
        for pred in sorted(un_p, key=lambda p: (-_score(p), p.id)):
            rec = resolve_under_detection(pred, un_g, image, cfg, regions)
            if rec is not None:
                records.append(rec)
                taken = set(rec.gt_ids)
                un_g = [g for g in un_g if g.id not in taken]
                un_p = [p for p in un_p if p.id != pred.id]
        for gt in list(un_g):
            rec = resolve_over_detection(gt, un_p, image, cfg, regions)
            if rec is not None:
                records.append(rec)
                taken = set(rec.pred_ids)
                un_p = [p for p in un_p if p.id not in taken]
                un_g = [g for g in un_g if g.id != gt.id]
    return ImageMatches(records, un_g, un_p)
