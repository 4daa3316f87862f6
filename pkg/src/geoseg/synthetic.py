"""Seeded synthetic corpora of rectangular buildings and noisy predictions."""

from __future__ import annotations

import numpy as np

from .coco_io import DatasetDoc, HeightClassScheme, ImageRecord, Instance, make_instance
from .geometry import Polygon


def _rect(x: float, y: float, w: float, h: float) -> Polygon:
    return Polygon((((x, y), (x + w, y), (x + w, y + h), (x, y + h)),))


def synthetic_corpus(
    width: int = 2048,
    height: int = 1536,
    n_scenes: int = 2,
    buildings_per_scene: int = 60,
    seed: int = 0,
    scheme: HeightClassScheme = HeightClassScheme(),
) -> DatasetDoc:
    """Scenes of non-overlapping footprints, some topped by a taller cap annotation."""
    rng = np.random.default_rng(seed)
    images, anns = [], []
    for s in range(n_scenes):
        img = ImageRecord(s + 1, f"scene_{s + 1:03d}.png", width, height, source_scene=f"scene_{s + 1:03d}")
        images.append(img)
        cell = 64
        slots = [(cx, cy) for cy in range(0, height - cell + 1, cell) for cx in range(0, width - cell + 1, cell)]
        picks = rng.choice(len(slots), size=min(buildings_per_scene, len(slots)), replace=False)
        for k in sorted(int(p) for p in picks):
            cx, cy = slots[k]
            w, h = (int(v) for v in rng.integers(16, 56, size=2))
            x, y = cx + int(rng.integers(0, cell - w + 1)), cy + int(rng.integers(0, cell - h + 1))
            base_h = float(np.round(rng.gamma(2.0, 8.0) + 3.0, 1))
            anns.append(make_instance(len(anns) + 1, img, scheme.category_for(base_h), _rect(x, y, w, h), height_m=base_h))
            if rng.random() < 0.1:
                # tall cap annotated on top of the base
                cap_h = float(np.round(base_h + rng.uniform(20, 40), 1))
                anns.append(make_instance(
                    len(anns) + 1, img, scheme.category_for(cap_h),
                    _rect(x + w // 4, y + h // 4, max(w // 2, 2), max(h // 2, 2)), height_m=cap_h,
                ))
    return DatasetDoc(tuple(images), tuple(anns), tuple(scheme.categories()), {"description": "synthetic"})


def synthetic_predictions(doc: DatasetDoc, seed: int = 1, n_classes: int | None = None) -> list[Instance]:
    """Jittered copies of the ground truth plus misses, false alarms and class slips."""
    rng = np.random.default_rng(seed)
    n_classes = n_classes or len(doc.categories)
    images = doc.image_index()
    preds: list[Instance] = []

    def add(img: ImageRecord, cat: int, poly: Polygon, score: float) -> None:
        preds.append(make_instance(len(preds) + 1, img, cat, poly, score=round(score, 4)))

    for ann in doc.annotations:
        img = images[ann.image_id]
        x, y, w, h = ann.bbox
        r = rng.random()
        if r < 0.1:
            continue
        cat = ann.category_id
        if rng.random() < 0.2:
            cat = int(np.clip(cat + rng.choice([-1, 1]), 1, n_classes))
        if r < 0.2 and w >= 8:
            # split into two side-by-side predictions
            half = w // 2
            add(img, cat, _rect(x, y, half, h), float(rng.uniform(0.5, 1.0)))
            add(img, cat, _rect(x + half, y, w - half, h), float(rng.uniform(0.5, 1.0)))
            continue
        dx, dy = (int(v) for v in rng.integers(-3, 4, size=2))
        add(img, cat, _rect(x + dx, y + dy, w, h), float(rng.uniform(0.3, 1.0)))
    for img in doc.images:
        for _ in range(int(rng.integers(0, 6))):
            x, y = rng.integers(0, img.width - 40), rng.integers(0, img.height - 40)
            add(img, int(rng.integers(1, n_classes + 1)), _rect(int(x), int(y), 20, 20), float(rng.uniform(0.1, 0.9)))
    return preds
