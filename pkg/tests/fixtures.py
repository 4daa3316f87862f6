"""Hand-built scenes and random corpora shared by several test modules."""

import numpy as np

from geoseg.coco_io import DatasetDoc, HeightClassScheme, ImageRecord, make_instance

from conftest import rect_mask, rect_poly

IMAGE = ImageRecord(1, "fixture.png", 64, 64)
CATS = tuple(HeightClassScheme().categories())


def gt(id, x, y, w, h, cat, image=IMAGE):
    return make_instance(id, image, cat, rect_poly(x, y, w, h))


def pred(id, x, y, w, h, cat, score=0.9, image=IMAGE):
    return make_instance(id, image, cat, rect_poly(x, y, w, h), score=score)


def doc(images, anns):
    return DatasetDoc(tuple(images), tuple(anns), CATS, {})


def under_detection_scene(pred_cat=3):
    """Two 5x10 class-3 buildings inside one 10x14 prediction.

    Each pairwise IOU is 50/140 = 5/14, the union IOU 100/140 = 5/7.
    """
    gts = [gt(1, 0, 0, 5, 10, 3), gt(2, 5, 0, 5, 10, 3)]
    return gts, [pred(1, 0, 0, 10, 14, pred_cat)]


def over_detection_scene(pred_cat=2):
    """One 20x10 class-2 building covered by an 8x10 and a 7x10 prediction.

    Pairwise IOUs are 80/200 = 2/5 and 70/200 = 7/20, the union IOU 150/200 = 3/4.
    """
    gts = [gt(1, 0, 0, 20, 10, 2)]
    return gts, [pred(1, 0, 0, 8, 10, pred_cat), pred(2, 13, 0, 7, 10, pred_cat, score=0.8)]


def confusion_scene():
    """One cross-class 1-to-1 match, one under-detection pair, one miss, one false alarm.

    Counts, rows ground truth and columns prediction (0m-15m, 15m-40m, 40m+, Background):

    ========  ==  ==  ==  ==
    0m-15m     0   1   0   0
    15m-40m    0   0   0   1
    40m+       0   0   2   0
    Bkg        1   0   0   0
    ========  ==  ==  ==  ==

    Without group matching the 40m+ row becomes ``0 0 0 2`` and the
    Background row ``1 0 1 0``.
    """
    gts = [
        gt(1, 0, 0, 10, 10, 1),
        gt(2, 20, 0, 5, 10, 3),
        gt(3, 25, 0, 5, 10, 3),
        gt(4, 40, 40, 5, 5, 2),
    ]
    preds = [
        pred(1, 0, 0, 10, 10, 2),
        pred(2, 20, 0, 10, 14, 3),
        pred(3, 0, 40, 5, 5, 1),
    ]
    return doc([IMAGE], gts), preds


CONFUSION_COUNTS = [[0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 2, 0], [1, 0, 0, 0]]
CONFUSION_COUNTS_PLAIN = [[0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 0, 2], [1, 0, 1, 0]]


def random_corpus(rng: np.random.Generator, n_images=2, max_gt=6, max_pred=6, size=32, as_mask=None):
    """Small random corpus of rectangular ground truth and jittered predictions.

    Predictions are partly copies of ground truth with shifted edges and
    partly free-floating, with coarse scores so ties occur.
    """
    images = [ImageRecord(i + 1, f"r{i}.png", size, size) for i in range(n_images)]
    gts, preds = [], []

    def rect():
        x, y = (int(v) for v in rng.integers(0, size - 2, 2))
        w, h = (int(v) for v in rng.integers(1, 12, 2))
        return x, y, min(w, size - x), min(h, size - y)

    def geom(r, img):
        mask = rng.random() < 0.5 if as_mask is None else as_mask
        return rect_mask(*r, img.width, img.height) if mask else rect_poly(*r)

    for img in images:
        rects = [rect() for _ in range(int(rng.integers(0, max_gt + 1)))]
        for r in rects:
            gts.append(make_instance(len(gts) + 1, img, int(rng.integers(1, 4)), geom(r, img)))
        for _ in range(int(rng.integers(0, max_pred + 1))):
            if rects and rng.random() < 0.7:
                x, y, w, h = rects[int(rng.integers(len(rects)))]
                dx, dy, dw, dh = (int(v) for v in rng.integers(-2, 3, 4))
                x, y = min(max(x + dx, 0), size - 1), min(max(y + dy, 0), size - 1)
                r = (x, y, max(1, min(w + dw, size - x)), max(1, min(h + dh, size - y)))
            else:
                r = rect()
            score = float(rng.choice([0.3, 0.5, 0.6, 0.9, 1.0]))
            cat = int(rng.integers(1, 4))
            preds.append(make_instance(len(preds) + 1, img, cat, geom(r, img), score=score))
    return doc(images, gts), preds
