import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoseg.coco_io import ImageRecord, make_instance
from geoseg.quality_filter import FilterError, assess_image, filter_dataset, report_csv

from conftest import height_doc, rect_poly

SPOTS = [(0, 0), (20, 0), (0, 20), (20, 20)]


def gts(image, spots=SPOTS, first_id=1):
    return [make_instance(first_id + i, image, 1, rect_poly(x, y, 10, 10), height_m=5.0) for i, (x, y) in enumerate(spots)]


def preds(image, spots=SPOTS, first_id=1, score=0.9, shift=1):
    # a one-pixel shift of a 10x10 box keeps IOU at 90/110
    return [make_instance(first_id + i, image, 1, rect_poly(x + shift, y, 10, 10), score=score) for i, (x, y) in enumerate(spots)]


def test_perfect_agreement(image64):
    s = assess_image(gts(image64), preds(image64), image64)
    assert (s.missing_annotation_ratio, s.missing_prediction_ratio, s.discard) == (0.0, 0.0, False)


def test_one_of_four_found(image64):
    s = assess_image(gts(image64), preds(image64, SPOTS[:1]), image64)
    assert s.n_unmatched_annotations == 3
    assert s.missing_annotation_ratio == 0.75 and s.discard


def test_zero_annotations_three_predictions(image64):
    s = assess_image([], preds(image64, SPOTS[:3]), image64)
    assert s.missing_prediction_ratio == 1.0 and s.missing_annotation_ratio == 0.0 and s.discard


def test_empty_image_kept(image64):
    s = assess_image([], [], image64)
    assert (s.missing_annotation_ratio, s.missing_prediction_ratio, s.discard) == (0.0, 0.0, False)


def test_discard_is_strict(image64):
    s = assess_image(gts(image64), preds(image64, SPOTS[:2]), image64)
    assert s.missing_annotation_ratio == 0.5 and not s.discard


def test_many_to_one_allowed(image64):
    # two predictions on the same annotation both count as matched
    p = preds(image64, SPOTS[:1]) + preds(image64, SPOTS[:1], first_id=2, shift=0)
    s = assess_image(gts(image64, SPOTS[:1]), p, image64)
    assert s.n_unmatched_predictions == 0


def test_bad_threshold(image64):
    with pytest.raises(FilterError):
        assess_image([], [], image64, iou_threshold=0.0)


def three_images():
    imgs = [ImageRecord(i, f"i{i}.png", 64, 64) for i in (1, 2, 3)]
    g = gts(imgs[0]) + gts(imgs[1], first_id=5) + gts(imgs[2], first_id=9)
    return imgs, height_doc(imgs, g)


def test_all_perfect_identity():
    imgs, d = three_images()
    p = preds(imgs[0]) + preds(imgs[1], first_id=5) + preds(imgs[2], first_id=9)
    kept, report = filter_dataset(d, p)
    assert kept == d and len(report) == 3


def test_one_bad_image():
    imgs, d = three_images()
    p = preds(imgs[0]) + preds(imgs[1], SPOTS[:1], first_id=5) + preds(imgs[2], first_id=9)
    kept, report = filter_dataset(d, p)
    assert [i.id for i in kept.images] == [1, 3]
    assert [a.id for a in kept.annotations] == [1, 2, 3, 4, 9, 10, 11, 12]
    assert [s.discard for s in report] == [False, True, False]


def test_empty_predictions_discard_annotated_images():
    imgs, d = three_images()
    d = height_doc(imgs + [ImageRecord(4, "blank.png", 64, 64)], d.annotations)
    kept, report = filter_dataset(d, [])
    assert [i.id for i in kept.images] == [4]


def test_low_scores_ignored():
    imgs, d = three_images()
    p = preds(imgs[0], score=0.2) + preds(imgs[1], first_id=5) + preds(imgs[2], first_id=9)
    assert [s.discard for s in filter_dataset(d, p)[1]] == [True, False, False]
    assert [s.discard for s in filter_dataset(d, p, score_threshold=0.1)[1]] == [False] * 3


def test_unknown_image_rejected():
    imgs, d = three_images()
    with pytest.raises(FilterError, match="7"):
        filter_dataset(d, preds(ImageRecord(7, "x.png", 64, 64)))


def test_report_csv():
    imgs, d = three_images()
    text = report_csv(filter_dataset(d, [])[1])
    lines = text.splitlines()
    assert lines[0] == (
        "image_id,n_annotations,n_predictions,n_unmatched_annotations,n_unmatched_predictions,"
        "missing_annotation_ratio,missing_prediction_ratio,discard"
    )
    assert lines[1] == "1,4,0,4,0,1.0,0.0,true"


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50), st.integers(2, 14), st.integers(2, 14)), max_size=5),
    st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50), st.integers(2, 14), st.integers(2, 14)), max_size=5),
    st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.randoms(use_true_random=False),
)
def test_monotone_and_order_free(g_rects, p_rects, t1, t2, rnd):
    image = ImageRecord(1, "m.png", 64, 64)
    g = [make_instance(i + 1, image, 1, rect_poly(*r), height_m=1.0) for i, r in enumerate(g_rects)]
    p = [make_instance(i + 1, image, 1, rect_poly(*r), score=0.9) for i, r in enumerate(p_rects)]
    lo, hi = sorted((t1, t2))
    a, b = assess_image(g, p, image, lo), assess_image(g, p, image, hi)
    assert a.missing_annotation_ratio <= b.missing_annotation_ratio
    assert a.missing_prediction_ratio <= b.missing_prediction_ratio
    d = height_doc([image], g)
    shuffled = list(p)
    rnd.shuffle(shuffled)
    assert filter_dataset(d, shuffled, lo) == filter_dataset(d, p, lo)
