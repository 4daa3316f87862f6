import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from geoseg.coco_io import DatasetDoc, HeightClassScheme, ImageRecord, make_instance  # noqa: E402
from geoseg.geometry import PixelMask, Polygon  # noqa: E402


def rect_array(x, y, w, h, width, height):
    arr = np.zeros((height, width), dtype=bool)
    arr[max(y, 0):max(y + h, 0), max(x, 0):max(x + w, 0)] = True
    return arr


def rect_mask(x, y, w, h, width=64, height=64):
    return PixelMask.from_array(rect_array(x, y, w, h, width, height))


def rect_poly(x, y, w, h):
    return Polygon((((x, y), (x + w, y), (x + w, y + h), (x, y + h)),))


def height_doc(images, anns):
    return DatasetDoc(tuple(images), tuple(anns), tuple(HeightClassScheme().categories()), {})


@pytest.fixture
def image64():
    return ImageRecord(1, "img_001.png", 64, 64)


@pytest.fixture
def make_rect(image64):
    """Instance factory: make_rect(id, x, y, w, h, cat=1, height_m=None, score=None, image=image64)."""

    def factory(id, x, y, w, h, cat=1, height_m=None, score=None, image=None, as_mask=False):
        img = image or image64
        geom = rect_mask(x, y, w, h, img.width, img.height) if as_mask else rect_poly(x, y, w, h)
        return make_instance(id, img, cat, geom, height_m=height_m, score=score)

    return factory


# ------------------------------------------------------ acceptance summary

ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
