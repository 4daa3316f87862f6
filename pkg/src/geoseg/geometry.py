"""Rasterized mask geometry.

Masks are stored as COCO-style uncompressed run-length counts in column-major
order with a leading background run. Array views use the ``(height, width)``
row-major layout that numpy and PIL use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "GeometryError",
    "PixelMask",
    "Polygon",
    "ProbabilityMap",
    "adaptive_threshold",
    "area",
    "box_iou",
    "connected_components",
    "intersection_area",
    "iou",
    "load_probability_map",
    "max_overlap_ratio",
    "rasterize",
    "rasterize_window",
    "union_masks",
]

# Masks at or below this many pixels are decoded whole and cached on first use.
_CACHE_LIMIT = 4_000_000


class GeometryError(ValueError):
    """Raised for invalid or degenerate geometry."""


def _counts_from_indices(idx: np.ndarray, n: int) -> tuple[int, ...]:
    """Run-length counts for a sorted array of foreground flat indices."""
    if idx.size == 0:
        return (n,)
    breaks = np.flatnonzero(np.diff(idx) != 1) + 1
    starts = idx[np.r_[0, breaks]]
    ends = idx[np.r_[breaks - 1, idx.size - 1]] + 1
    bounds = np.empty(2 * starts.size + 2, dtype=np.int64)
    bounds[0] = 0
    bounds[1:-1:2] = starts
    bounds[2:-1:2] = ends
    bounds[-1] = n
    runs = np.diff(bounds)
    # trailing background run may be zero; a leading one is kept by convention
    if runs[-1] == 0:
        runs = runs[:-1]
    return tuple(int(r) for r in runs)


@dataclass(frozen=True)
class PixelMask:
    """Binary raster region stored as column-major run-length counts.

    Attributes:
        width: Mask width in pixels.
        height: Mask height in pixels.
        counts: Alternating background/foreground run lengths. The first run
            is background and may be zero; no other run may be zero.
    """

    width: int
    height: int
    counts: tuple[int, ...]
    _array: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"mask dimensions must be positive, got {self.width}x{self.height}")
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if not counts:
            raise GeometryError("mask counts must not be empty")
        if any(c < 0 for c in counts):
            raise GeometryError("run counts must be non-negative")
        if any(c == 0 for c in counts[1:]):
            raise GeometryError("only the leading run count may be zero")
        total = sum(counts)
        if total != self.width * self.height:
            raise GeometryError(
                f"run counts sum to {total}, expected {self.width * self.height}"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> PixelMask:
        """Encode a boolean ``(height, width)`` array."""
        arr = np.asarray(arr, dtype=bool)
        if arr.ndim != 2:
            raise GeometryError(f"expected a 2-D array, got shape {arr.shape}")
        h, w = arr.shape
        idx = np.flatnonzero(arr.ravel(order="F"))
        mask = cls(w, h, _counts_from_indices(idx, w * h))
        if w * h <= _CACHE_LIMIT:
            cached = arr.copy()
            cached.flags.writeable = False
            object.__setattr__(mask, "_array", cached)
        return mask

    @classmethod
    def from_window(cls, sub: np.ndarray, x0: int, y0: int, width: int, height: int) -> PixelMask:
        """Encode a boolean sub-array placed at ``(x0, y0)`` inside a larger canvas.

        Foreground falling outside the canvas is dropped.
        """
        sub = np.asarray(sub, dtype=bool)
        ys, xs = np.nonzero(sub)
        xs = xs + x0
        ys = ys + y0
        keep = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
        idx = np.sort(xs[keep].astype(np.int64) * height + ys[keep])
        return cls(width, height, _counts_from_indices(idx, width * height))

    @classmethod
    def empty(cls, width: int, height: int) -> PixelMask:
        return cls(width, height, (width * height,))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def area(self) -> int:
        return int(sum(self.counts[1::2]))

    def is_empty(self) -> bool:
        return len(self.counts) < 2

    def _runs(self) -> tuple[np.ndarray, np.ndarray]:
        """Start offsets and lengths of the foreground runs."""
        c = np.asarray(self.counts, dtype=np.int64)
        offsets = np.concatenate(([0], np.cumsum(c)[:-1]))
        return offsets[1::2], c[1::2]

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """Tight ``(x, y, w, h)`` box of the foreground; zeros when empty."""
        if self.is_empty():
            return (0, 0, 0, 0)
        h = self.height
        starts, lengths = self._runs()
        ends = starts + lengths - 1
        xs0, xs1 = starts // h, ends // h
        same = xs0 == xs1
        # a run spanning columns reaches both the top and bottom rows
        y_lo = np.where(same, starts % h, 0)
        y_hi = np.where(same, ends % h, h - 1)
        x_min, x_max = int(xs0.min()), int(xs1.max())
        y_min, y_max = int(y_lo.min()), int(y_hi.max())
        return (x_min, y_min, x_max - x_min + 1, y_max - y_min + 1)

    def to_array(self) -> np.ndarray:
        """Decode to a read-only boolean ``(height, width)`` array."""
        if self._array is not None:
            return self._array
        values = (np.arange(len(self.counts)) % 2).astype(bool)
        flat = np.repeat(values, self.counts)
        arr = flat.reshape(self.width, self.height).T
        arr.flags.writeable = False
        if self.width * self.height <= _CACHE_LIMIT:
            object.__setattr__(self, "_array", arr)
        return arr

    def window(self, x0: int, y0: int, w: int, h: int) -> np.ndarray:
        """Boolean array for the window ``[x0, x0+w) x [y0, y0+h)``.

        Parts of the window outside the mask read as background. Only the
        columns under the window are decoded.
        """
        out = np.zeros((h, w), dtype=bool)
        cx0, cx1 = max(x0, 0), min(x0 + w, self.width)
        cy0, cy1 = max(y0, 0), min(y0 + h, self.height)
        if cx0 >= cx1 or cy0 >= cy1:
            return out
        if self._array is not None or self.width * self.height <= _CACHE_LIMIT:
            out[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0] = self.to_array()[cy0:cy1, cx0:cx1]
            return out
        H = self.height
        band_lo, band_hi = cx0 * H, cx1 * H
        starts, lengths = self._runs()
        s = np.clip(starts, band_lo, band_hi) - band_lo
        e = np.clip(starts + lengths, band_lo, band_hi) - band_lo
        keep = e > s
        delta = np.zeros(band_hi - band_lo + 1, dtype=np.int32)
        np.add.at(delta, s[keep], 1)
        np.add.at(delta, e[keep], -1)
        band = np.cumsum(delta[:-1]) > 0
        cols = band.reshape(cx1 - cx0, H).T
        out[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0] = cols[cy0:cy1]
        return out


@dataclass(frozen=True)
class Polygon:
    """Closed vertex rings in pixel coordinates; first exterior, rest holes.

    Fill uses the even-odd rule across all rings.
    """

    rings: tuple[tuple[tuple[float, float], ...], ...]

    @classmethod
    def from_coco(cls, segmentation: Sequence[Sequence[float]]) -> Polygon:
        """Build from COCO flat ``[x0, y0, x1, y1, ...]`` lists."""
        rings = []
        for flat in segmentation:
            if len(flat) % 2:
                raise GeometryError("polygon coordinate list has odd length")
            rings.append(tuple((flat[i], flat[i + 1]) for i in range(0, len(flat), 2)))
        return cls(tuple(rings))

    def to_coco(self) -> list[list[float]]:
        return [[c for xy in ring for c in xy] for ring in self.rings]

    def translate(self, dx: float, dy: float) -> Polygon:
        return Polygon(tuple(tuple((x + dx, y + dy) for x, y in ring) for ring in self.rings))

    def valid_rings(self) -> list[tuple[tuple[float, float], ...]]:
        return [r for r in self.rings if len(r) >= 3]


def _edges(poly: Polygon) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    rings = poly.valid_rings()
    if not rings:
        raise GeometryError("degenerate geometry")
    x0, y0, x1, y1 = [], [], [], []
    for ring in rings:
        pts = np.asarray(ring, dtype=np.float64)
        nxt = np.roll(pts, -1, axis=0)
        x0.append(pts[:, 0])
        y0.append(pts[:, 1])
        x1.append(nxt[:, 0])
        y1.append(nxt[:, 1])
    return tuple(np.concatenate(a) for a in (x0, y0, x1, y1))  # type: ignore[return-value]


def rasterize_window(poly: Polygon, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Rasterize ``poly`` into the window ``[x0, x0+w) x [y0, y0+h)``.

    A pixel is set when its center lies inside the polygon under the
    even-odd rule. Returns a boolean ``(h, w)`` array in window coordinates.
    """
    ex0, ey0, ex1, ey1 = _edges(poly)
    out = np.zeros((h, w), dtype=bool)
    ys = np.concatenate((ey0, ey1))
    xs = np.concatenate((ex0, ex1))
    # rows/cols whose centers can fall inside the vertex extent
    r_lo = max(y0, int(np.floor(ys.min() - 0.5)))
    r_hi = min(y0 + h, int(np.ceil(ys.max() - 0.5)) + 1)
    c_lo = max(x0, int(np.floor(xs.min() - 0.5)))
    c_hi = min(x0 + w, int(np.ceil(xs.max() - 0.5)) + 1)
    if r_lo >= r_hi or c_lo >= c_hi:
        return out
    xc = np.arange(c_lo, c_hi, dtype=np.float64) + 0.5
    dy = ey1 - ey0
    for row in range(r_lo, r_hi):
        yc = row + 0.5
        crosses = (ey0 > yc) != (ey1 > yc)
        if not crosses.any():
            continue
        ix = (ex1[crosses] - ex0[crosses]) * (yc - ey0[crosses]) / dy[crosses] + ex0[crosses]
        ix.sort()
        right = ix.size - np.searchsorted(ix, xc, side="right")
        out[row - y0, c_lo - x0:c_hi - x0] = (right % 2).astype(bool)
    return out


def rasterize(poly: Polygon, width: int, height: int) -> PixelMask:
    """Rasterize a polygon onto a ``width`` x ``height`` canvas.

    Geometry outside the canvas is clipped away.

    Raises:
        GeometryError: if the canvas is empty or every ring has fewer than
            three vertices.
    """
    if width <= 0 or height <= 0:
        raise GeometryError("raster dimensions must be positive")
    ex0, ey0, ex1, ey1 = _edges(poly)
    xs = np.concatenate((ex0, ex1))
    ys = np.concatenate((ey0, ey1))
    x_lo = min(max(int(np.floor(xs.min())) - 1, 0), width)
    y_lo = min(max(int(np.floor(ys.min())) - 1, 0), height)
    x_hi = max(min(int(np.ceil(xs.max())) + 1, width), x_lo)
    y_hi = max(min(int(np.ceil(ys.max())) + 1, height), y_lo)
    if x_hi <= x_lo or y_hi <= y_lo:
        return PixelMask.empty(width, height)
    sub = rasterize_window(poly, x_lo, y_lo, x_hi - x_lo, y_hi - y_lo)
    return PixelMask.from_window(sub, x_lo, y_lo, width, height)


def area(m: PixelMask) -> int:
    return m.area


def _check_same(a: PixelMask, b: PixelMask) -> None:
    if a.shape != b.shape:
        raise GeometryError(f"mask dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}")


def _box_overlap(a: PixelMask, b: PixelMask) -> tuple[int, int, int, int] | None:
    ax, ay, aw, ah = a.bbox
    bx, by, bw, bh = b.bbox
    x0, y0 = max(ax, bx), max(ay, by)
    x1, y1 = min(ax + aw, bx + bw), min(ay + ah, by + bh)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def intersection_area(a: PixelMask, b: PixelMask) -> int:
    """Number of pixels set in both masks."""
    _check_same(a, b)
    win = _box_overlap(a, b)
    if win is None:
        return 0
    return int(np.count_nonzero(a.window(*win) & b.window(*win)))


def iou(a: PixelMask, b: PixelMask) -> float:
    """Intersection over union.

    Raises:
        GeometryError: when both masks are empty ("undefined IOU").
    """
    _check_same(a, b)
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union == 0:
        raise GeometryError("undefined IOU")
    return inter / union


def max_overlap_ratio(a: PixelMask, b: PixelMask) -> float:
    """Largest of intersection/area(a) and intersection/area(b).

    Unlike IOU this reaches 1.0 whenever one mask contains the other,
    regardless of how different their sizes are.
    """
    _check_same(a, b)
    if a.is_empty() or b.is_empty():
        raise GeometryError("overlap ratio of an empty mask")
    inter = intersection_area(a, b)
    return max(inter / a.area, inter / b.area)


def union_masks(ms: Iterable[PixelMask]) -> PixelMask:
    ms = list(ms)
    if not ms:
        raise GeometryError("union of an empty mask list")
    first = ms[0]
    for m in ms[1:]:
        _check_same(first, m)
    if len(ms) == 1:
        return first
    boxes = [m.bbox for m in ms if not m.is_empty()]
    if not boxes:
        return PixelMask.empty(first.width, first.height)
    x0 = min(b[0] for b in boxes)
    y0 = min(b[1] for b in boxes)
    x1 = max(b[0] + b[2] for b in boxes)
    y1 = max(b[1] + b[3] for b in boxes)
    acc = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    for m in ms:
        acc |= m.window(x0, y0, x1 - x0, y1 - y0)
    return PixelMask.from_window(acc, x0, y0, first.width, first.height)


_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def connected_components(m: PixelMask, connectivity: int = 8) -> list[PixelMask]:
    """Split the foreground into maximal connected regions.

    Components are ordered by their first foreground pixel in row-major
    scan order.
    """
    if connectivity not in _STRUCTURES:
        raise GeometryError(f"connectivity must be 4 or 8, got {connectivity}")
    if m.is_empty():
        return []
    x0, y0, w, h = m.bbox
    sub = m.window(x0, y0, w, h)
    labels, n = ndimage.label(sub, structure=_STRUCTURES[connectivity])
    values, first = np.unique(labels.ravel(), return_index=True)
    fg = values > 0
    order = values[fg][np.argsort(first[fg], kind="stable")]
    slices = ndimage.find_objects(labels)
    out = []
    for lab in order:
        sl = slices[lab - 1]
        piece = labels[sl] == lab
        out.append(PixelMask.from_window(piece, x0 + sl[1].start, y0 + sl[0].start, m.width, m.height))
    return out


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel foreground probabilities, row-major ``(height, width)``."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise GeometryError("probability map must be a non-empty 2-D array")
        if np.isnan(v).any() or v.min() < 0.0 or v.max() > 1.0:
            raise GeometryError("probability values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def is_binary(self) -> bool:
        v = self.values
        return bool(np.all((v == 0.0) | (v == 1.0)))


def load_probability_map(path: str | Path) -> ProbabilityMap:
    """Read a single-channel 8- or 16-bit image as a probability map.

    Values are divided by the largest value representable in the file's
    bit depth.
    """
    from PIL import Image

    with Image.open(path) as img:
        if img.mode in ("1", "L", "P"):
            arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
        elif img.mode in ("I;16", "I;16B", "I;16L"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        elif img.mode == "I":
            # PIL widens 16-bit PNGs to mode I
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        else:
            raise GeometryError(f"{path}: expected a single-channel image, got mode {img.mode}")
    return ProbabilityMap(arr)


def adaptive_threshold(p: ProbabilityMap, window: int = 51, offset: float = 0.0) -> PixelMask:
    """Local-mean threshold with a square window clipped at the borders.

    A pixel is foreground when its value exceeds the mean of its
    ``window`` x ``window`` neighbourhood minus ``offset``.
    """
    if window < 3 or window % 2 == 0:
        raise GeometryError(f"window must be odd and >= 3, got {window}")
    if window > min(p.width, p.height):
        raise GeometryError(f"window {window} exceeds map size {p.width}x{p.height}")
    v = p.values
    h, w = v.shape
    r = window // 2
    sat = np.zeros((h + 1, w + 1), dtype=np.float64)
    sat[1:, 1:] = v.cumsum(axis=0).cumsum(axis=1)
    ys = np.arange(h)
    xs = np.arange(w)
    y_lo, y_hi = np.clip(ys - r, 0, h), np.clip(ys + r + 1, 0, h)
    x_lo, x_hi = np.clip(xs - r, 0, w), np.clip(xs + r + 1, 0, w)
    total = (
        sat[y_hi][:, x_hi] - sat[y_lo][:, x_hi] - sat[y_hi][:, x_lo] + sat[y_lo][:, x_lo]
    )
    count = np.outer(y_hi - y_lo, x_hi - x_lo)
    return PixelMask.from_array(v > total / count - offset)


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IOU of two ``(x, y, w, h)`` boxes in continuous coordinates."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = aw * ah + bw * bh - inter
    if union <= 0:
        raise GeometryError("undefined IOU")
    return inter / union


def rect_union_area(rects: Sequence[Sequence[float]]) -> float:
    """Exact area of a union of ``(x, y, w, h)`` rectangles by coordinate compression."""
    rects = [r for r in rects if r[2] > 0 and r[3] > 0]
    if not rects:
        return 0.0
    xs = sorted({c for x, _, w, _ in rects for c in (x, x + w)})
    ys = sorted({c for _, y, _, h in rects for c in (y, y + h)})
    xi = {c: i for i, c in enumerate(xs)}
    yi = {c: i for i, c in enumerate(ys)}
    grid = np.zeros((len(ys) - 1, len(xs) - 1), dtype=bool)
    for x, y, w, h in rects:
        grid[yi[y]:yi[y + h], xi[x]:xi[x + w]] = True
    cell = np.outer(np.diff(ys), np.diff(xs))
    return float(cell[grid].sum())


def box_group_iou(group: Sequence[Sequence[float]], box: Sequence[float]) -> float:
    """IOU between the union of several boxes and a single box."""
    bx, by, bw, bh = box
    clipped = []
    for x, y, w, h in group:
        x0, y0 = max(x, bx), max(y, by)
        x1, y1 = min(x + w, bx + bw), min(y + h, by + bh)
        if x1 > x0 and y1 > y0:
            clipped.append((x0, y0, x1 - x0, y1 - y0))
    inter = rect_union_area(clipped)
    union = rect_union_area(list(group) + [tuple(box)])
    if union <= 0:
        raise GeometryError("undefined IOU")
    return inter / union
