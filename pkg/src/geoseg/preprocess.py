"""Annotation cleanup and dataset slicing.

* overlap merging: annotations stacked on one building (a tall cap on a
  low base) are fused into a single instance carrying the tallest height;
* height binning into class ids;
* grid tiling of large scenes into fixed-size chips;
* semantic probability maps to per-building masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as graph_components

from .coco_io import (
    DatasetDoc,
    HeightClassScheme,
    ImageRecord,
    Instance,
    instance_to_mask,
    make_instance,
)
from .geometry import (
    PixelMask,
    Polygon,
    ProbabilityMap,
    adaptive_threshold,
    connected_components,
    max_overlap_ratio,
    union_masks,
)


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class MergeConfig:
    overlap_threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.overlap_threshold <= 1.0:
            raise ValueError(f"overlap_threshold must be in (0, 1], got {self.overlap_threshold}")


@dataclass(frozen=True)
class TileSpec:
    tile_size: int = 512
    min_clipped_area_ratio: float = 0.25
    pad_value: int = 0

    def __post_init__(self) -> None:
        if self.tile_size <= 0:
            raise ValueError(f"tile_size must be positive, got {self.tile_size}")
        if not 0.0 <= self.min_clipped_area_ratio <= 1.0:
            raise ValueError(f"min_clipped_area_ratio must be in [0, 1], got {self.min_clipped_area_ratio}")


@dataclass(frozen=True)
class MergeGroup:
    """One fused set of annotations, for the merge log."""

    image_id: int
    kept_id: int
    height_m: float
    member_ids: tuple[int, ...]


def assign_height_class(height_m: float, scheme: HeightClassScheme = HeightClassScheme()) -> int:
    """Category id for a height; bins are right-closed, e.g. 15 m is class 1."""
    return scheme.category_for(height_m)


def _overlap_groups(masks: Sequence[PixelMask], threshold: float) -> list[list[int]]:
    n = len(masks)
    boxes = [m.bbox for m in masks]
    rows, cols = [], []
    for i in range(n):
        if masks[i].is_empty():
            continue
        xi, yi, wi, hi = boxes[i]
        for j in range(i + 1, n):
            if masks[j].is_empty():
                continue
            xj, yj, wj, hj = boxes[j]
            if xi >= xj + wj or xj >= xi + wi or yi >= yj + hj or yj >= yi + hi:
                continue
            if max_overlap_ratio(masks[i], masks[j]) > threshold:
                rows.append(i)
                cols.append(j)
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = graph_components(adj, directed=False)
    groups: dict[int, list[int]] = {}
    for idx, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(idx)
    return sorted(groups.values(), key=lambda g: g[0])


def _merge_once(
    instances: list[Instance],
    image: ImageRecord,
    cfg: MergeConfig,
    scheme: HeightClassScheme,
) -> tuple[list[Instance], list[tuple[int, list[int]]]]:
    masks = [instance_to_mask(inst, image) for inst in instances]
    out, fused = [], []
    for group in _overlap_groups(masks, cfg.overlap_threshold):
        if len(group) == 1:
            out.append(instances[group[0]])
            continue
        members = [instances[i] for i in group]
        tallest = min(members, key=lambda a: (-a.height_m, a.id))
        out.append(make_instance(
            tallest.id,
            image,
            scheme.category_for(tallest.height_m),
            union_masks(masks[i] for i in group),
            height_m=tallest.height_m,
            extra=tallest.extra,
        ))
        fused.append((tallest.id, [m.id for m in members]))
    return out, fused


def merge_overlapping_annotations(
    instances: Sequence[Instance],
    image: ImageRecord,
    cfg: MergeConfig = MergeConfig(),
    scheme: HeightClassScheme = HeightClassScheme(),
    log: list[MergeGroup] | None = None,
) -> list[Instance]:
    """Fuse overlapping annotations of one image, keeping the tallest height.

    Two annotations are linked when their max overlap ratio exceeds
    ``cfg.overlap_threshold``; each connected group of links becomes one
    instance whose mask is the union of the group, whose height is the
    group maximum and whose category is re-derived from that height. The
    merged instance keeps the id of its tallest member. Merging repeats
    until nothing changes, so the result is a fixed point.

    Raises:
        PreprocessError: an instance lacks ``height_m`` or belongs to
            another image.
    """
    for inst in instances:
        if inst.height_m is None:
            raise PreprocessError(f"instance {inst.id} has no height_m")
        if inst.image_id != image.id:
            raise PreprocessError(f"instance {inst.id} belongs to image {inst.image_id}, not {image.id}")
    current = sorted(instances, key=lambda a: a.id)
    absorbed: dict[int, set[int]] = {}
    while True:
        current, fused = _merge_once(current, image, cfg, scheme)
        if not fused:
            break
        for kept, member_ids in fused:
            ids: set[int] = set()
            for m in member_ids:
                ids |= absorbed.pop(m, {m})
            absorbed[kept] = ids
        current.sort(key=lambda a: a.id)
    if log is not None:
        by_id = {a.id: a for a in current}
        for kept in sorted(absorbed):
            log.append(MergeGroup(image.id, kept, by_id[kept].height_m, tuple(sorted(absorbed[kept]))))
    return current


def merge_dataset(
    d: DatasetDoc,
    cfg: MergeConfig = MergeConfig(),
    scheme: HeightClassScheme = HeightClassScheme(),
) -> tuple[DatasetDoc, list[MergeGroup]]:
    """Apply :func:`merge_overlapping_annotations` to every image."""
    by_image = d.annotations_by_image()
    anns: list[Instance] = []
    log: list[MergeGroup] = []
    for img in sorted(d.images, key=lambda i: i.id):
        anns.extend(merge_overlapping_annotations(by_image.get(img.id, []), img, cfg, scheme, log))
    return replace(d, annotations=tuple(anns)), log


def tile_grid(width: int, height: int, tile_size: int) -> list[tuple[int, int]]:
    """``(row, col)`` indices of a zero-overlap grid anchored at the origin."""
    rows = math.ceil(height / tile_size)
    cols = math.ceil(width / tile_size)
    return [(r, c) for r in range(rows) for c in range(cols)]


def tile_file_name(img: ImageRecord, row: int, col: int) -> str:
    stem, dot, ext = img.file_name.rpartition(".")
    if not dot:
        stem, ext = img.file_name, "png"
    return f"{stem}_r{row:03d}_c{col:03d}.{ext}"


def tile_dataset(d: DatasetDoc, spec: TileSpec = TileSpec()) -> DatasetDoc:
    """Cut every image into ``tile_size`` squares and clip annotations to them.

    Edge tiles are recorded at full tile size (the image is padded). A
    clipped fragment survives when it keeps at least
    ``min_clipped_area_ratio`` of the instance's area, or when the instance
    lies wholly inside the tile. Uncut polygons stay polygons (shifted into
    tile coordinates); cut fragments become RLE masks. Tiles and fragments
    are numbered in (source image id, tile row, tile col, instance id)
    order.
    """
    ts = spec.tile_size
    by_image = d.annotations_by_image()
    tiles: list[ImageRecord] = []
    anns: list[Instance] = []
    next_ann = 1
    for img in sorted(d.images, key=lambda i: i.id):
        scene = img.source_scene or img.file_name
        members = sorted(by_image.get(img.id, []), key=lambda a: a.id)
        masks = [instance_to_mask(a, img) for a in members]
        for row, col in tile_grid(img.width, img.height, ts):
            tile = ImageRecord(
                id=len(tiles) + 1,
                file_name=tile_file_name(img, row, col),
                width=ts,
                height=ts,
                source_scene=scene,
                tile_origin=(row, col),
            )
            tiles.append(tile)
            x0, y0 = col * ts, row * ts
            for inst, full in zip(members, masks):
                total = full.area
                if total == 0:
                    continue
                bx, by, bw, bh = full.bbox
                if bx >= x0 + ts or by >= y0 + ts or bx + bw <= x0 or by + bh <= y0:
                    continue
                piece = full.window(x0, y0, ts, ts)
                frag_area = int(np.count_nonzero(piece))
                if frag_area == 0:
                    continue
                if frag_area < total and frag_area < spec.min_clipped_area_ratio * total:
                    continue
                if frag_area == total and isinstance(inst.geometry, Polygon):
                    geometry: PixelMask | Polygon = inst.geometry.translate(-x0, -y0)
                else:
                    geometry = PixelMask.from_array(piece)
                frag = make_instance(
                    next_ann, tile, inst.category_id, geometry, height_m=inst.height_m, extra=inst.extra
                )
                if frag.area != frag_area:
                    # translation rounding moved a pixel center; fall back to the exact mask
                    frag = make_instance(
                        next_ann, tile, inst.category_id, PixelMask.from_array(piece),
                        height_m=inst.height_m, extra=inst.extra,
                    )
                anns.append(frag)
                next_ann += 1
    return replace(d, images=tuple(tiles), annotations=tuple(anns))


def tile_image_pixels(pixels: np.ndarray, row: int, col: int, spec: TileSpec) -> np.ndarray:
    """Cut one tile from an image array, padding past the edge with ``pad_value``."""
    ts = spec.tile_size
    shape = (ts, ts) + pixels.shape[2:]
    out = np.full(shape, spec.pad_value, dtype=pixels.dtype)
    part = pixels[row * ts:(row + 1) * ts, col * ts:(col + 1) * ts]
    out[: part.shape[0], : part.shape[1]] = part
    return out


def semantic_to_instances(
    p: ProbabilityMap | PixelMask,
    window: int = 51,
    offset: float = 0.0,
    connectivity: int = 8,
    min_area: int = 0,
) -> list[PixelMask]:
    """Split a semantic building map into per-building masks.

    Binary input (a mask, or a map holding only 0 and 1) skips the
    adaptive threshold.
    """
    if min_area < 0:
        raise PreprocessError(f"min_area must be >= 0, got {min_area}")
    if isinstance(p, PixelMask):
        binary = p
    elif p.is_binary():
        binary = PixelMask.from_array(p.values > 0.5)
    else:
        binary = adaptive_threshold(p, window, offset)
    return [c for c in connected_components(binary, connectivity) if c.area >= min_area]
