"""COCO-style corpora with per-building heights.

Heights live at ``annotations[i].attributes.height_m``. Polygon and RLE
segmentations are both accepted; compressed RLE strings are decoded on input
and every mask is written back as uncompressed counts.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence, Union

import numpy as np

from .geometry import GeometryError, PixelMask, Polygon, rasterize, rasterize_window

logger = logging.getLogger(__name__)

Geometry = Union[Polygon, PixelMask]

ERROR = "ERROR"
WARNING = "WARNING"


class CocoParseError(ValueError):
    """Malformed JSON; ``offset`` is the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Finding:
    severity: str
    entity: str
    message: str

    def line(self) -> str:
        return f"{self.severity}\t{self.entity}\t{self.message}"


class DatasetValidationError(ValueError):
    """A document violated one or more invariants."""

    def __init__(self, findings: Sequence[Finding]):
        self.findings = list(findings)
        errors = [f for f in self.findings if f.severity == ERROR]
        super().__init__("; ".join(f"{f.entity}: {f.message}" for f in errors[:5]) or "invalid dataset")


def format_findings(findings: Iterable[Finding]) -> str:
    return "".join(f.line() + "\n" for f in findings)


@dataclass(frozen=True)
class HeightClassScheme:
    """Right-closed height bins: ``(0, e0], (e0, e1], ..., (e_last, inf)``."""

    edges: tuple[float, ...] = (15.0, 40.0)

    def __post_init__(self) -> None:
        edges = tuple(float(e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        if not edges:
            raise ValueError("height scheme needs at least one edge")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"height edges must be strictly increasing: {list(edges)}")

    @property
    def class_names(self) -> list[str]:
        names, lo = [], 0.0
        for e in self.edges:
            names.append(f"{_fmt_m(lo)}m-{_fmt_m(e)}m")
            lo = e
        names.append(f"{_fmt_m(lo)}m+")
        return names

    def categories(self) -> list[Category]:
        return [Category(i + 1, name) for i, name in enumerate(self.class_names)]

    def category_for(self, height_m: float) -> int:
        if height_m < 0:
            raise ValueError(f"negative height {height_m}")
        for i, edge in enumerate(self.edges):
            if height_m <= edge:
                return i + 1
        return len(self.edges) + 1


def _fmt_m(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int
    source_scene: str | None = None
    tile_origin: tuple[int, int] | None = None
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Instance:
    """One annotation or prediction.

    ``geometry`` is ``None`` only for box-only predictions.
    """

    id: int
    image_id: int
    category_id: int
    geometry: Geometry | None
    bbox: tuple[float, float, float, float]
    area: float
    height_m: float | None = None
    score: float | None = None
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetDoc:
    images: tuple[ImageRecord, ...]
    annotations: tuple[Instance, ...]
    categories: tuple[Category, ...]
    info: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def image_index(self) -> dict[int, ImageRecord]:
        return {img.id: img for img in self.images}

    def annotations_by_image(self) -> dict[int, list[Instance]]:
        out: dict[int, list[Instance]] = {img.id: [] for img in self.images}
        for ann in self.annotations:
            out.setdefault(ann.image_id, []).append(ann)
        return out

    def category_names(self) -> dict[int, str]:
        return {c.id: c.name for c in self.categories}


# ---------------------------------------------------------------- RLE

def rle_encode(m: PixelMask) -> list[int]:
    return list(m.counts)


def rle_decode(counts: Sequence[int], width: int, height: int) -> PixelMask:
    """Build a mask from run counts, folding any interior zero-length runs."""
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise GeometryError("run counts must be non-negative")
    if sum(counts) != width * height:
        raise GeometryError(f"run counts sum to {sum(counts)}, expected {width * height}")
    # (is_foreground, length) runs with empty runs dropped and neighbours merged
    runs: list[list] = []
    for i, c in enumerate(counts):
        if c == 0:
            continue
        fg = i % 2 == 1
        if runs and runs[-1][0] == fg:
            runs[-1][1] += c
        else:
            runs.append([fg, c])
    canon = [c for _, c in runs]
    if not runs or runs[0][0]:
        canon.insert(0, 0)
    if canon == [0]:
        canon = [width * height]
    return PixelMask(width, height, tuple(canon))


def rle_string_decode(s: str) -> list[int]:
    """Decode the compressed COCO counts string (LEB128-like, delta coded)."""
    counts: list[int] = []
    p = 0
    data = s.encode("ascii")
    while p < len(data):
        x = 0
        k = 0
        more = True
        while more:
            c = data[p] - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def rle_string_encode(counts: Sequence[int]) -> str:
    """Inverse of :func:`rle_string_decode`."""
    out = []
    for i, c in enumerate(counts):
        x = int(c)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            ch = x & 0x1F
            x >>= 5
            more = not ((x == 0 and not (ch & 0x10)) or (x == -1 and (ch & 0x10)))
            if more:
                ch |= 0x20
            out.append(chr(ch + 48))
    return "".join(out)


# ------------------------------------------------------- geometry helpers

def _segmentation_to_geometry(seg: Any, width: int, height: int) -> Geometry:
    if isinstance(seg, dict):
        size = seg.get("size")
        counts = seg.get("counts")
        if size is None or counts is None:
            raise GeometryError("RLE segmentation needs 'size' and 'counts'")
        h, w = int(size[0]), int(size[1])
        if (w, h) != (width, height):
            raise GeometryError(f"RLE size {w}x{h} does not match image {width}x{height}")
        if isinstance(counts, str):
            counts = rle_string_decode(counts)
        return rle_decode(counts, w, h)
    if isinstance(seg, list):
        return Polygon.from_coco(seg)
    raise GeometryError(f"unsupported segmentation type {type(seg).__name__}")


def _geometry_to_segmentation(g: Geometry) -> Any:
    if isinstance(g, PixelMask):
        return {"size": [g.height, g.width], "counts": rle_encode(g)}
    return g.to_coco()


def instance_to_mask(inst: Instance, img: ImageRecord) -> PixelMask:
    """Rasterize or decode an instance at its image's size."""
    if inst.image_id != img.id:
        raise GeometryError(f"instance {inst.id} belongs to image {inst.image_id}, not {img.id}")
    g = inst.geometry
    if g is None:
        raise GeometryError(f"instance {inst.id} has no segmentation")
    if isinstance(g, PixelMask):
        if (g.width, g.height) != (img.width, img.height):
            raise GeometryError(f"instance {inst.id}: mask size does not match image {img.id}")
        return g
    try:
        return rasterize(g, img.width, img.height)
    except GeometryError as exc:
        raise GeometryError(f"instance {inst.id}: {exc}") from exc


def instance_window(inst: Instance, img: ImageRecord, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Boolean pixels of ``inst`` inside a window, clipped to the image extent."""
    g = inst.geometry
    if isinstance(g, PixelMask):
        return g.window(x0, y0, w, h)
    if g is None:
        raise GeometryError(f"instance {inst.id} has no segmentation")
    out = rasterize_window(g, x0, y0, w, h)
    if x0 + w > img.width:
        out[:, max(img.width - x0, 0):] = False
    if y0 + h > img.height:
        out[max(img.height - y0, 0):, :] = False
    if x0 < 0:
        out[:, : min(-x0, w)] = False
    if y0 < 0:
        out[: min(-y0, h), :] = False
    return out


def make_instance(
    id: int,
    image: ImageRecord,
    category_id: int,
    geometry: Geometry,
    *,
    height_m: float | None = None,
    score: float | None = None,
    extra: dict | None = None,
) -> Instance:
    """Instance with bbox and area measured from its rasterized geometry."""
    inst = Instance(id, image.id, category_id, geometry, (0, 0, 0, 0), 0, height_m, score, extra or {})
    m = instance_to_mask(inst, image)
    return replace(inst, bbox=m.bbox, area=m.area)


# ------------------------------------------------------------- parsing

_ANN_KEYS = {"id", "image_id", "category_id", "segmentation", "bbox", "area", "attributes", "score"}
_IMG_KEYS = {"id", "file_name", "width", "height", "source_scene", "tile_origin"}
_CAT_KEYS = {"id", "name"}
_DOC_KEYS = {"images", "annotations", "categories", "info"}


def _loads(data: bytes | str) -> Any:
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CocoParseError(f"invalid UTF-8: {exc.reason}", exc.start) from exc
    else:
        text = data
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise CocoParseError(exc.msg, offset) from exc


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _parse_image(raw: Any, findings: list[Finding], pos: int) -> ImageRecord | None:
    entity = f"image[{pos}]"
    if not isinstance(raw, dict):
        findings.append(Finding(ERROR, entity, "image record is not an object"))
        return None
    iid = raw.get("id")
    if _is_int(iid):
        entity = f"image {iid}"
    if not _is_int(iid) or iid <= 0:
        findings.append(Finding(ERROR, entity, f"id must be a positive integer, got {iid!r}"))
        return None
    w, h = raw.get("width"), raw.get("height")
    if not (_is_int(w) and _is_int(h) and w > 0 and h > 0):
        findings.append(Finding(ERROR, entity, f"width/height must be positive integers, got {w!r}x{h!r}"))
        return None
    file_name = raw.get("file_name", "")
    if not isinstance(file_name, str):
        findings.append(Finding(ERROR, entity, "file_name must be a string"))
        return None
    origin = raw.get("tile_origin")
    if origin is not None:
        if not (isinstance(origin, list) and len(origin) == 2 and all(_is_int(v) for v in origin)):
            findings.append(Finding(ERROR, entity, f"tile_origin must be [row, col], got {origin!r}"))
            return None
        origin = (origin[0], origin[1])
    scene = raw.get("source_scene")
    if scene is not None and not isinstance(scene, str):
        findings.append(Finding(ERROR, entity, "source_scene must be a string"))
        return None
    extra = {k: v for k, v in raw.items() if k not in _IMG_KEYS}
    return ImageRecord(iid, file_name, w, h, scene, origin, extra)


def _parse_annotation(
    raw: Any,
    images: dict[int, ImageRecord],
    findings: list[Finding],
    pos: int,
    check_geometry: bool,
    is_prediction: bool = False,
) -> Instance | None:
    entity = f"annotation[{pos}]"
    if not isinstance(raw, dict):
        findings.append(Finding(ERROR, entity, "annotation is not an object"))
        return None
    aid = raw.get("id")
    if _is_int(aid):
        entity = f"annotation {aid}"
    if not _is_int(aid) or aid <= 0:
        findings.append(Finding(ERROR, entity, f"id must be a positive integer, got {aid!r}"))
        return None
    image_id, cat_id = raw.get("image_id"), raw.get("category_id")
    if not _is_int(image_id) or not _is_int(cat_id):
        findings.append(Finding(ERROR, entity, "image_id and category_id must be integers"))
        return None
    attrs = raw.get("attributes", {})
    if not isinstance(attrs, dict):
        findings.append(Finding(ERROR, entity, "attributes must be an object"))
        return None
    height_m = attrs.get("height_m")
    if height_m is not None and (not _is_num(height_m) or height_m < 0):
        findings.append(Finding(ERROR, entity, f"height_m must be a non-negative number, got {height_m!r}"))
        return None
    score = raw.get("score")
    if score is not None:
        if not is_prediction:
            findings.append(Finding(ERROR, entity, "ground-truth annotation carries a score"))
            return None
        if not _is_num(score) or not 0.0 <= score <= 1.0:
            findings.append(Finding(ERROR, entity, f"score must lie in [0, 1], got {score!r}"))
            return None
    elif is_prediction:
        findings.append(Finding(ERROR, entity, "prediction has no score"))
        return None

    extra = {k: v for k, v in raw.items() if k not in _ANN_KEYS}
    other_attrs = {k: v for k, v in attrs.items() if k != "height_m"}
    if other_attrs or ("attributes" in raw and height_m is None):
        extra["attributes"] = other_attrs

    img = images.get(image_id)
    seg = raw.get("segmentation")
    geometry: Geometry | None = None
    if seg is not None and img is not None:
        try:
            geometry = _segmentation_to_geometry(seg, img.width, img.height)
            if isinstance(geometry, Polygon) and not geometry.valid_rings():
                raise GeometryError("degenerate geometry")
        except GeometryError as exc:
            findings.append(Finding(ERROR, entity, str(exc)))
            return None
    elif seg is None and not is_prediction:
        findings.append(Finding(ERROR, entity, "missing segmentation"))
        return None

    bbox = raw.get("bbox")
    area = raw.get("area")
    if bbox is not None:
        if not (isinstance(bbox, list) and len(bbox) == 4 and all(_is_num(v) for v in bbox)):
            findings.append(Finding(ERROR, entity, f"bbox must be [x, y, w, h], got {bbox!r}"))
            return None
        bbox = tuple(bbox)
    if area is not None and not _is_num(area):
        findings.append(Finding(ERROR, entity, f"area must be a number, got {area!r}"))
        return None

    if img is None:
        # dangling reference is reported once all annotations are read
        return Instance(aid, image_id, cat_id, geometry, bbox or (0, 0, 0, 0), area or 0, height_m, score, extra)

    if geometry is not None and (check_geometry or bbox is None or area is None):
        inst = Instance(aid, image_id, cat_id, geometry, (0, 0, 0, 0), 0, height_m, score, extra)
        m = instance_to_mask(inst, img)
        raster_box, raster_area = m.bbox, m.area
        if bbox is None:
            bbox = raster_box
        elif check_geometry and max(abs(a - b) for a, b in zip(bbox, raster_box)) > 1:
            findings.append(Finding(ERROR, entity, f"bbox {list(bbox)} differs from rasterized {list(raster_box)}"))
        if area is None:
            area = raster_area
        elif check_geometry and abs(area - raster_area) > max(0.01 * raster_area, 1.0):
            findings.append(Finding(ERROR, entity, f"area {area} differs from rasterized {raster_area}"))
    if bbox is None:
        findings.append(Finding(ERROR, entity, "box-only prediction without bbox"))
        return None
    if area is None:
        area = bbox[2] * bbox[3]
    return Instance(aid, image_id, cat_id, geometry, bbox, area, height_m, score, extra)


def check_references(
    annotations: Sequence[Instance],
    images: dict[int, ImageRecord],
    categories: dict[int, Category],
) -> list[Finding]:
    findings = []
    for ann in annotations:
        if ann.image_id not in images:
            findings.append(Finding(ERROR, f"annotation {ann.id}", f"image_id {ann.image_id} does not resolve"))
        if ann.category_id not in categories:
            findings.append(Finding(ERROR, f"annotation {ann.id}", f"category_id {ann.category_id} does not resolve"))
    return findings


def _duplicates(ids: Iterable[int]) -> list[int]:
    return sorted(i for i, n in Counter(ids).items() if n > 1)


def height_class_findings(doc: DatasetDoc, scheme: HeightClassScheme) -> list[Finding]:
    """Warn where a height and its category disagree under ``scheme``.

    Only applies when the category table is the scheme's class table.
    """
    names = [c.name for c in sorted(doc.categories, key=lambda c: c.id)]
    if names != scheme.class_names:
        return []
    findings = []
    for ann in doc.annotations:
        if ann.height_m is None:
            continue
        expected = scheme.category_for(ann.height_m)
        if expected != ann.category_id:
            findings.append(Finding(
                WARNING,
                f"annotation {ann.id}",
                f"height {ann.height_m} m implies category {expected}, found {ann.category_id}",
            ))
    return findings


def validate_document(
    data: bytes | str | dict, *, scheme: HeightClassScheme | None = None, check_geometry: bool = True
) -> tuple[DatasetDoc | None, list[Finding]]:
    """Parse and validate, returning the document (or ``None``) and all findings."""
    raw = _loads(data) if not isinstance(data, dict) else data
    findings: list[Finding] = []
    if not isinstance(raw, dict):
        return None, [Finding(ERROR, "document", "top level must be an object")]
    for key in ("images", "annotations", "categories"):
        if not isinstance(raw.get(key, []), list):
            findings.append(Finding(ERROR, "document", f"'{key}' must be a list"))
    if findings:
        return None, findings

    images = [_parse_image(r, findings, i) for i, r in enumerate(raw.get("images", []))]
    images = [i for i in images if i is not None]
    for dup in _duplicates(i.id for i in images):
        findings.append(Finding(ERROR, f"image {dup}", "duplicate image id"))
    image_index = {i.id: i for i in images}

    categories = []
    for pos, c in enumerate(raw.get("categories", [])):
        if not (isinstance(c, dict) and _is_int(c.get("id")) and isinstance(c.get("name"), str)):
            findings.append(Finding(ERROR, f"category[{pos}]", "category needs integer id and string name"))
            continue
        categories.append(Category(c["id"], c["name"], {k: v for k, v in c.items() if k not in _CAT_KEYS}))
    for dup in _duplicates(c.id for c in categories):
        findings.append(Finding(ERROR, f"category {dup}", "duplicate category id"))

    anns = [
        _parse_annotation(r, image_index, findings, i, check_geometry)
        for i, r in enumerate(raw.get("annotations", []))
    ]
    anns = [a for a in anns if a is not None]
    for dup in _duplicates(a.id for a in anns):
        findings.append(Finding(ERROR, f"annotation {dup}", "duplicate annotation id"))
    findings.extend(check_references(anns, image_index, {c.id: c for c in categories}))

    info = raw.get("info", {})
    if not isinstance(info, dict):
        findings.append(Finding(ERROR, "document", "'info' must be an object"))
        info = {}
    extra = {k: v for k, v in raw.items() if k not in _DOC_KEYS}
    doc = DatasetDoc(tuple(images), tuple(anns), tuple(categories), info, extra)
    if scheme is not None:
        findings.extend(height_class_findings(doc, scheme))
    return doc, findings


def parse_dataset(
    data: bytes | str | dict,
    *,
    scheme: HeightClassScheme | None = HeightClassScheme(),
    check_geometry: bool = True,
) -> DatasetDoc:
    """Parse and validate a COCO document.

    Raises:
        CocoParseError: malformed JSON, with the byte offset.
        DatasetValidationError: any invariant violated; ``findings`` names
            every offending entity.
    """
    doc, findings = validate_document(data, scheme=scheme, check_geometry=check_geometry)
    if doc is None or any(f.severity == ERROR for f in findings):
        raise DatasetValidationError(findings)
    for f in findings:
        logger.warning("%s: %s", f.entity, f.message)
    return doc


def parse_results(
    data: bytes | str | list,
    doc: DatasetDoc,
    *,
    check_geometry: bool = False,
    skip_unknown_images: bool = False,
) -> list[Instance]:
    """Parse a COCO results file against the images/categories of ``doc``.

    Predictions get ids ``1..N`` in file order. With
    ``skip_unknown_images`` predictions on images absent from ``doc`` are
    dropped (and logged) instead of rejected.

    Raises:
        DatasetValidationError: unknown image or category ids, bad scores.
    """
    raw = _loads(data) if not isinstance(data, list) else data
    if not isinstance(raw, list):
        raise DatasetValidationError([Finding(ERROR, "results", "results file must be a JSON list")])
    images = doc.image_index()
    findings: list[Finding] = []
    preds = []
    skipped = 0
    for pos, r in enumerate(raw):
        if isinstance(r, dict):
            if skip_unknown_images and r.get("image_id") not in images:
                skipped += 1
                continue
            r = {**r, "id": pos + 1}
        p = _parse_annotation(r, images, findings, pos, check_geometry, is_prediction=True)
        if p is not None:
            preds.append(p)
    findings.extend(
        replace(f, entity=f.entity.replace("annotation", "prediction"))
        for f in check_references(preds, images, {c.id: c for c in doc.categories})
    )
    if findings:
        raise DatasetValidationError(findings)
    if skipped:
        logger.warning("skipped %d predictions on images not in the dataset", skipped)
    return preds


# -------------------------------------------------------- serialization

def _image_json(img: ImageRecord) -> dict:
    out: dict[str, Any] = {"id": img.id, "file_name": img.file_name, "width": img.width, "height": img.height}
    if img.source_scene is not None:
        out["source_scene"] = img.source_scene
    if img.tile_origin is not None:
        out["tile_origin"] = list(img.tile_origin)
    for k in sorted(img.extra):
        out[k] = img.extra[k]
    return out


def _annotation_json(ann: Instance, with_id: bool = True) -> dict:
    out: dict[str, Any] = {}
    if with_id:
        out["id"] = ann.id
    out["image_id"] = ann.image_id
    out["category_id"] = ann.category_id
    if ann.geometry is not None:
        out["segmentation"] = _geometry_to_segmentation(ann.geometry)
    out["bbox"] = list(ann.bbox)
    out["area"] = ann.area
    if ann.score is not None:
        out["score"] = ann.score
    attrs = dict(ann.extra.get("attributes", {}))
    if ann.height_m is not None:
        attrs["height_m"] = ann.height_m
    if attrs or "attributes" in ann.extra:
        out["attributes"] = {k: attrs[k] for k in sorted(attrs)}
    for k in sorted(ann.extra):
        if k != "attributes":
            out[k] = ann.extra[k]
    return out


def dataset_to_dict(d: DatasetDoc) -> dict:
    out: dict[str, Any] = {
        "info": d.info,
        "images": [_image_json(i) for i in d.images],
        "annotations": [_annotation_json(a) for a in d.annotations],
        "categories": [{"id": c.id, "name": c.name, **{k: c.extra[k] for k in sorted(c.extra)}} for c in d.categories],
    }
    for k in sorted(d.extra):
        out[k] = d.extra[k]
    return out


def dumps(obj: Any) -> bytes:
    return (json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")


def serialize_dataset(d: DatasetDoc) -> bytes:
    """Deterministic UTF-8 JSON for ``d``."""
    return dumps(dataset_to_dict(d))


def serialize_results(preds: Sequence[Instance]) -> bytes:
    return dumps([_annotation_json(p, with_id=False) for p in preds])
