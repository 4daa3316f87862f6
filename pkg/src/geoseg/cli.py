"""Command-line front end.

Exit codes: 0 success, 1 I/O or operational failure, 2 usage or validation
error. Logs go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import io
import logging
import random
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Sequence

import click
import numpy as np

from . import __version__
from .coco_io import (
    Category,
    CocoParseError,
    DatasetDoc,
    DatasetValidationError,
    HeightClassScheme,
    ImageRecord,
    dumps,
    format_findings,
    make_instance,
    parse_dataset,
    parse_results,
    serialize_dataset,
    serialize_results,
)
from .config import ConfigError, load_config, parse_assignment
from .evaluation import EvalConfig, evaluate, format_report, matches_csv, report_to_dict
from .geometry import GeometryError, load_probability_map
from .preprocess import (
    MergeConfig,
    PreprocessError,
    TileSpec,
    merge_dataset,
    semantic_to_instances,
    tile_dataset,
    tile_file_name,
    tile_grid,
    tile_image_pixels,
)
from .quality_filter import FilterError, filter_dataset, report_csv

log = logging.getLogger("geoseg")

EXIT_IO = 1
EXIT_USAGE = 2


class OperationalError(Exception):
    """I/O or processing failure that is not the caller's fault."""


def _guard(fn: Callable) -> Callable:
    """Map library exceptions onto exit codes."""

    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return fn(*args, **kwargs)
        except DatasetValidationError as exc:
            sys.stderr.write(format_findings(exc.findings))
            log.error("validation failed: %s", exc)
            sys.exit(EXIT_USAGE)
        except (CocoParseError, ConfigError, GeometryError, PreprocessError, FilterError, ValueError) as exc:
            log.error("%s", exc)
            sys.exit(EXIT_USAGE)
        except (OSError, OperationalError) as exc:
            log.error("%s", exc)
            sys.exit(EXIT_IO)

    return wrapper


def _read(path: str | Path) -> bytes:
    return Path(path).read_bytes()


def _digest(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def _write(path: str | Path, data: bytes | str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    p.write_bytes(data)
    log.info("wrote %s", p)


def _stamp(doc: DatasetDoc, command: str, cfg: dict, inputs: dict[str, bytes]) -> DatasetDoc:
    """Append a provenance entry (effective config + input digests) to ``doc.info``."""
    entry = {
        "tool": f"geoseg {__version__}",
        "command": command,
        "config": cfg,
        "inputs": {name: _digest(data) for name, data in sorted(inputs.items())},
    }
    history = list(doc.info.get("provenance", []))
    history.append(entry)
    return replace(doc, info={**doc.info, "provenance": history})


def _sample_images(doc: DatasetDoc, n: int | None, seed: int) -> DatasetDoc:
    if n is None:
        return doc
    ids = sorted(i.id for i in doc.images)
    chosen = set(random.Random(seed).sample(ids, min(n, len(ids))))
    return replace(
        doc,
        images=tuple(i for i in doc.images if i.id in chosen),
        annotations=tuple(a for a in doc.annotations if a.image_id in chosen),
    )


def _scheme(cfg: dict) -> HeightClassScheme:
    return HeightClassScheme(tuple(cfg["height"]["edges"]))


def _load_doc(path: str, cfg: dict) -> tuple[DatasetDoc, bytes]:
    data = _read(path)
    return parse_dataset(data, scheme=_scheme(cfg)), data


@click.group()
@click.version_option(__version__)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON config file (default: $GEOSEG_CONFIG).")
@click.option("--set", "assignments", multiple=True, metavar="KEY=VALUE",
              help="Override any config key, e.g. --set tile.tile_size=256.")
@click.option("-v", "--verbose", count=True, help="More logging on stderr.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, assignments: Sequence[str], verbose: int) -> None:
    """Building-height dataset preparation and evaluation."""
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    try:
        ctx.obj["assignments"] = dict(parse_assignment(a) for a in assignments)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from exc


def _config(ctx: click.Context, **flags: Any) -> dict:
    overrides = dict(ctx.obj["assignments"])
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return load_config(ctx.obj["config_path"], overrides)


# ------------------------------------------------------------------ tile

@main.command("tile")
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--images", "image_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Source image directory; when given, tile images are written too.")
@click.option("--tile-size", type=int, default=None)
@click.option("--min-clipped-area-ratio", type=float, default=None)
@click.option("--pad-value", type=int, default=None)
@click.option("--sample", type=int, default=None, help="Keep a seeded random sample of N tiles.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
@_guard
def cmd_tile(ctx, dataset, out_dir, image_dir, tile_size, min_clipped_area_ratio, pad_value, sample, seed):
    """Slice scenes into fixed-size tiles; writes dataset.json and manifest.csv."""
    cfg = _config(ctx, **{
        "tile.tile_size": tile_size,
        "tile.min_clipped_area_ratio": min_clipped_area_ratio,
        "tile.pad_value": pad_value,
    })
    doc, raw = _load_doc(dataset, cfg)
    spec = TileSpec(**cfg["tile"])
    tiled = tile_dataset(doc, spec)
    tiled = _sample_images(tiled, sample, seed)
    tiled = _stamp(tiled, "tile", cfg, {"dataset": raw})
    out = Path(out_dir)
    _write(out / "dataset.json", serialize_dataset(tiled))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tile_file", "source_scene", "row", "col"])
    for t in tiled.images:
        w.writerow([t.file_name, t.source_scene, t.tile_origin[0], t.tile_origin[1]])
    _write(out / "manifest.csv", buf.getvalue())

    if image_dir is not None:
        _write_tile_images(doc, tiled, Path(image_dir), out / "images", spec)
    log.info("%d tiles, %d annotations", len(tiled.images), len(tiled.annotations))


def _write_tile_images(src: DatasetDoc, tiled: DatasetDoc, image_dir: Path, out_dir: Path, spec: TileSpec) -> None:
    from PIL import Image

    wanted = {t.file_name for t in tiled.images}
    out_dir.mkdir(parents=True, exist_ok=True)
    for img in sorted(src.images, key=lambda i: i.id):
        names = {
            tile_file_name(img, r, c): (r, c)
            for r, c in tile_grid(img.width, img.height, spec.tile_size)
        }
        todo = sorted((n, rc) for n, rc in names.items() if n in wanted)
        if not todo:
            continue
        path = image_dir / img.file_name
        try:
            with Image.open(path) as im:
                pixels = np.asarray(im)
        except OSError as exc:
            raise OperationalError(f"cannot read image {path}: {exc}") from exc
        for name, (r, c) in todo:
            Image.fromarray(tile_image_pixels(pixels, r, c, spec)).save(out_dir / name)


# ----------------------------------------------------------------- merge

@main.command("merge")
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Merged dataset JSON.")
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None,
              help="Merge log CSV (default: <out stem>.merge_log.csv).")
@click.option("--overlap-threshold", type=float, default=None)
@click.pass_context
@_guard
def cmd_merge(ctx, dataset, out, log_path, overlap_threshold):
    """Fuse overlapping annotations into the tallest one."""
    cfg = _config(ctx, **{"merge.overlap_threshold": overlap_threshold})
    merge_cfg = MergeConfig(**cfg["merge"])
    doc, raw = _load_doc(dataset, cfg)
    merged, groups = merge_dataset(doc, merge_cfg, _scheme(cfg))
    merged = _stamp(merged, "merge", cfg, {"dataset": raw})
    _write(out, serialize_dataset(merged))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "kept_id", "height_m", "member_ids"])
    for g in groups:
        w.writerow([g.image_id, g.kept_id, g.height_m, " ".join(map(str, g.member_ids))])
    if log_path is None:
        log_path = str(Path(out).with_suffix("")) + ".merge_log.csv"
    _write(log_path, buf.getvalue())
    log.info("%d merge groups", len(groups))


# --------------------------------------------------------------- convert

MAP_SUFFIXES = {".png", ".tif", ".tiff"}


@main.command("convert")
@click.argument("maps_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--window", type=int, default=None)
@click.option("--offset", type=float, default=None)
@click.option("--connectivity", type=click.Choice(["4", "8"]), default=None)
@click.option("--min-area", type=int, default=None)
@click.pass_context
@_guard
def cmd_convert(ctx, maps_dir, out, window, offset, connectivity, min_area):
    """Turn semantic maps named <image_id>.png into a one-class instance dataset."""
    cfg = _config(ctx, **{
        "convert.window": window,
        "convert.offset": offset,
        "convert.connectivity": int(connectivity) if connectivity else None,
        "convert.min_area": min_area,
    })
    c = cfg["convert"]
    files = sorted(
        (p for p in Path(maps_dir).iterdir() if p.suffix.lower() in MAP_SUFFIXES),
        key=lambda p: (not p.stem.isdigit(), int(p.stem) if p.stem.isdigit() else 0, p.name),
    )
    images, anns, failures = [], [], []
    inputs: dict[str, bytes] = {}
    for path in files:
        try:
            if not path.stem.isdigit() or int(path.stem) <= 0:
                raise OperationalError("file name is not a positive image id")
            pmap = load_probability_map(path)
            parts = semantic_to_instances(pmap, c["window"], c["offset"], c["connectivity"], c["min_area"])
        except (OSError, OperationalError, GeometryError, PreprocessError) as exc:
            failures.append((path.name, str(exc)))
            continue
        inputs[path.name] = path.read_bytes()
        img = ImageRecord(int(path.stem), path.name, pmap.width, pmap.height)
        images.append(img)
        for m in parts:
            anns.append(make_instance(len(anns) + 1, img, 1, m))
    for name, msg in failures:
        sys.stderr.write(f"ERROR\t{name}\t{msg}\n")
    if files and len(failures) == len(files):
        raise OperationalError(f"all {len(files)} maps failed")
    doc = DatasetDoc(tuple(images), tuple(anns), (Category(1, "building"),), {})
    doc = _stamp(doc, "convert", cfg, inputs)
    _write(out, serialize_dataset(doc))


# ---------------------------------------------------------------- filter

@main.command("filter")
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.argument("predictions", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Kept dataset JSON.")
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False), help="Per-image CSV.")
@click.option("--iou", type=float, default=None)
@click.option("--discard-ratio", type=float, default=None)
@click.option("--score-threshold", type=float, default=None)
@click.option("--mode", type=click.Choice(["bbox", "mask"]), default=None)
@click.pass_context
@_guard
def cmd_filter(ctx, dataset, predictions, out, report_path, iou, discard_ratio, score_threshold, mode):
    """Discard images where annotations and reference predictions disagree."""
    cfg = _config(ctx, **{
        "filter.iou_threshold": iou,
        "filter.discard_ratio": discard_ratio,
        "filter.score_threshold": score_threshold,
        "filter.geometry_mode": mode,
    })
    f = cfg["filter"]
    doc, raw = _load_doc(dataset, cfg)
    pred_raw = _read(predictions)
    preds = parse_results(pred_raw, doc)
    kept, report = filter_dataset(
        doc, preds, f["iou_threshold"], f["discard_ratio"], f["score_threshold"], f["geometry_mode"]
    )
    kept = _stamp(kept, "filter", cfg, {"dataset": raw, "predictions": pred_raw})
    _write(out, serialize_dataset(kept))
    _write(report_path, report_csv(report))
    log.info("kept %d of %d images", len(kept.images), len(doc.images))


# -------------------------------------------------------------- evaluate

@main.command("evaluate")
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.argument("predictions", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Report JSON.")
@click.option("--table", "table_path", type=click.Path(dir_okay=False), default=None, help="Text report.")
@click.option("--matches", "matches_path", type=click.Path(dir_okay=False), default=None, help="Match audit CSV.")
@click.option("--mode", type=click.Choice(["bbox", "mask"]), default=None)
@click.option("--iou", type=float, default=None)
@click.option("--score-threshold", type=float, default=None)
@click.option("--no-group-matching", is_flag=True, default=False)
@click.pass_context
@_guard
def cmd_evaluate(ctx, dataset, predictions, out, table_path, matches_path, mode, iou, score_threshold,
                 no_group_matching):
    """Score predictions: per-class AP, mAP and the confusion matrix."""
    cfg = _config(ctx, **{
        "evaluate.geometry_mode": mode,
        "evaluate.iou_threshold": iou,
        "evaluate.score_threshold": score_threshold,
        "evaluate.group_matching": False if no_group_matching else None,
    })
    e = cfg["evaluate"]
    eval_cfg = EvalConfig(e["iou_threshold"], e["score_threshold"], e["geometry_mode"], e["group_matching"])
    doc, raw = _load_doc(dataset, cfg)
    pred_raw = _read(predictions)
    preds = parse_results(pred_raw, doc, skip_unknown_images=True)
    report = evaluate(doc, preds, eval_cfg)
    body = report_to_dict(report)
    body["provenance"] = {
        "tool": f"geoseg {__version__}",
        "command": "evaluate",
        "config": cfg,
        "inputs": {"dataset": _digest(raw), "predictions": _digest(pred_raw)},
    }
    _write(out, dumps(body))
    text = format_report(report)
    if table_path:
        _write(table_path, text)
    if matches_path:
        _write(matches_path, matches_csv(report.matches))
    click.echo(text, nl=False)


# ----------------------------------------------------------------- stats

def height_histogram(heights: Sequence[float], bin_width: float) -> list[tuple[float, float, int]]:
    """``(low, high, count)`` bins of width ``bin_width`` starting at 0, empty bins included."""
    if bin_width <= 0:
        raise ValueError(f"bin width must be positive, got {bin_width}")
    if not heights:
        return []
    n_bins = int(max(heights) // bin_width) + 1
    counts = [0] * n_bins
    for h in heights:
        counts[int(h // bin_width)] += 1
    return [(i * bin_width, (i + 1) * bin_width, c) for i, c in enumerate(counts)]


@main.command("stats")
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--bin-width", type=float, default=None, help="Height histogram bin width in meters.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None, help="Histogram CSV.")
@click.option("--sample", type=int, default=None, help="Restrict to a seeded random sample of N images.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
@_guard
def cmd_stats(ctx, dataset, bin_width, csv_path, sample, seed):
    """Per-class instance counts and a height histogram."""
    cfg = _config(ctx, **{"stats.bin_width": bin_width})
    bw = cfg["stats"]["bin_width"]
    if bw <= 0:
        raise ValueError(f"bin width must be positive, got {bw}")
    scheme = _scheme(cfg)
    doc, _ = _load_doc(dataset, cfg)
    doc = _sample_images(doc, sample, seed)
    heights = [a.height_m for a in doc.annotations if a.height_m is not None]
    per_class = {name: 0 for name in scheme.class_names}
    for h in heights:
        per_class[scheme.class_names[scheme.category_for(h) - 1]] += 1
    hist = height_histogram(heights, bw)

    lines = [f"images: {len(doc.images)}", f"instances: {len(doc.annotations)}", "", "class counts:"]
    lines += [f"  {name}: {n}" for name, n in per_class.items()]
    missing = len(doc.annotations) - len(heights)
    if missing:
        lines.append(f"  (no height): {missing}")
    lines += ["", f"height histogram (bin {bw:g} m):"]
    lines += [f"  [{lo:g}, {hi:g}): {c}" for lo, hi, c in hist]
    click.echo("\n".join(lines))

    if csv_path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low_m", "bin_high_m", "count"])
        w.writerows(hist)
        _write(csv_path, buf.getvalue())


# ----------------------------------------------------------------- synth

@main.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--width", type=int, default=2048, show_default=True)
@click.option("--height", type=int, default=1536, show_default=True)
@click.option("--scenes", type=int, default=2, show_default=True)
@click.option("--buildings", type=int, default=60, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_guard
def cmd_synth(out_dir, width, height, scenes, buildings, seed):
    """Write a seeded synthetic corpus (gt.json) and predictions (preds.json)."""
    from .synthetic import synthetic_corpus, synthetic_predictions

    doc = synthetic_corpus(width, height, scenes, buildings, seed)
    out = Path(out_dir)
    _write(out / "gt.json", serialize_dataset(doc))
    _write(out / "preds.json", serialize_results(synthetic_predictions(doc, seed + 1)))


@main.command("synth-preds")
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=1, show_default=True)
@click.pass_context
@_guard
def cmd_synth_preds(ctx, dataset, out, seed):
    """Write seeded synthetic predictions for an existing dataset."""
    from .synthetic import synthetic_predictions

    doc, _ = _load_doc(dataset, _config(ctx))
    _write(out, serialize_results(synthetic_predictions(doc, seed)))


if __name__ == "__main__":
    main()
