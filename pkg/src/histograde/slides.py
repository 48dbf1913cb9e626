"""Synthetic tiled slides, the slide-reading abstraction and the slide manifest.

A slide on disk is a directory::

    slide.json        geometry, pyramid levels, magnification
    cells.jsonl       ground-truth cell placements (one blob per line)
    L0/ty_tx.png      level-0 tiles, row-major
    L1/...            2x downsampled level, and so on

The manifest is JSONL: a ``{"schema_version": 1}`` header line followed by one
record per slide.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    BoundsError,
    CorruptionError,
    DatasetWriteError,
    ParseError,
    ValidationError,
)

CLASS_NAMES = ("inactive", "mild", "moderate", "severe")
CELL_TYPES = ("epithelial", "lymphocyte", "macrophage", "neutrophil")
SCHEMA_VERSION = 1
MANIFEST_FIELDS = (
    "slide_id",
    "patient_id",
    "class_label",
    "path",
    "base_magnification",
    "microns_per_pixel",
)

GLASS_RGB = (246, 246, 246)
TISSUE_RGB = (236, 190, 210)

# Colors are at least 25 apart per channel from each other and from tissue,
# so a +-12 tolerance detector cannot confuse them.
DEFAULT_PALETTE = {
    "epithelial": (180, 60, 140),
    "lymphocyte": (50, 40, 150),
    "macrophage": (140, 100, 40),
    "neutrophil": (90, 20, 60),
}

# blobs per tissue megapixel at level 0
DEFAULT_DENSITY = {
    0: {"epithelial": 260.0, "lymphocyte": 60.0, "macrophage": 40.0, "neutrophil": 40.0},
    1: {"epithelial": 210.0, "lymphocyte": 110.0, "macrophage": 70.0, "neutrophil": 60.0},
    2: {"epithelial": 160.0, "lymphocyte": 190.0, "macrophage": 120.0, "neutrophil": 100.0},
    3: {"epithelial": 110.0, "lymphocyte": 320.0, "macrophage": 200.0, "neutrophil": 180.0},
}

CELL_RADIUS_RANGE = (3.0, 7.0)


@dataclass(frozen=True)
class SlideEntry:
    slide_id: str
    patient_id: str
    class_label: int
    path: str
    base_magnification: float = 40.0
    microns_per_pixel: float = 0.25

    def validate(self):
        if not self.slide_id:
            raise ValidationError("slide_id must be nonempty")
        if not self.patient_id:
            raise ValidationError(f"{self.slide_id}: patient_id must be nonempty")
        if self.class_label not in (0, 1, 2, 3):
            raise ValidationError(f"{self.slide_id}: class_label {self.class_label!r} not in 0..3")
        if not self.base_magnification > 0:
            raise ValidationError(f"{self.slide_id}: base_magnification must be > 0")
        if not self.microns_per_pixel > 0:
            raise ValidationError(f"{self.slide_id}: microns_per_pixel must be > 0")


@dataclass
class SlideManifest:
    entries: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    root: Path | None = field(default=None, compare=False)

    def validate(self):
        seen = set()
        for e in self.entries:
            e.validate()
            if e.slide_id in seen:
                raise ValidationError(f"duplicate slide_id {e.slide_id!r}")
            seen.add(e.slide_id)
        return self

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def get(self, slide_id):
        for e in self.entries:
            if e.slide_id == slide_id:
                return e
        raise KeyError(slide_id)

    def subset(self, slide_ids):
        keep = set(slide_ids)
        return SlideManifest([e for e in self.entries if e.slide_id in keep],
                             self.schema_version, self.root)

    def slide_path(self, entry):
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def patients(self):
        out = {}
        for e in self.entries:
            out.setdefault(e.patient_id, []).append(e.slide_id)
        return out


def save_manifest(manifest, path):
    manifest.validate()
    lines = [json.dumps({"schema_version": manifest.schema_version})]
    for e in manifest.entries:
        lines.append(json.dumps({k: getattr(e, k) for k in MANIFEST_FIELDS}))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path):
    path = Path(path)
    entries = []
    schema = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", line=lineno)
            if schema is None:
                if set(rec) != {"schema_version"}:
                    raise ParseError("missing schema_version header", line=lineno)
                schema = rec["schema_version"]
                if schema != SCHEMA_VERSION:
                    raise ParseError(f"unsupported schema_version {schema!r}", line=lineno)
                continue
            for name in MANIFEST_FIELDS:
                if name not in rec:
                    raise ParseError(f"missing field '{name}'", line=lineno, field=name)
            extra = set(rec) - set(MANIFEST_FIELDS)
            if extra:
                raise ParseError(f"unknown fields {sorted(extra)}", line=lineno)
            try:
                entry = SlideEntry(
                    slide_id=str(rec["slide_id"]),
                    patient_id=str(rec["patient_id"]) if rec["patient_id"] is not None else "",
                    class_label=int(rec["class_label"]),
                    path=str(rec["path"]),
                    base_magnification=float(rec["base_magnification"]),
                    microns_per_pixel=float(rec["microns_per_pixel"]),
                )
                entry.validate()
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), line=lineno) from None
            entries.append(entry)
    if schema is None:
        raise ParseError("empty manifest", line=1)
    return SlideManifest(entries, schema, root=path.parent).validate()


# --------------------------------------------------------------------------
# slide storage

@dataclass(frozen=True)
class Level:
    downsample: int
    width: int
    height: int
    dir: str


@dataclass(frozen=True)
class SlideImage:
    path: Path
    slide_id: str
    width_px: int
    height_px: int
    tile_size: int
    levels: tuple
    base_magnification: float = 40.0
    microns_per_pixel: float = 0.25
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def level_dims(self, level):
        lv = self.levels[level]
        return lv.width, lv.height

    def magnification(self, level):
        return self.base_magnification / self.levels[level].downsample

    def nearest_level(self, magnification):
        """Index of the level whose magnification is closest to the request."""
        diffs = [abs(math.log2(self.magnification(i) / magnification))
                 for i in range(len(self.levels))]
        return int(np.argmin(diffs))

    def tile_path(self, level, tx, ty):
        return self.path / self.levels[level].dir / f"{ty}_{tx}.png"

    def read_tile(self, level, tx, ty):
        p = self.tile_path(level, tx, ty)
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"))
        except FileNotFoundError:
            raise CorruptionError(f"{self.slide_id}: missing tile {p}") from None
        except OSError as exc:
            raise CorruptionError(f"{self.slide_id}: unreadable tile {p}: {exc}") from None
        return arr


def open_slide(path):
    path = Path(path)
    try:
        meta = json.loads((path / "slide.json").read_text())
    except FileNotFoundError:
        raise CorruptionError(f"no slide.json in {path}") from None
    levels = tuple(Level(int(lv["downsample"]), int(lv["width"]), int(lv["height"]), lv["dir"])
                   for lv in meta["levels"])
    return SlideImage(
        path=path,
        slide_id=meta["slide_id"],
        width_px=int(meta["width"]),
        height_px=int(meta["height"]),
        tile_size=int(meta["tile_size"]),
        levels=levels,
        base_magnification=float(meta["base_magnification"]),
        microns_per_pixel=float(meta["microns_per_pixel"]),
        meta=meta,
    )


def read_region(slide, level, rect):
    """Return the ``(h, w, 3)`` uint8 RGB raster of ``rect = (x0, y0, w, h)`` at ``level``.

    Stitches across tile boundaries; raises BoundsError unless the rect lies
    fully inside the level and has positive area.
    """
    if not 0 <= level < len(slide.levels):
        raise BoundsError(f"level {level} does not exist")
    x0, y0, w, h = (int(v) for v in rect)
    lw, lh = slide.level_dims(level)
    if w <= 0 or h <= 0:
        raise BoundsError(f"empty rect {rect}")
    if x0 < 0 or y0 < 0 or x0 + w > lw or y0 + h > lh:
        raise BoundsError(f"rect {rect} outside level {level} bounds {lw}x{lh}")
    ts = slide.tile_size
    out = np.empty((h, w, 3), dtype=np.uint8)
    for ty in range(y0 // ts, (y0 + h - 1) // ts + 1):
        for tx in range(x0 // ts, (x0 + w - 1) // ts + 1):
            tile = slide.read_tile(level, tx, ty)
            # tile-local overlap
            ax0, ay0 = max(x0, tx * ts), max(y0, ty * ts)
            ax1, ay1 = min(x0 + w, tx * ts + tile.shape[1]), min(y0 + h, ty * ts + tile.shape[0])
            if ax1 - ax0 <= 0 or ay1 - ay0 <= 0:
                raise CorruptionError(f"{slide.slide_id}: tile {tx},{ty} at level {level} is truncated")
            out[ay0 - y0:ay1 - y0, ax0 - x0:ax1 - x0] = \
                tile[ay0 - ty * ts:ay1 - ty * ts, ax0 - tx * ts:ax1 - tx * ts]
    return out


def read_level(slide, level):
    w, h = slide.level_dims(level)
    return read_region(slide, level, (0, 0, w, h))


def _halve(img):
    h, w = img.shape[:2]
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge")
    acc = img.astype(np.uint16)
    acc = acc[0::2, 0::2] + acc[1::2, 0::2] + acc[0::2, 1::2] + acc[1::2, 1::2]
    return ((acc + 2) // 4).astype(np.uint8)


def write_slide(rgb, out_dir, slide_id, *, base_magnification=40.0, microns_per_pixel=0.25,
                tile_size=512, min_level_size=256, extra_meta=None):
    """Store an RGB array as a tiled power-of-two pyramid and return the opened slide."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"expected (h, w, 3) RGB array, got {rgb.shape}")
    out_dir = Path(out_dir)
    h, w = rgb.shape[:2]
    levels = []
    img, ds = rgb, 1
    try:
        while True:
            name = f"L{len(levels)}"
            (out_dir / name).mkdir(parents=True, exist_ok=True)
            lh, lw = img.shape[:2]
            for ty in range(0, math.ceil(lh / tile_size)):
                for tx in range(0, math.ceil(lw / tile_size)):
                    crop = img[ty * tile_size:(ty + 1) * tile_size, tx * tile_size:(tx + 1) * tile_size]
                    Image.fromarray(np.ascontiguousarray(crop)).save(out_dir / name / f"{ty}_{tx}.png", compress_level=1)
            levels.append({"downsample": ds, "width": lw, "height": lh, "dir": name})
            if max(lh, lw) <= min_level_size or min(lh, lw) < 2:
                break
            img, ds = _halve(img), ds * 2
        meta = {
            "slide_id": slide_id,
            "width": w,
            "height": h,
            "tile_size": tile_size,
            "base_magnification": base_magnification,
            "microns_per_pixel": microns_per_pixel,
            "levels": levels,
        }
        if extra_meta:
            meta.update(extra_meta)
        (out_dir / "slide.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    except OSError as exc:
        raise DatasetWriteError(f"cannot write slide {slide_id} to {out_dir}: {exc}") from exc
    return open_slide(out_dir)


# --------------------------------------------------------------------------
# synthesis

@dataclass
class SynthConfig:
    n_slides: int = 200
    seed: int = 0
    class_mix: tuple = (3.0, 3.0, 2.0, 2.0)
    slide_px: int = 3072
    cell_palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    density_profile: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_DENSITY.items()})
    # sigma of the per-slide, per-cell-type lognormal density multiplier
    slide_variability: float = 0.2
    tile_size: int = 512
    base_magnification: float = 40.0
    microns_per_pixel: float = 0.25

    def violations(self):
        out = []
        if not (isinstance(self.n_slides, int) and self.n_slides > 0):
            out.append("n_slides must be a positive integer")
        if len(self.class_mix) != 4 or any(w < 0 for w in self.class_mix):
            out.append("class_mix must be 4 nonnegative weights")
        elif sum(self.class_mix) <= 0:
            out.append("class_mix must sum to a positive value")
        if self.slide_px < 64:
            out.append("slide_px must be >= 64")
        if set(self.cell_palette) != set(CELL_TYPES):
            out.append(f"cell_palette keys must be {CELL_TYPES}")
        profile = {int(k): v for k, v in self.density_profile.items()}
        if set(profile) != {0, 1, 2, 3}:
            out.append("density_profile must cover class labels 0..3")
        else:
            for c, dens in profile.items():
                if set(dens) != set(CELL_TYPES) or any(v < 0 for v in dens.values()):
                    out.append(f"density_profile[{c}] must give a nonnegative density per cell type")
            neut = [profile[c].get("neutrophil", 0.0) for c in range(4)]
            if any(b < a for a, b in zip(neut, neut[1:])):
                out.append("density_profile must be nondecreasing in neutrophil density from Inactive to Severe")
        if self.slide_variability < 0:
            out.append("slide_variability must be >= 0")
        if self.tile_size <= 0 or self.base_magnification <= 0 or self.microns_per_pixel <= 0:
            out.append("tile_size, base_magnification and microns_per_pixel must be positive")
        return out

    def validate(self):
        bad = self.violations()
        if bad:
            raise ValidationError("invalid SynthConfig: " + "; ".join(bad))
        return self


def _ellipse_mask(shape, cx, cy, rx, ry, angle=0.0):
    out = np.zeros(shape, dtype=bool)
    r = max(rx, ry)
    x0, x1 = max(0, int(cx - r) - 1), min(shape[1], int(cx + r) + 2)
    y0, y1 = max(0, int(cy - r) - 1), min(shape[0], int(cy + r) + 2)
    if x0 >= x1 or y0 >= y1:
        return out
    yy, xx = np.ogrid[y0:y1, x0:x1]
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(angle), math.sin(angle)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    out[y0:y1, x0:x1] = u * u + v * v <= 1.0
    return out


def _tissue_layout(rng, size):
    """Main ellipse (always >= 36% of the slide) plus up to two satellites."""
    blobs = []
    a, b = rng.uniform(0.34, 0.46, size=2) * size
    cx, cy = size / 2 + rng.uniform(-0.04, 0.04, size=2) * size
    blobs.append((float(cx), float(cy), float(a), float(b), float(rng.uniform(0, math.pi))))
    for _ in range(int(rng.integers(0, 3))):
        r = rng.uniform(0.06, 0.12, size=2) * size
        c = rng.uniform(0.12, 0.88, size=2) * size
        blobs.append((float(c[0]), float(c[1]), float(r[0]), float(r[1]), float(rng.uniform(0, math.pi))))
    return blobs


def _place_cells(rng, tissue, counts, palette_order):
    """Rejection-sample non-touching ellipse cells whose centers fall on tissue."""
    h, w = tissue.shape
    rmax = CELL_RADIUS_RANGE[1]
    cell = int(2 * rmax + 3)
    buckets = {}
    placed = []
    for ctype in palette_order:
        for _ in range(counts[ctype]):
            for _attempt in range(30):
                cx, cy = rng.uniform(rmax, w - rmax), rng.uniform(rmax, h - rmax)
                rx, ry = rng.uniform(*CELL_RADIUS_RANGE, size=2)
                if not tissue[int(cy), int(cx)]:
                    continue
                gx, gy = int(cx // cell), int(cy // cell)
                ok = True
                for nx in (gx - 1, gx, gx + 1):
                    for ny in (gy - 1, gy, gy + 1):
                        for (ox, oy, orad) in buckets.get((nx, ny), ()):
                            if (ox - cx) ** 2 + (oy - cy) ** 2 < (orad + max(rx, ry) + 3) ** 2:
                                ok = False
                                break
                        if not ok:
                            break
                    if not ok:
                        break
                if ok:
                    buckets.setdefault((gx, gy), []).append((cx, cy, max(rx, ry)))
                    placed.append({"cell_type": ctype, "cx": round(float(cx), 3), "cy": round(float(cy), 3),
                                   "rx": round(float(rx), 3), "ry": round(float(ry), 3)})
                    break
    return placed


def paint_cells(rgb, cells, palette):
    """Draw filled axis-aligned ellipses in place; returns the image."""
    h, w = rgb.shape[:2]
    for c in cells:
        cx, cy, rx, ry = c["cx"], c["cy"], c["rx"], c["ry"]
        x0, x1 = max(0, int(math.floor(cx - rx))), min(w, int(math.ceil(cx + rx)) + 1)
        y0, y1 = max(0, int(math.floor(cy - ry))), min(h, int(math.ceil(cy + ry)) + 1)
        yy, xx = np.ogrid[y0:y1, x0:x1]
        m = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        rgb[y0:y1, x0:x1][m] = palette[c["cell_type"]]
    return rgb


def render_slide(cfg, label, rng):
    """Return (rgb, cells, tissue_blobs) for one synthetic slide."""
    size = cfg.slide_px
    blobs = _tissue_layout(rng, size)
    tissue = np.zeros((size, size), dtype=bool)
    for (cx, cy, a, b, ang) in blobs:
        tissue |= _ellipse_mask(tissue.shape, cx, cy, a, b, ang)
    rgb = np.empty((size, size, 3), dtype=np.uint8)
    rgb[:] = GLASS_RGB
    rgb[tissue] = TISSUE_RGB

    tissue_mp = tissue.sum() / 1e6
    profile = {int(k): v for k, v in cfg.density_profile.items()}[label]
    counts = {}
    for ctype in CELL_TYPES:
        mult = math.exp(rng.normal(0.0, cfg.slide_variability)) if cfg.slide_variability > 0 else 1.0
        counts[ctype] = int(rng.poisson(profile[ctype] * mult * tissue_mp))
    cells = _place_cells(rng, tissue, counts, CELL_TYPES)
    palette = {k: tuple(int(c) for c in v) for k, v in cfg.cell_palette.items()}
    paint_cells(rgb, cells, palette)
    return rgb, cells, blobs


def _assign_patients(rng, n_slides):
    patients = []
    j = 0
    while len(patients) < n_slides:
        k = int(rng.integers(1, 5))
        patients.extend([f"P{j:04d}"] * k)
        j += 1
    return patients[:n_slides]


def _synth_one(args):
    cfg, index, label, seed_seq, slide_dir = args
    rng = np.random.default_rng(seed_seq)
    rgb, cells, blobs = render_slide(cfg, label, rng)
    slide_id = f"S{index:04d}"
    write_slide(rgb, slide_dir, slide_id,
                base_magnification=cfg.base_magnification,
                microns_per_pixel=cfg.microns_per_pixel,
                tile_size=cfg.tile_size,
                extra_meta={"tissue_ellipses": [list(b) for b in blobs], "class_label": label})
    try:
        with open(Path(slide_dir) / "cells.jsonl", "w") as fh:
            for c in cells:
                fh.write(json.dumps(c) + "\n")
    except OSError as exc:
        raise DatasetWriteError(str(exc)) from exc
    return len(cells)


def generate_dataset(cfg, out_dir, workers=1):
    """Render ``cfg.n_slides`` slides under ``out_dir/slides`` and write ``out_dir/manifest.jsonl``."""
    cfg.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "slides").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetWriteError(f"cannot create {out_dir}: {exc}") from exc

    root = np.random.SeedSequence(cfg.seed)
    meta_rng = np.random.default_rng(root.spawn(1)[0])
    mix = np.asarray(cfg.class_mix, dtype=float)
    labels = meta_rng.choice(4, size=cfg.n_slides, p=mix / mix.sum())
    patients = _assign_patients(meta_rng, cfg.n_slides)
    slide_seeds = root.spawn(cfg.n_slides + 1)[1:]

    jobs = []
    entries = []
    for i in range(cfg.n_slides):
        sid = f"S{i:04d}"
        rel = f"slides/{sid}"
        jobs.append((cfg, i, int(labels[i]), slide_seeds[i], out_dir / rel))
        entries.append(SlideEntry(sid, patients[i], int(labels[i]), rel,
                                  cfg.base_magnification, cfg.microns_per_pixel))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_synth_one, jobs))
    else:
        for job in jobs:
            _synth_one(job)

    manifest = SlideManifest(entries, SCHEMA_VERSION, root=out_dir)
    try:
        save_manifest(manifest, out_dir / "manifest.jsonl")
    except OSError as exc:
        raise DatasetWriteError(str(exc)) from exc
    return manifest


def load_annotations(slide_dir):
    path = Path(slide_dir) / "cells.jsonl"
    if not path.exists():
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def annotation_counts(cells):
    out = {t: 0 for t in CELL_TYPES}
    for c in cells:
        out[c["cell_type"]] += 1
    return out


def default_workers():
    return max(1, (os.cpu_count() or 1))
