"""Tissue masking and patch-grid extraction."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BoundsError, CapabilityError, ParseError, ValidationError
from .slides import read_level, read_region

SATURATION_THRESHOLD = 0.08
LUMINANCE_THRESHOLD = 0.82
MASK_MAGNIFICATION = 1.25
PAD_RGB = (255, 255, 255)


@dataclass
class TissueMask:
    width: int
    height: int
    bits: np.ndarray
    mask_downsample: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.shape != (self.height, self.width):
            raise ValidationError(f"mask bits {self.bits.shape} do not match {self.height}x{self.width}")
        if self.mask_downsample < 1:
            raise ValidationError("mask_downsample must be >= 1")


@dataclass(frozen=True)
class PatchRecord:
    slide_id: str
    grid_x: int
    grid_y: int
    px_rect: tuple  # (x0, y0, w, h) at the extraction level
    tissue_fraction: float
    # extraction-level downsample relative to level 0; lets read_patch resample
    downsample: float = field(default=1.0, compare=False)


@dataclass
class PatchGrid:
    slide_id: str
    patch_size_px: int
    target_magnification: float
    records: list
    downsample: float = 1.0
    level_size: tuple = (0, 0)  # (width, height) of the extraction level

    def __len__(self):
        return len(self.records)

    def coords(self):
        return np.array([(r.grid_x, r.grid_y) for r in self.records], dtype=np.int64).reshape(-1, 2)

    @property
    def shape(self):
        """(n_cols, n_rows) of the full grid, retained or not."""
        p = self.patch_size_px
        return math.ceil(self.level_size[0] / p), math.ceil(self.level_size[1] / p)


def tissue_pixels(rgb):
    """Boolean raster: HSV saturation above threshold or luminance below threshold."""
    rgb = np.asarray(rgb, dtype=np.float64) / 255.0
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    sat = np.divide(mx - mn, mx, out=np.zeros_like(mx), where=mx > 0)
    lum = rgb @ np.array([0.299, 0.587, 0.114])
    return (sat > SATURATION_THRESHOLD) | (lum < LUMINANCE_THRESHOLD)


def _open_close(bits):
    k = np.ones((3, 3), dtype=bool)
    # erosion treats out-of-image as tissue so a full mask stays full
    bits = ndimage.binary_dilation(ndimage.binary_erosion(bits, k, border_value=1), k)
    bits = ndimage.binary_erosion(ndimage.binary_dilation(bits, k), k, border_value=1)
    return bits


def mask_from_rgb(rgb, mask_downsample=1):
    bits = _open_close(tissue_pixels(rgb))
    return TissueMask(bits.shape[1], bits.shape[0], bits, int(mask_downsample))


def compute_tissue_mask(slide, mask_level=None):
    if mask_level is None:
        mask_level = slide.nearest_level(MASK_MAGNIFICATION)
    if not 0 <= mask_level < len(slide.levels):
        raise BoundsError(f"mask level {mask_level} does not exist")
    return mask_from_rgb(read_level(slide, mask_level), slide.levels[mask_level].downsample)


def _overlap_weights(n_cells, cell, start, length):
    """Length of overlap of [start, start+length) with each mask cell [i*cell, (i+1)*cell)."""
    edges = np.arange(n_cells + 1) * cell
    lo = np.maximum(edges[:-1], start)
    hi = np.minimum(edges[1:], start + length)
    return np.clip(hi - lo, 0.0, None)


def _extraction_geometry(slide, target_magnification):
    if target_magnification > slide.base_magnification * (1 + 1e-9):
        raise CapabilityError(
            f"target magnification {target_magnification} exceeds base {slide.base_magnification}")
    if target_magnification <= 0:
        raise CapabilityError("target magnification must be positive")
    ds = slide.base_magnification / target_magnification
    for lv in slide.levels:
        if abs(lv.downsample - ds) < 1e-9:
            return float(lv.downsample), (lv.width, lv.height)
    return ds, (int(round(slide.width_px / ds)), int(round(slide.height_px / ds)))


def patch_tissue_fractions(mask, downsample, level_size, patch_size_px):
    """Area-weighted tissue fraction of every grid cell, shape (n_rows, n_cols)."""
    p = patch_size_px
    nx, ny = math.ceil(level_size[0] / p), math.ceil(level_size[1] / p)
    cell = mask.mask_downsample / downsample  # mask pixel edge in extraction-level pixels
    bits = mask.bits.astype(np.float64)
    out = np.zeros((ny, nx))
    wx = np.stack([_overlap_weights(mask.width, cell, gx * p, p) for gx in range(nx)])
    wy = np.stack([_overlap_weights(mask.height, cell, gy * p, p) for gy in range(ny)])
    out[:] = wy @ bits @ wx.T
    return out / float(p * p)


def extract_patch_grid(slide, mask, patch_size_px=224, target_magnification=20.0, min_tissue=0.05):
    if patch_size_px <= 0:
        raise ValidationError("patch_size_px must be positive")
    ds, level_size = _extraction_geometry(slide, target_magnification)
    frac = patch_tissue_fractions(mask, ds, level_size, patch_size_px)
    records = []
    for gy, gx in zip(*np.nonzero(frac >= min_tissue)):  # row-major order
        records.append(PatchRecord(
            slide_id=slide.slide_id,
            grid_x=int(gx),
            grid_y=int(gy),
            px_rect=(int(gx) * patch_size_px, int(gy) * patch_size_px, patch_size_px, patch_size_px),
            tissue_fraction=float(min(1.0, frac[gy, gx])),
            downsample=ds,
        ))
    return PatchGrid(slide.slide_id, patch_size_px, float(target_magnification), records, ds, level_size)


def _level_for(slide, downsample):
    for i, lv in enumerate(slide.levels):
        if abs(lv.downsample - downsample) < 1e-9:
            return i, True
    finer = [i for i, lv in enumerate(slide.levels) if lv.downsample <= downsample]
    return max(finer, key=lambda i: slide.levels[i].downsample), False


def read_patch(slide, record):
    """Pixels of ``record`` at its extraction level; out-of-slide padding is white."""
    x0, y0, w, h = record.px_rect
    ds = record.downsample
    level, exact = _level_for(slide, ds)
    src_w, src_h = slide.level_dims(level)
    if exact:
        lw, lh = src_w, src_h
    else:
        lw, lh = int(round(slide.width_px / ds)), int(round(slide.height_px / ds))
    if x0 < 0 or y0 < 0 or x0 >= lw or y0 >= lh:
        raise BoundsError(f"patch rect {record.px_rect} outside {lw}x{lh} extraction level")
    out = np.empty((h, w, 3), dtype=np.uint8)
    out[:] = PAD_RGB
    cw, ch = min(w, lw - x0), min(h, lh - y0)
    if exact:
        out[:ch, :cw] = read_region(slide, level, (x0, y0, cw, ch))
        return out

    f = ds / slide.levels[level].downsample
    sx = (np.arange(x0, x0 + cw) + 0.5) * f - 0.5
    sy = (np.arange(y0, y0 + ch) + 0.5) * f - 0.5
    rx0 = max(0, int(math.floor(sx[0])))
    ry0 = max(0, int(math.floor(sy[0])))
    rx1 = min(src_w, int(math.ceil(sx[-1])) + 2)
    ry1 = min(src_h, int(math.ceil(sy[-1])) + 2)
    src = read_region(slide, level, (rx0, ry0, rx1 - rx0, ry1 - ry0)).astype(np.float64)
    yy, xx = np.meshgrid(sy - ry0, sx - rx0, indexing="ij")
    for c in range(3):
        out[:ch, :cw, c] = np.clip(np.rint(ndimage.map_coordinates(
            src[..., c], [yy, xx], order=1, mode="nearest")), 0, 255)
    return out


# --------------------------------------------------------------------------
# persistence

GRID_FIELDS = ("slide_id", "grid_x", "grid_y", "x0", "y0", "w", "h", "tissue_fraction")


def save_patch_grid(grid, path):
    header = {"patch_grid": {
        "slide_id": grid.slide_id,
        "patch_size_px": grid.patch_size_px,
        "target_magnification": grid.target_magnification,
        "downsample": grid.downsample,
        "level_width": grid.level_size[0],
        "level_height": grid.level_size[1],
    }}
    lines = [json.dumps(header)]
    for r in grid.records:
        x0, y0, w, h = r.px_rect
        lines.append(json.dumps({"slide_id": r.slide_id, "grid_x": r.grid_x, "grid_y": r.grid_y,
                                 "x0": x0, "y0": y0, "w": w, "h": h,
                                 "tissue_fraction": r.tissue_fraction}))
    Path(path).write_text("\n".join(lines) + "\n")


def load_patch_grid(path):
    header = None
    records = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
            if header is None:
                if "patch_grid" not in rec:
                    raise ParseError("missing patch_grid header", line=lineno)
                header = rec["patch_grid"]
                continue
            missing = [f for f in GRID_FIELDS if f not in rec]
            if missing:
                raise ParseError(f"missing field '{missing[0]}'", line=lineno, field=missing[0])
            records.append(PatchRecord(rec["slide_id"], int(rec["grid_x"]), int(rec["grid_y"]),
                                       (int(rec["x0"]), int(rec["y0"]), int(rec["w"]), int(rec["h"])),
                                       float(rec["tissue_fraction"]), float(header["downsample"])))
    if header is None:
        raise ParseError("empty patch grid file", line=1)
    return PatchGrid(header["slide_id"], int(header["patch_size_px"]), float(header["target_magnification"]),
                     records, float(header["downsample"]),
                     (int(header["level_width"]), int(header["level_height"])))
