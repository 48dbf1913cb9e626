"""CLS-attention heatmaps blended over region imagery."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BoundsError, ConfigError, ContractError
from .preprocess import PAD_RGB, PatchRecord, read_patch
from .slides import paint_cells

# blue -> neutral -> red; position 0.5 is exactly the middle stop
RAMP_STOPS = np.array([[59, 76, 192], [221, 221, 221], [180, 4, 38]], dtype=np.float64)

# cell annotation colors for the overlay panel; unlabeled cells are black
ANNOTATION_COLORS = {
    "epithelial": (255, 0, 0),
    "macrophage": (0, 0, 255),
    "neutrophil": (255, 255, 0),
    "lymphocyte": (0, 255, 0),
}
UNLABELED_COLOR = (0, 0, 0)


@dataclass(frozen=True)
class OverlayConfig:
    alpha: float = 0.45
    upsampling: str = "bilinear"

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha {self.alpha} not in (0, 1]")
        if self.upsampling not in ("nearest", "bilinear"):
            raise ConfigError(f"unknown upsampling {self.upsampling!r}")


def ramp(t):
    """Map positions in [0, 1] to RGB floats on the blue-red ramp."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    seg = np.minimum((t * 2).astype(int), 1)
    frac = (t * 2 - seg)[..., None]
    return RAMP_STOPS[seg] * (1 - frac) + RAMP_STOPS[seg + 1] * frac


def scale_weights(weights):
    """Min-max scale to [0, 1]; a constant map sits at 0.5."""
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    if hi - lo <= 0:
        return np.full_like(w, 0.5)
    return (w - lo) / (hi - lo)


def region_image(slide, region):
    """RGB pixels of the full ``region_side`` window at the extraction level."""
    p, side = region.patch_size_px, region.region_side
    ox, oy = region.origin
    out = np.empty((side * p, side * p, 3), dtype=np.uint8)
    for dy in range(side):
        for dx in range(side):
            rec = PatchRecord(region.slide_id, ox + dx, oy + dy, ((ox + dx) * p, (oy + dy) * p, p, p),
                              0.0, region.downsample)
            try:
                tile = read_patch(slide, rec)
            except BoundsError:
                tile = np.empty((p, p, 3), dtype=np.uint8)
                tile[:] = PAD_RGB
            out[dy * p:(dy + 1) * p, dx * p:(dx + 1) * p] = tile
    return out


def _cell_grid(region, weights):
    side = region.region_side
    vals = np.full((side, side), np.nan)
    for (dx, dy), t in zip(region.rel_coords, scale_weights(weights)):
        vals[dy, dx] = t
    return vals


def _upsample(vals, p, mode):
    """Per-pixel ramp position and shading mask for a (side, side) cell grid."""
    shaded = np.repeat(np.repeat(~np.isnan(vals), p, axis=0), p, axis=1)
    if mode == "nearest":
        return np.repeat(np.repeat(np.nan_to_num(vals), p, axis=0), p, axis=1), shaded
    side = vals.shape[0]
    # pixel centers in cell units; cell centers sit at i + 0.5
    c = (np.arange(side * p) + 0.5) / p - 0.5
    c = np.clip(c, 0, side - 1)
    i0 = np.floor(c).astype(int)
    i1 = np.minimum(i0 + 1, side - 1)
    f = c - i0
    valid = (~np.isnan(vals)).astype(np.float64)
    v = np.nan_to_num(vals)
    num = np.zeros((side * p, side * p))
    den = np.zeros((side * p, side * p))
    for ya, wy in ((i0, 1 - f), (i1, f)):
        for xa, wx in ((i0, 1 - f), (i1, f)):
            w = wy[:, None] * wx[None, :] * valid[ya[:, None], xa[None, :]]
            num += w * v[ya[:, None], xa[None, :]]
            den += w
    t = np.divide(num, den, out=np.full_like(num, 0.5), where=den > 0)
    # a pixel whose bilinear neighbours are all holes falls back to its own cell
    own = np.repeat(np.repeat(np.nan_to_num(vals, nan=0.5), p, axis=0), p, axis=1)
    return np.where(den > 0, t, own), shaded


def render_attention_overlay(slide, region, amap, cfg=None):
    cfg = cfg or OverlayConfig()
    if amap.region is not None and amap.region != region:
        raise ContractError("attention map belongs to a different region")
    if len(amap.weights) != len(region.members):
        raise ContractError(f"{len(amap.weights)} weights for {len(region.members)} region members")
    img = region_image(slide, region).astype(np.float64)
    t, shaded = _upsample(_cell_grid(region, amap.weights), region.patch_size_px, cfg.upsampling)
    color = ramp(t)
    out = img.copy()
    out[shaded] = (1 - cfg.alpha) * img[shaded] + cfg.alpha * color[shaded]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def annotation_overlay(slide, region, annotations):
    """Region imagery with level-0 cell annotations painted in the annotation colors."""
    img = region_image(slide, region)
    ds = region.downsample
    x0 = region.origin[0] * region.patch_size_px
    y0 = region.origin[1] * region.patch_size_px
    cells = []
    for a in annotations:
        cells.append({"cell_type": a["cell_type"] if a["cell_type"] in ANNOTATION_COLORS else "_unlabeled",
                      "cx": a["cx"] / ds - x0, "cy": a["cy"] / ds - y0,
                      "rx": max(a["rx"] / ds, 0.5), "ry": max(a["ry"] / ds, 0.5)})
    palette = dict(ANNOTATION_COLORS, _unlabeled=UNLABELED_COLOR)
    h, w = img.shape[:2]
    cells = [c for c in cells if -c["rx"] <= c["cx"] < w + c["rx"] and -c["ry"] <= c["cy"] < h + c["ry"]]
    return paint_cells(img, cells, palette)


def panel_name(region, kind):
    return f"{region.slide_id}_{region.origin[0]}_{region.origin[1]}_{kind}.png"


def export_panel(slide, region, amap, out_dir, annotations=None, cfg=None):
    """Write the raw region, the attention overlay and, with annotations, the cell overlay."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = {"region": region_image(slide, region),
              "attention": render_attention_overlay(slide, region, amap, cfg)}
    if annotations is not None:
        images["cells"] = annotation_overlay(slide, region, annotations)
    paths = []
    for kind, arr in images.items():
        path = out_dir / panel_name(region, kind)
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths
