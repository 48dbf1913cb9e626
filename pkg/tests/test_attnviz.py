import numpy as np
import pytest
from PIL import Image

from histograde import attnviz, slides, vit
from histograde.errors import ConfigError, ContractError

P = 16  # patch edge in pixels for these small fixtures


@pytest.fixture
def slide(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(48, 48, 3), dtype=np.uint8)
    return slides.write_slide(arr, tmp_path / "v", "v", base_magnification=20.0, tile_size=32)


def make_region(members_xy, side=3, origin=(0, 0)):
    return vit.Region("v", origin, tuple(range(len(members_xy))), tuple(members_xy), side, P, 1.0)


def naive_overlay(img, region, weights, alpha, mode):
    """Per-pixel reference: ramp colour of the cell's scaled weight, blended where the cell is a member."""
    w = np.asarray(weights, float)
    t = np.full_like(w, 0.5) if w.max() == w.min() else (w - w.min()) / (w.max() - w.min())
    side = region.region_side
    cell = {xy: t[i] for i, xy in enumerate(region.rel_coords)}

    def ramp(v):
        stops = [(59, 76, 192), (221, 221, 221), (180, 4, 38)]
        seg = 0 if v < 0.5 else 1
        f = v * 2 - seg
        return [stops[seg][c] * (1 - f) + stops[seg + 1][c] * f for c in range(3)]

    out = img.astype(float).copy()
    for y in range(side * P):
        for x in range(side * P):
            cx, cy = x // P, y // P
            if (cx, cy) not in cell:
                continue
            if mode == "nearest":
                v = cell[(cx, cy)]
            else:
                fx = min(max((x + 0.5) / P - 0.5, 0), side - 1)
                fy = min(max((y + 0.5) / P - 0.5, 0), side - 1)
                x0, y0 = int(fx), int(fy)
                num = den = 0.0
                for xx, wx in ((x0, 1 - (fx - x0)), (min(x0 + 1, side - 1), fx - x0)):
                    for yy, wy in ((y0, 1 - (fy - y0)), (min(y0 + 1, side - 1), fy - y0)):
                        if (xx, yy) in cell:
                            num += wx * wy * cell[(xx, yy)]
                            den += wx * wy
                v = num / den if den > 0 else cell[(cx, cy)]
            out[y, x] = (1 - alpha) * out[y, x] + alpha * np.array(ramp(v))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def test_ramp_and_scaling():
    assert np.array_equal(attnviz.ramp(0.5), [221, 221, 221])
    assert np.array_equal(attnviz.ramp(1.0), [180, 4, 38])
    assert np.array_equal(attnviz.scale_weights([0.2, 0.2]), [0.5, 0.5])
    w = np.random.default_rng(1).random(9)
    s = attnviz.scale_weights(w)
    order = np.argsort(w)
    assert np.all(np.diff(s[order]) > 0)


def test_uniform_and_one_hot(slide):
    r = make_region([(0, 0), (1, 0), (2, 1), (1, 2)])
    cfg = attnviz.OverlayConfig(alpha=1.0, upsampling="nearest")
    img = attnviz.render_attention_overlay(slide, r, vit.AttentionMap(r, np.full(4, 0.25)), cfg)
    for dx, dy in r.rel_coords:
        assert (img[dy * P:(dy + 1) * P, dx * P:(dx + 1) * P] == [221, 221, 221]).all()
    img = attnviz.render_attention_overlay(slide, r, vit.AttentionMap(r, [0, 0, 1, 0]), cfg)
    assert (img[P:2 * P, 2 * P:3 * P] == [180, 4, 38]).all()
    assert (img[0:P, 0:P] == [59, 76, 192]).all()


@pytest.mark.parametrize("mode", ["nearest", "bilinear"])
@pytest.mark.parametrize("alpha", [1.0, 0.45])
def test_pixel_oracle(slide, mode, alpha):
    r = make_region([(0, 0), (1, 0), (2, 0), (0, 1), (2, 2)])
    w = np.array([0.1, 0.4, 0.2, 0.25, 0.05])
    cfg = attnviz.OverlayConfig(alpha=alpha, upsampling=mode)
    got = attnviz.render_attention_overlay(slide, r, vit.AttentionMap(r, w), cfg)
    base = attnviz.region_image(slide, r)
    assert np.array_equal(got, naive_overlay(base, r, w, alpha, mode))
    # holes are left exactly as the tissue image
    assert np.array_equal(got[P:2 * P, P:2 * P], base[P:2 * P, P:2 * P])


def test_region_image_pads_outside_slide(slide):
    r = make_region([(0, 0)], side=4, origin=(1, 1))
    img = attnviz.region_image(slide, r)
    assert img.shape == (4 * P, 4 * P, 3)
    assert np.array_equal(img[:2 * P, :2 * P], slides.read_region(slide, 0, (P, P, 2 * P, 2 * P)))
    assert (img[2 * P:] == 255).all()


def test_errors(slide):
    r = make_region([(0, 0), (1, 0)])
    other = make_region([(0, 0), (1, 1)])
    with pytest.raises(ContractError):
        attnviz.render_attention_overlay(slide, r, vit.AttentionMap(other, [0.5, 0.5]))
    with pytest.raises(ContractError):
        attnviz.render_attention_overlay(slide, r, vit.AttentionMap(r, [1.0]))
    with pytest.raises(ConfigError):
        attnviz.OverlayConfig(alpha=0)


def test_export_panel(slide, tmp_path):
    r = make_region([(0, 0), (1, 1)])
    amap = vit.AttentionMap(r, [0.3, 0.7])
    two = attnviz.export_panel(slide, r, amap, tmp_path / "a")
    assert [p.name for p in two] == ["v_0_0_region.png", "v_0_0_attention.png"]
    cells = [{"cell_type": "neutrophil", "cx": 8.0, "cy": 8.0, "rx": 4.0, "ry": 4.0},
             {"cell_type": "epithelial", "cx": 24.0, "cy": 24.0, "rx": 3.0, "ry": 3.0},
             {"cell_type": "macrophage", "cx": 40.0, "cy": 8.0, "rx": 3.0, "ry": 3.0},
             {"cell_type": "lymphocyte", "cx": 8.0, "cy": 40.0, "rx": 3.0, "ry": 3.0}]
    three = attnviz.export_panel(slide, r, amap, tmp_path / "b", annotations=cells)
    assert len(three) == 3
    ann = np.asarray(Image.open(three[2]))
    assert tuple(ann[8, 8]) == (255, 255, 0)      # neutrophil yellow
    assert tuple(ann[24, 24]) == (255, 0, 0)      # epithelial red
    assert tuple(ann[8, 40]) == (0, 0, 255)       # macrophage blue
    assert tuple(ann[40, 8]) == (0, 255, 0)       # lymphocyte green
    again = attnviz.export_panel(slide, r, amap, tmp_path / "c", annotations=cells)
    for a, b in zip(three, again):
        assert a.read_bytes() == b.read_bytes()
