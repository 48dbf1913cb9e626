import time

import numpy as np
import pytest

from histograde import embed, preprocess, slides


BUILD_SECONDS = {}
CRITERIA = {}


@pytest.fixture(scope="session")
def build_seconds():
    return BUILD_SECONDS


@pytest.fixture
def criterion():
    """Record the outcome of an acceptance criterion: call with its number and a
    list of (label, ok, detail) checks; fails the test if any check fails."""
    def record(number, title, checks):
        failed = [c for c in checks if not c[1]]
        detail = "; ".join(f"{label}: {info}" for label, ok, info in (failed or checks))
        CRITERIA[number] = ("FAIL" if failed else "PASS", title, detail)
        assert not failed, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, title, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} {status}: {title} [{detail}]")


def pink_slide(tmp_path, size=448, name="X", base=20.0, tile=256, rgb=None):
    """Uniform slide written through the normal pyramid writer."""
    if rgb is None:
        arr = np.empty((size, size, 3), dtype=np.uint8)
        arr[:] = slides.TISSUE_RGB
    else:
        arr = rgb
    return slides.write_slide(arr, tmp_path / name, name, base_magnification=base, tile_size=tile)


def prepare(manifest, out):
    """Mask, grid and embed every slide of ``manifest`` into ``out``."""
    (out / "patches").mkdir(parents=True, exist_ok=True)
    (out / "embeddings").mkdir(parents=True, exist_ok=True)
    for e in manifest:
        s = slides.open_slide(manifest.slide_path(e))
        grid = preprocess.extract_patch_grid(s, preprocess.compute_tissue_mask(s))
        preprocess.save_patch_grid(grid, out / "patches" / f"{e.slide_id}.jsonl")
        embed.write_embeddings(embed.embed_slide(s, grid), out / "embeddings" / f"{e.slide_id}.hge")


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """30 small synthetic slides, fully preprocessed (about 10 s)."""
    out = tmp_path_factory.mktemp("cohort")
    cfg = slides.SynthConfig(n_slides=30, seed=11, slide_px=1024)
    manifest = slides.generate_dataset(cfg, out)
    prepare(manifest, out)
    return out, manifest


@pytest.fixture(scope="session")
def cohort200(tmp_path_factory):
    """The 200-slide, seed-1 cohort used by the end-to-end checks (about 5 min)."""
    start = time.perf_counter()
    out = tmp_path_factory.mktemp("cohort200")
    manifest = slides.generate_dataset(slides.SynthConfig(n_slides=200, seed=1), out)
    prepare(manifest, out)
    BUILD_SECONDS["cohort200"] = time.perf_counter() - start
    return out, manifest
