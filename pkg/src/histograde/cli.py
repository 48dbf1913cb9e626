"""Command-line driver for the grading pipeline.

Every stage reads and writes files under ``--out``::

    manifest.jsonl, slides/          synth
    patches/{slide_id}.jsonl         preprocess
    embeddings/{slide_id}.hge        embed
    train/predictions.jsonl, train/run_log.jsonl, train/fold{k}.hgc
    eval/metrics.json, eval/confusion.csv
    stats/cell_counts.jsonl, stats/stats.json, stats/<cell>_distribution.json, stats/<cell>_violin.svg
    viz/{slide_id}_{gx}_{gy}_{kind}.png
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import attnviz, cytostats, embed, metrics, preprocess, slides, trainer, vit
from .errors import ConfigError, HistogradeError, StageDependencyError

log = logging.getLogger("histograde")

STAGES = ("synth", "preprocess", "embed", "train", "evaluate", "stats", "visualize")


# --------------------------------------------------------------------------
# configuration

@dataclass
class SynthSection:
    n_slides: int = 200
    class_mix: list = field(default_factory=lambda: [3.0, 3.0, 2.0, 2.0])
    slide_px: int = 3072
    slide_variability: float = 0.2
    tile_size: int = 512
    base_magnification: float = 40.0
    microns_per_pixel: float = 0.25
    density_profile: dict = field(default_factory=dict)  # class name -> {cell type -> density}
    cell_palette: dict = field(default_factory=dict)  # cell type -> [r, g, b]


@dataclass
class PreprocessSection:
    patch_size_px: int = 224
    target_magnification: float = 20.0
    min_tissue: float = 0.05
    mask_level: int | None = None


@dataclass
class EmbedSection:
    # directory of externally produced HGE1 files named {slide_id}.hge
    import_dir: str | None = None


@dataclass
class ModelSection:
    preset: str = "desk"
    d_model: int | None = None
    n_heads: int | None = None
    n_layers: int | None = None
    mlp_ratio: float | None = None
    dropout: float | None = None
    region_side: int = 4


@dataclass
class TrainSection:
    regions_per_iter_train: int = 4
    regions_per_slide_val: int = 175
    batch_size: int = 16
    patience: int = 10
    max_epochs: int = 60
    k_folds: int = 5
    # default learning rate and weight decay; desk preset overrides lr to 1e-3
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    normalize_inputs: bool = True
    min_class_weight: float | None = None


@dataclass
class MetricsSection:
    bootstrap_B: int = 1000
    alpha: float = 0.05


@dataclass
class StatsSection:
    cell_type: str = "neutrophil"
    pairs: str = "mild:inactive,moderate:mild,severe:moderate"
    tolerance: int = 12
    min_size: int = 20
    counts_file: str | None = None


@dataclass
class VizSection:
    alpha: float = 0.45
    upsampling: str = "bilinear"
    aggregation: str = "last"
    slides_per_class: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthSection = field(default_factory=SynthSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    embed: EmbedSection = field(default_factory=EmbedSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    stats: StatsSection = field(default_factory=StatsSection)
    viz: VizSection = field(default_factory=VizSection)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for k, v in data.items():
        sub = names[k].default_factory if names[k].default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[k] = _build(sub, v, k)
        else:
            kwargs[k] = _check_type(names[k], v, where)
    return cls(**kwargs)


def _check_type(f, value, where):
    default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
    if default is None:
        return value
    want = type(default)
    ok = isinstance(value, want) and not (want is int and isinstance(value, bool))
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        ok, value = True, float(value)
    if not ok:
        raise ConfigError(f"[{where}] {f.name} must be {want.__name__}, got {type(value).__name__}")
    return value


def load_config(path=None):
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    return _build(RunConfig, data, "root")


def synth_config(rc, seed):
    s = rc.synth
    kw = dict(n_slides=s.n_slides, seed=seed, class_mix=tuple(s.class_mix), slide_px=s.slide_px,
              slide_variability=s.slide_variability, tile_size=s.tile_size,
              base_magnification=s.base_magnification, microns_per_pixel=s.microns_per_pixel)
    if s.density_profile:
        prof = {}
        for k, v in s.density_profile.items():
            key = slides.CLASS_NAMES.index(k) if k in slides.CLASS_NAMES else int(k)
            prof[key] = {t: float(d) for t, d in v.items()}
        kw["density_profile"] = prof
    if s.cell_palette:
        kw["cell_palette"] = {k: tuple(v) for k, v in s.cell_palette.items()}
    return slides.SynthConfig(**kw).validate()


def model_config(rc, input_dim):
    m = rc.model
    overrides = {k: getattr(m, k) for k in ("d_model", "n_heads", "n_layers", "mlp_ratio", "dropout")
                 if getattr(m, k) is not None}
    overrides["region_side"] = m.region_side
    if m.preset == "desk":
        return vit.ModelConfig.desk(input_dim, **overrides)
    if m.preset == "full":
        return vit.ModelConfig.full(input_dim, **overrides)
    raise ConfigError(f"unknown model preset {m.preset!r}")


def train_config(rc, input_dim, seed):
    t = rc.train
    lr = t.lr if t.lr is not None else (1e-3 if rc.model.preset == "desk" else 1e-4)
    kw = {f.name: getattr(t, f.name) for f in dataclasses.fields(TrainSection) if f.name != "lr"}
    return trainer.TrainConfig(model=model_config(rc, input_dim), seed=seed, lr=lr, **kw)


def validate_config(rc):
    """Build every stage's typed config once so bad values fail before any work."""
    if not isinstance(rc.seed, int) or not 0 <= rc.seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {rc.seed!r}")
    synth_config(rc, 0)
    p = rc.preprocess
    if p.patch_size_px <= 0 or p.target_magnification <= 0 or not 0 <= p.min_tissue <= 1:
        raise ConfigError("preprocess: patch_size_px and target_magnification must be positive, min_tissue in [0, 1]")
    train_config(rc, 64, 0)
    if rc.metrics.bootstrap_B < 1 or not 0 < rc.metrics.alpha < 1:
        raise ConfigError("metrics: bootstrap_B must be >= 1 and alpha in (0, 1)")
    cytostats.parse_pairs(rc.stats.pairs)
    if rc.stats.cell_type not in slides.CELL_TYPES:
        raise ConfigError(f"stats: unknown cell_type {rc.stats.cell_type!r}")
    attnviz.OverlayConfig(rc.viz.alpha, rc.viz.upsampling)
    if rc.viz.aggregation not in ("last", "mean_layers"):
        raise ConfigError(f"viz: unknown aggregation {rc.viz.aggregation!r}")
    return rc


def stage_seed(seed, stage):
    return trainer.stable_hash(seed, stage)


# --------------------------------------------------------------------------
# stages

def _require(stage, path):
    if not Path(path).exists():
        raise StageDependencyError(stage, path)
    return Path(path)


def _manifest(out, stage):
    return slides.load_manifest(_require(stage, out / "manifest.jsonl"))


def run_synth(rc, out, seed, threads):
    cfg = synth_config(rc, stage_seed(seed, "synth"))
    if (out / "slides").exists():
        shutil.rmtree(out / "slides")
    m = slides.generate_dataset(cfg, out, workers=threads)
    return {"slides": len(m)}


def run_preprocess(rc, out, seed, threads):
    m = _manifest(out, "preprocess")
    p = rc.preprocess
    (out / "patches").mkdir(parents=True, exist_ok=True)
    total = 0
    for e in m:
        s = slides.open_slide(m.slide_path(e))
        mask = preprocess.compute_tissue_mask(s, p.mask_level)
        grid = preprocess.extract_patch_grid(s, mask, p.patch_size_px, p.target_magnification, p.min_tissue)
        preprocess.save_patch_grid(grid, out / "patches" / f"{e.slide_id}.jsonl")
        total += len(grid)
    return {"patches": total}


def run_embed(rc, out, seed, threads):
    m = _manifest(out, "embed")
    (out / "embeddings").mkdir(parents=True, exist_ok=True)
    dim = None
    for e in m:
        grid = preprocess.load_patch_grid(_require("embed", out / "patches" / f"{e.slide_id}.jsonl"))
        dest = out / "embeddings" / f"{e.slide_id}.hge"
        if rc.embed.import_dir:
            src = _require("embed", Path(rc.embed.import_dir) / f"{e.slide_id}.hge")
            mat = embed.import_embeddings(src, grid=grid, expected_dim=dim)
        else:
            mat = embed.embed_slide(slides.open_slide(m.slide_path(e)), grid, workers=threads)
        dim = mat.dim
        embed.write_embeddings(mat, dest)
    return {"dim": dim}


def _input_dim(out, m, stage):
    first = m.entries[0].slide_id
    path = _require(stage, out / "embeddings" / f"{first}.hge")
    return embed.import_embeddings(path).dim


def run_train(rc, out, seed, threads):
    m = _manifest(out, "train")
    for e in m:
        _require("train", out / "embeddings" / f"{e.slide_id}.hge")
    cfg = train_config(rc, _input_dim(out, m, "train"), stage_seed(seed, "train"))
    res = trainer.run_cross_validation(m, trainer.DirectoryStore(out), cfg, workers=threads)
    tdir = out / "train"
    tdir.mkdir(parents=True, exist_ok=True)
    trainer.write_predictions(res.predictions, tdir / "predictions.jsonl")
    trainer.write_run_log(res.log, tdir / "run_log.jsonl")
    for k, ck in enumerate(res.checkpoints):
        vit.save_checkpoint(ck, tdir / f"fold{k}.hgc")
    (tdir / "folds.json").write_text(json.dumps(
        {"k": res.folds.k, "slide_fold": res.folds.slide_fold}, indent=1, sort_keys=True) + "\n")
    return {"predictions": len(res.predictions)}


def run_evaluate(rc, out, seed, threads):
    preds = trainer.read_predictions(_require("evaluate", out / "train" / "predictions.jsonl"))
    rep = metrics.metric_report(preds, B=rc.metrics.bootstrap_B, alpha=rc.metrics.alpha,
                                seed=stage_seed(seed, "evaluate"))
    edir = out / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    metrics.write_report(rep, edir / "metrics.json")
    metrics.write_confusion_csv(metrics.confusion_matrix(preds), edir / "confusion.csv")
    return {"weighted": rep["weighted"]}


def run_stats(rc, out, seed, threads, pairs=None):
    st = rc.stats
    sdir = out / "stats"
    sdir.mkdir(parents=True, exist_ok=True)
    if st.counts_file:
        table = cytostats.load_cell_counts(_require("stats", st.counts_file))
    else:
        m = _manifest(out, "stats")
        palette = synth_config(rc, 0).cell_palette
        table = cytostats.CellCountTable()
        for e in m:
            counts = cytostats.detect_cells(slides.open_slide(m.slide_path(e)), palette,
                                            st.tolerance, st.min_size)
            table.append(cytostats.CellCountRow(e.slide_id, e.class_label, **counts))
    cytostats.save_cell_counts(table, sdir / "cell_counts.jsonl")
    results = cytostats.compare_classes(table, st.cell_type, cytostats.parse_pairs(pairs or st.pairs))
    cytostats.write_stats_report(results, sdir / "stats.json")
    cytostats.write_distribution_export(table, sdir, st.cell_type)
    return {k: {"u": v.u, "p": v.p_one_sided, "ps": v.ps} for k, v in results.items()}


def run_visualize(rc, out, seed, threads):
    m = _manifest(out, "visualize")
    tdir = out / "train"
    folds = json.loads(_require("visualize", tdir / "folds.json").read_text())["slide_fold"]
    vdir = out / "viz"
    vdir.mkdir(parents=True, exist_ok=True)
    ocfg = attnviz.OverlayConfig(rc.viz.alpha, rc.viz.upsampling)
    store = trainer.DirectoryStore(out)
    written = []
    for c in range(4):
        chosen = sorted(e.slide_id for e in m if e.class_label == c)[:rc.viz.slides_per_class]
        for sid in chosen:
            fold = folds[sid]
            ck = vit.load_checkpoint(_require("visualize", tdir / f"fold{fold}.hgc"))
            params = vit.as_param_tensors(ck.params)
            emb, grid = store.get(sid, purpose="eval")
            rows = (emb.rows - ck.buffers["input_mean"]) / ck.buffers["input_std"]
            windows = trainer.enumerate_windows(grid, ck.config.region_side)
            best = max(range(len(windows)), key=lambda i: (len(windows[i][1]), -i))
            region = trainer.sample_regions(grid, 1, ck.config.region_side, mode="val",
                                            windows=windows[best:best + 1])[0]
            _, attn = vit.encode_region(rows, region, ck.config, params)
            amap = vit.extract_cls_attention(attn, region, rc.viz.aggregation)
            entry = m.get(sid)
            slide_dir = m.slide_path(entry)
            written += attnviz.export_panel(slides.open_slide(slide_dir), region, amap, vdir,
                                            annotations=slides.load_annotations(slide_dir), cfg=ocfg)
    return {"images": len(written)}


RUNNERS = {
    "synth": run_synth,
    "preprocess": run_preprocess,
    "embed": run_embed,
    "train": run_train,
    "evaluate": run_evaluate,
    "stats": run_stats,
    "visualize": run_visualize,
}


# --------------------------------------------------------------------------
# entry point

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker cap for parallel stages")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="histograde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "pipeline"):
        sp = sub.add_parser(name, parents=[common])
        if name in ("stats", "pipeline"):
            sp.add_argument("--pairs", help="comma list of higher:lower class pairs, e.g. mild:inactive")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        rc = load_config(args.config)
        if args.seed is not None:
            rc.seed = args.seed
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        validate_config(rc)
        if getattr(args, "pairs", None):
            cytostats.parse_pairs(args.pairs)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        todo = STAGES if stage == "pipeline" else (stage,)
        summary = {}
        for s in todo:
            stage = s
            kw = {"pairs": args.pairs} if s == "stats" and getattr(args, "pairs", None) else {}
            summary[s] = RUNNERS[s](rc, out, rc.seed, args.threads, **kw)
    except HistogradeError as exc:
        print(json.dumps({"error": exc.code, "stage": stage, "message": str(exc)}), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "io", "stage": stage, "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps({"status": "ok", "stages": summary}, default=_jsonable))
    return 0


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


if __name__ == "__main__":
    sys.exit(main())
