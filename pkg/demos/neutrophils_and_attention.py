"""Neutrophil counts by grade and one attention panel, on the output of toy_cohort.py.

Run: python3 demos/neutrophils_and_attention.py [out_dir]
"""
import sys
from pathlib import Path

from histograde import attnviz, cytostats, slides, trainer, vit

out = Path(sys.argv[1] if len(sys.argv) > 1 else "toy_run")
manifest = slides.load_manifest(out / "manifest.jsonl")
palette = slides.SynthConfig().cell_palette

# neutrophil counts per slide from the painted colors, then adjacent-grade tests
table = cytostats.CellCountTable()
for e in manifest:
    counts = cytostats.detect_cells(slides.open_slide(manifest.slide_path(e)), palette)
    table.append(cytostats.CellCountRow(e.slide_id, e.class_label, **counts))
for pair, r in cytostats.compare_classes(table, "neutrophil").items():
    print(f"{pair:20s} U={r.u:7.1f}  p={r.p_one_sided:.2e}  PS={r.ps:.3f}  r={r.r_rank_biserial:.3f}  ({r.method})")
cytostats.write_distribution_export(table, out / "stats", "neutrophil")

# attention of the held-out fold model over the fullest window of a severe slide
preds = {p.slide_id: p for p in trainer.read_predictions(out / "train" / "predictions.jsonl")}
sid = next(e.slide_id for e in manifest if e.class_label == 3)
ckpt = vit.load_checkpoint(out / "train" / f"fold{preds[sid].fold}.hgc")
emb, grid = trainer.DirectoryStore(out).get(sid, purpose="eval")
rows = (emb.rows - ckpt.buffers["input_mean"]) / ckpt.buffers["input_std"]
windows = trainer.enumerate_windows(grid, ckpt.config.region_side)
best = max(windows, key=lambda w: len(w[1]))
region = trainer.sample_regions(grid, 1, ckpt.config.region_side, mode="val", windows=[best])[0]
_, attn = vit.encode_region(rows, region, ckpt.config, vit.as_param_tensors(ckpt.params))
amap = vit.extract_cls_attention(attn, region)
slide_dir = manifest.slide_path(manifest.get(sid))
paths = attnviz.export_panel(slides.open_slide(slide_dir), region, amap, out / "viz",
                             annotations=slides.load_annotations(slide_dir))
print(f"{sid}: predicted grade {preds[sid].predicted_label}, panel written to", *map(str, paths), sep="\n  ")
