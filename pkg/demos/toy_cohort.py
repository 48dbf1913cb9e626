"""Small synthetic cohort taken through every stage with the library API.

Run: python3 demos/toy_cohort.py [out_dir]
Takes about 15 s on one core.
"""
import sys
from pathlib import Path

from histograde import embed, metrics, preprocess, slides, trainer, vit

out = Path(sys.argv[1] if len(sys.argv) > 1 else "toy_run")

# 1. 40 slides of 1024 px, four activity grades
manifest = slides.generate_dataset(slides.SynthConfig(n_slides=40, seed=2, slide_px=1024), out)
print(f"{len(manifest)} slides from {len({e.patient_id for e in manifest})} patients")

# 2. tissue mask, patch grid and 64-dim embeddings per slide
(out / "patches").mkdir(exist_ok=True)
(out / "embeddings").mkdir(exist_ok=True)
for e in manifest:
    s = slides.open_slide(manifest.slide_path(e))
    grid = preprocess.extract_patch_grid(s, preprocess.compute_tissue_mask(s))
    preprocess.save_patch_grid(grid, out / "patches" / f"{e.slide_id}.jsonl")
    embed.write_embeddings(embed.embed_slide(s, grid), out / "embeddings" / f"{e.slide_id}.hge")

# 3. patient-grouped cross-validation with a small transformer
model = vit.ModelConfig(input_dim=64, d_model=32, n_heads=2, n_layers=1, region_side=2)
cfg = trainer.desk_train_config(model=model, k_folds=3, max_epochs=10, patience=3, batch_size=4)
cv = trainer.run_cross_validation(manifest, trainer.DirectoryStore(out), cfg)

# 4. held-out metrics with bootstrap intervals
report = metrics.metric_report(cv.predictions, B=200)
for name, value in report["weighted"].items():
    lo, hi = report["ci95"][name]
    print(f"weighted {name:9s} {value:.3f}  [{lo:.3f}, {hi:.3f}]")
print(metrics.confusion_matrix(cv.predictions).counts)

# 5. keep checkpoints and fold membership for demos/neutrophils_and_attention.py
(out / "train").mkdir(exist_ok=True)
for k, ckpt in enumerate(cv.checkpoints):
    vit.save_checkpoint(ckpt, out / "train" / f"fold{k}.hgc")
trainer.write_predictions(cv.predictions, out / "train" / "predictions.jsonl")
