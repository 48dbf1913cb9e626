"""Whole-slide-image activity grading at desk scale.

Synthetic tiled slides, tissue masking and patch grids, patch embeddings, a
region-sampled ViT classifier with patient-grouped cross-validation, bootstrap
metrics, cell-count rank statistics and attention overlays.
"""

__version__ = "0.1.0"
