"""Unsupervised surface-defect localization for high-resolution board images.

Submodules (import them directly; the heavyweight ones pull in torch):

- ingest: image decoding and split manifests
- tiler: sliding-window tiling and map stitching
- graphseg: graph-based segmentation for texture harvesting
- balance: tile features, k-means, frequency-based rebalancing
- synth: augmentation and synthetic-defect overlay
- metrics: structural similarity
- loss: the composite training objective
- model: the skip-connection autoencoder
- trainer: the seeded optimization loop
- evaluator: residual heatmaps and pixel-pooled ROC
- config, pipeline, cli: run configuration and stage orchestration
"""

__version__ = "0.1.0"
