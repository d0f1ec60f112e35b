"""Detect inaccurate organ segmentations by denoising-autoencoder reconstruction.

Modules:
    voxelgrid: binary masks, multi-channel volumes, resampling and the OMV format.
    corrupt: random patch noise and the signed Dice coefficient.
    metrics: Dice, AUROC/AUPR and bootstrap intervals.
    geomstats: the shape-feature Gaussian baseline.
    neural, nets: network primitives and the U-Net / VAE builders.
    phantom: synthetic anatomies and controlled degradations.
    pipeline: training, scoring, labeling, explanation and evaluation.
    cli: the ``organqa`` command.
"""

__version__ = "0.1.0"
