"""Anomaly detection with receptive-field-limited diffusion negatives.

PatchDiff generators synthesise images that keep only local structure;
small fully-convolutional detectors learn to tell normal patches from those
contrastive patterns.
"""

__version__ = "0.1.0"
