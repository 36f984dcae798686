"""Tumor segmentation foundation model: pooled multi-dataset training of a
CNN/transformer U-shaped network, and transfer to downstream tasks."""

__version__ = "0.1.0"
