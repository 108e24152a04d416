"""Railcar scrap acceptance pipeline: attention-MIL contamination model,
unloading segmentation, double-blind annotation, and an exactly-once
inference service."""

__version__ = "0.1.0"
