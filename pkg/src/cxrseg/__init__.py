"""Chest-radiograph segmentation, COVID-19 detection, and annotation tooling."""

__version__ = "0.1.0"
