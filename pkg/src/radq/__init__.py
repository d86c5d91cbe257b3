"""Radiomic sequencer discovery on synthetic multi-parametric prostate MRI."""

__version__ = "0.1.0"
