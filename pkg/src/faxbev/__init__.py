"""Fused axial attention and a cooperative BEV segmentation pipeline on a small numpy autodiff core."""

__version__ = "0.1.0"
