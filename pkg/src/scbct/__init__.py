"""Sparse-view cone-beam CT reconstruction with neighbour-aware point transformers."""

from .dataio import Volume, load_volume, make_phantom, save_volume
from .geometry import ScannerGeometry, ViewAngleSet, sample_view_angles
from .projector import ProjectionSet, render_drr, simulate_projections

__version__ = "0.1.0"

__all__ = [
    "ProjectionSet",
    "ScannerGeometry",
    "ViewAngleSet",
    "Volume",
    "load_volume",
    "make_phantom",
    "render_drr",
    "sample_view_angles",
    "save_volume",
    "simulate_projections",
]
