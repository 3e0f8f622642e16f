"""Surround-view compact Gaussian engine on a radius-adaptive spherical grid.

Pipeline stages: multi-view metric point maps -> spherical voxel anchors ->
fixed-count Gaussian decode -> CPU splatting, with streaming fusion of long
sequences into a shared static set plus per-frame dynamic deltas.
"""

__version__ = "0.1.0"

from .geometry import CameraModel, GridSpec, Sim3Transform  # noqa: F401
