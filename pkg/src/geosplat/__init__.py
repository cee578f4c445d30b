"""Mesh-guided Gaussian splatting with physically based inverse rendering."""

from .adapter import AdapterConstants, GaussianSet, adapt
from .geometry import Mesh, ScalarGrid, extract_isosurface
from .lighting import EnvironmentLight, IndirectLight, precompute_splitsum
from .scene_io import RunConfig, View

__version__ = "0.1.0"

__all__ = [
    "AdapterConstants", "GaussianSet", "adapt", "Mesh", "ScalarGrid", "extract_isosurface",
    "EnvironmentLight", "IndirectLight", "precompute_splitsum", "RunConfig", "View",
]
