"""
microfe package entry.

Quadtree coarsening of pixel microstructure meshes, plane-strain micro solves under three coupling
conditions, stress recovery and energy-norm error estimation.
"""

__all__ = [
    "phase_grid",
    "synthetic",
    "mesh",
    "material",
    "fe",
    "recovery",
    "estimator",
    "homogenize",
    "exporter",
    "PhaseGrid",
    "QuadMesh",
]

__version__ = "0.1.0"

from .mesh import QuadMesh  # noqa: E402
from .phase_grid import PhaseGrid  # noqa: E402
