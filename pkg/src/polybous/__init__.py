"""Finite element experiments for the Boussinesq system on convex polygons."""

__version__ = "0.1.0"

from .domain import Polygon, TriMesh, compute_apertures, mesh_polygon, preset  # noqa: E402
from .boussinesq import FlowState, SimParams, Trajectory, run  # noqa: E402

__all__ = [
    "Polygon",
    "TriMesh",
    "compute_apertures",
    "mesh_polygon",
    "preset",
    "FlowState",
    "SimParams",
    "Trajectory",
    "run",
]
