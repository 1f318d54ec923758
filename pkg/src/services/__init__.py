"""
Services layer

run_service and validation_service depend on the repositories package and are imported
from their modules directly.
"""
from .mesh_service import build_adjacency, from_leaves, generate_mesh, locate_cube, mesh_stats
from .decomp_service import explicit_distribution, linear_distribution, owner_of
from .halo_service import HaloExchanger
from .boundary_service import BoundaryFiller
from .multigrid import MultigridSolver
from .flow_solver import FlowSolver
from .balance_service import LoadBalancer
from .compression import compress_cube, decompress_cube

__all__ = [
    "build_adjacency", "from_leaves", "generate_mesh", "locate_cube", "mesh_stats",
    "explicit_distribution", "linear_distribution", "owner_of",
    "HaloExchanger",
    "BoundaryFiller",
    "MultigridSolver",
    "FlowSolver",
    "LoadBalancer",
    "compress_cube", "decompress_cube",
]
