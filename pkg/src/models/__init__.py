"""
Data models
"""
from .mesh import BcmMesh, Cube, N_FACES, face_axis, face_side
from .field import CubeField, HALO_WIDTH
from .particle import MotionSpec, Particle, RigidBody
from .particle_set import ParticleSet
from .decomp import Distribution, IndexMap
from .case import (
    BalanceConfig, BodyConfig, BoundaryCondition, BoundaryConfig, CaseConfig, DomainConfig,
    FluidConfig, MeshConfig, OutputConfig, ParallelConfig, RefineBox, SolverConfig,
    SphereSurface, SurfaceRefine, TimeConfig,
)
from .flow import FlowState, PoissonStats, StepDiagnostics
from .balance import BalanceReport
from .checkpoint import CheckpointHeader, CubeRecord, FieldDescriptor

__all__ = [
    "BcmMesh", "Cube", "N_FACES", "face_axis", "face_side",
    "CubeField", "HALO_WIDTH",
    "MotionSpec", "Particle", "RigidBody", "ParticleSet",
    "Distribution", "IndexMap",
    "BalanceConfig", "BodyConfig", "BoundaryCondition", "BoundaryConfig", "CaseConfig", "DomainConfig",
    "FluidConfig", "MeshConfig", "OutputConfig", "ParallelConfig", "RefineBox", "SolverConfig",
    "SphereSurface", "SurfaceRefine", "TimeConfig",
    "FlowState", "PoissonStats", "StepDiagnostics",
    "BalanceReport",
    "CheckpointHeader", "CubeRecord", "FieldDescriptor",
]
