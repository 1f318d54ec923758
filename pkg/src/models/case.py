"""
Case configuration models

A case file is one JSON document with nested sections; every section has defaults so a
minimal case only names what differs. CLI flags override the parallel and output sections.
"""
from __future__ import annotations
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from .particle import MotionSpec

Vec3 = Tuple[float, float, float]

BcKind = Literal["inflow", "outflow", "slip", "no_slip", "periodic"]
Integrator = Literal["euler", "ab2", "cn"]
CheckpointMode = Literal["lossless", "lossy"]

FACE_NAMES = ("x-", "x+", "y-", "y+", "z-", "z+")


class RefineBox(BaseModel):
    """Refine every cube overlapping [lower, upper) to at least ``level``"""
    lower: Vec3
    upper: Vec3
    level: int = Field(ge=0)

    @model_validator(mode="after")
    def _check_order(self) -> "RefineBox":
        if any(self.upper[a] <= self.lower[a] for a in range(3)):
            raise ValueError(f"refine box upper {self.upper} must exceed lower {self.lower}")
        return self


class SurfaceRefine(BaseModel):
    """Refine cubes within ``distance`` of any body triangle to ``level``"""
    distance: float = Field(gt=0)
    level: int = Field(ge=0)


class DomainConfig(BaseModel):
    lower: Vec3 = (0.0, 0.0, 0.0)
    upper: Vec3 = (1.0, 1.0, 1.0)
    root_edge: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _check_box(self) -> "DomainConfig":
        if any(self.upper[a] <= self.lower[a] for a in range(3)):
            raise ValueError(f"domain upper {self.upper} must exceed lower {self.lower}")
        return self


class MeshConfig(BaseModel):
    domain: DomainConfig = Field(default_factory=DomainConfig)
    n_cells_per_edge: int = 16
    max_level: Optional[int] = Field(default=None, ge=0)
    refine: List[RefineBox] = Field(default_factory=list)
    surface_refine: Optional[SurfaceRefine] = None

    @field_validator("n_cells_per_edge")
    @classmethod
    def _power_of_two(cls, n: int) -> int:
        # multigrid halves the per-cube grid down to 2 cells
        if n < 2 or n & (n - 1):
            raise ValueError(f"n_cells_per_edge must be a power of two >= 2, got {n}")
        return n


class FluidConfig(BaseModel):
    rho: float = Field(default=1.0, gt=0)
    mu: float = Field(default=0.01, ge=0)
    initial_velocity: Vec3 = (0.0, 0.0, 0.0)


class TimeConfig(BaseModel):
    dt: float = Field(default=0.01, gt=0)
    n_steps: int = Field(default=100, ge=0)
    integrator: Integrator = "euler"
    convection: bool = True


class BoundaryCondition(BaseModel):
    """Condition on one domain face; ``velocity`` is used by inflow only"""
    kind: BcKind = "slip"
    velocity: Vec3 = (0.0, 0.0, 0.0)


class BoundaryConfig(BaseModel):
    """One condition per domain face, named x-, x+, y-, y+, z-, z+ in the case file"""
    x_lo: BoundaryCondition = Field(default_factory=BoundaryCondition, alias="x-")
    x_hi: BoundaryCondition = Field(default_factory=BoundaryCondition, alias="x+")
    y_lo: BoundaryCondition = Field(default_factory=BoundaryCondition, alias="y-")
    y_hi: BoundaryCondition = Field(default_factory=BoundaryCondition, alias="y+")
    z_lo: BoundaryCondition = Field(default_factory=BoundaryCondition, alias="z-")
    z_hi: BoundaryCondition = Field(default_factory=BoundaryCondition, alias="z+")

    model_config = {"populate_by_name": True}

    @classmethod
    def uniform(cls, kind: BcKind) -> "BoundaryConfig":
        return cls(**{name: BoundaryCondition(kind=kind) for name in FACE_NAMES})

    def face(self, face: int) -> BoundaryCondition:
        return (self.x_lo, self.x_hi, self.y_lo, self.y_hi, self.z_lo, self.z_hi)[face]

    @property
    def periodic(self) -> Tuple[bool, bool, bool]:
        return tuple(self.face(2 * a).kind == "periodic" for a in range(3))  # type: ignore[return-value]

    @model_validator(mode="after")
    def _check_periodic_pairs(self) -> "BoundaryConfig":
        for a in range(3):
            lo, hi = self.face(2 * a).kind, self.face(2 * a + 1).kind
            if (lo == "periodic") != (hi == "periodic"):
                raise ValueError(f"periodic must be set on both {FACE_NAMES[2 * a]} and {FACE_NAMES[2 * a + 1]}")
        return self


class SphereSurface(BaseModel):
    center: Vec3 = (0.0, 0.0, 0.0)
    diameter: float = Field(default=1.0, gt=0)
    subdivisions: int = Field(default=4, ge=0, le=7)


class BodyConfig(BaseModel):
    """A rigid body read from STL or generated as an icosphere"""
    name: str = "body"
    stl: Optional[str] = None
    sphere: Optional[SphereSurface] = None
    motion: MotionSpec = Field(default_factory=MotionSpec)

    @model_validator(mode="after")
    def _one_source(self) -> "BodyConfig":
        if (self.stl is None) == (self.sphere is None):
            raise ValueError(f"body '{self.name}' needs exactly one of 'stl' or 'sphere'")
        if self.stl is not None and not Path(self.stl).exists():
            raise ValueError(f"body '{self.name}': STL file not found: {self.stl}")
        return self


class SolverConfig(BaseModel):
    poisson_tol: float = Field(default=1e-8, gt=0)
    max_vcycles: int = Field(default=50, gt=0)
    coarse_cg_iterations: int = Field(default=10, gt=0)
    smoothing_sweeps: int = Field(default=3, gt=0)
    jacobi_omega: float = Field(default=6.0 / 7.0, gt=0, le=1)
    cn_tol: float = Field(default=1e-10, gt=0)
    cn_max_iterations: int = Field(default=50, gt=0)
    ib_iterations: int = Field(default=1, ge=1)
    cfl_warn: float = Field(default=0.8, gt=0)


class BalanceConfig(BaseModel):
    """Dynamic load balancing: trigger threshold κ, particle cost γ, check cadence in steps"""
    enabled: bool = False
    kappa: float = Field(default=1.04, gt=1)
    gamma: float = Field(default=3.0, gt=0)
    cadence: int = Field(default=100, gt=0)


class ParallelConfig(BaseModel):
    ranks: int = Field(default=1, ge=1)
    threads: int = Field(default=1, ge=1)
    overlap: bool = True
    seed: int = 0
    max_delay: float = Field(default=0.0, ge=0)


class OutputConfig(BaseModel):
    force_every: int = Field(default=1, gt=0)
    checkpoint_every: int = Field(default=0, ge=0)
    checkpoint_mode: CheckpointMode = "lossless"
    checkpoint_tol: float = Field(default=1e-4, gt=0)
    parallel_write: bool = True


class CaseConfig(BaseModel):
    """
    Complete description of a run.

    Attributes:
        name: Case label used in logs
        mesh: Domain, cube resolution and refinement rules
        fluid: Density, viscosity and initial velocity
        time: Δt, step count, integrator
        boundaries: Per-face conditions
        bodies: Immersed rigid bodies
        solver: Poisson/CN tolerances and caps, IB iterations
        balance: κ, γ, cadence
        parallel: Ranks, threads, overlap, seed
        output: Force and checkpoint cadence, checkpoint compression
    """
    name: str = "case"
    mesh: MeshConfig = Field(default_factory=MeshConfig)
    fluid: FluidConfig = Field(default_factory=FluidConfig)
    time: TimeConfig = Field(default_factory=TimeConfig)
    boundaries: BoundaryConfig = Field(default_factory=BoundaryConfig)
    bodies: List[BodyConfig] = Field(default_factory=list)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    balance: BalanceConfig = Field(default_factory=BalanceConfig)
    parallel: ParallelConfig = Field(default_factory=ParallelConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @property
    def nu(self) -> float:
        return self.fluid.mu / self.fluid.rho
