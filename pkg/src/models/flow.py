"""
Flow state and per-step diagnostics
"""
from __future__ import annotations
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, Field

from .case import Integrator
from .field import CubeField, HALO_WIDTH

# Quantity ids of the solver fields; exchange tags embed them
QID_VELOCITY = 1
QID_PRESSURE = 2
QID_FORCE = 3
QID_PREDICTOR = 4
QID_RHS_PREV = 5
QID_POISSON_RHS = 6
QID_CN_RHS = 7
QID_MULTIGRID = 32


class FlowState(BaseModel):
    """
    Fields and parameters of one rank's share of the flow.

    Attributes:
        u: Velocity u^n (3 components)
        p: Pressure (warm start of the next Poisson solve)
        f: IB force density scratch
        ut: Predictor ũ, turned into u* by the forcing
        rhs_prev: Previous momentum right-hand side (AB2 history)
        rhs: Poisson right-hand side
        rho, mu, dt: Fluid density, dynamic viscosity, time step
        step: Completed steps; t = step·dt
        integrator: euler | ab2 | cn
        ab2_started: rhs_prev holds a valid history
    """
    u: CubeField
    p: CubeField
    f: CubeField
    ut: CubeField
    rhs_prev: CubeField
    rhs: CubeField
    rho: float = Field(gt=0)
    mu: float = Field(ge=0)
    dt: float = Field(gt=0)
    step: int = Field(default=0, ge=0)
    integrator: Integrator = "euler"
    ab2_started: bool = False

    class Config:
        arbitrary_types_allowed = True

    @property
    def t(self) -> float:
        return self.step * self.dt

    @property
    def nu(self) -> float:
        return self.mu / self.rho

    @classmethod
    def allocate(
        cls, gids: Sequence[int], n_cells: int, rho: float, mu: float, dt: float,
        integrator: Integrator = "euler", halo_width: int = HALO_WIDTH,
    ) -> "FlowState":
        def vec(name: str, qid: int, quantity: str = "scratch") -> CubeField:
            return CubeField.allocate(name, qid, gids, n_cells, 3, quantity, halo_width)

        return cls(
            u=vec("u", QID_VELOCITY, "velocity"),
            p=CubeField.allocate("p", QID_PRESSURE, gids, n_cells, 1, "pressure", halo_width),
            f=vec("f", QID_FORCE, "force"),
            ut=vec("ut", QID_PREDICTOR, "velocity"),
            rhs_prev=vec("rhs_prev", QID_RHS_PREV),
            rhs=CubeField.allocate("rhs", QID_POISSON_RHS, gids, n_cells, 1, "scratch", halo_width),
            rho=rho, mu=mu, dt=dt, integrator=integrator,
        )

    def fields(self) -> List[CubeField]:
        """Fields that move with their cubes on redistribution"""
        return [self.u, self.p, self.f, self.ut, self.rhs_prev, self.rhs]


class PoissonStats(BaseModel):
    cycles: int = 0
    residual: float = 0.0
    converged: bool = True
    factors: List[float] = Field(default_factory=list)


class StepDiagnostics(BaseModel):
    """What one time step reports (all values identical on every rank)"""
    step: int
    t: float
    poisson: PoissonStats = Field(default_factory=PoissonStats)
    cn_iterations: int = 0
    cfl: float = 0.0
    force: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    body_forces: Dict[int, Tuple[float, float, float]] = Field(default_factory=dict)
    migrated: int = 0
    exited: int = 0
    divergence: Optional[float] = None
