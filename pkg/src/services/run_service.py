"""
Run Service - Case setup and the time loop on P in-process ranks

Outputs (under the run directory):
    forces.csv                 t, Fx, Fy, Fz and the components divided by the mean Fx
    balance.csv                one row per imbalance check
    checkpoints/step_{n}.ckpt  initial, periodic and final state
    log.txt                    written by the CLI's log sink
"""
from __future__ import annotations
import csv
import math
import time
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field

from ..errors import ConfigError
from ..infra.geometry import icosphere, read_stl
from ..infra.workers import RankContext, launch_ranks
from ..models.balance import BALANCE_CSV_COLUMNS, BalanceReport
from ..models.case import CaseConfig
from ..models.decomp import Distribution
from ..models.flow import StepDiagnostics
from ..models.mesh import BcmMesh
from ..models.particle import MotionSpec, RigidBody
from ..models.particle_set import ParticleSet
from ..repositories.checkpoint_repo import read_checkpoint, write_checkpoint
from .balance_service import LoadBalancer
from .decomp_service import linear_distribution
from .flow_solver import FlowSolver
from .lagrangian_service import assign_sets, discretize_surface, particles_to_arrays
from .mesh_service import clip_regions, generate_mesh, refine_near_surface

FORCE_CSV_COLUMNS = ("t", "Fx", "Fy", "Fz", "Fx_norm", "Fy_norm", "Fz_norm")

# Stop hook: called on every rank after each step; must return the same verdict everywhere
Monitor = Callable[[RankContext, FlowSolver, Dict[int, ParticleSet], StepDiagnostics], bool]
Particles = Dict[str, np.ndarray]


def checkpoint_path(run_dir: str | Path, step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step}.ckpt"


def load_bodies(case: CaseConfig) -> List[RigidBody]:
    """Rigid bodies of a case, body ids in case order"""
    bodies = []
    for i, spec in enumerate(case.bodies):
        if spec.sphere is not None:
            V, T = icosphere(spec.sphere.center, spec.sphere.diameter, spec.sphere.subdivisions)
        else:
            V, T = read_stl(spec.stl)
        bodies.append(RigidBody(body_id=i, name=spec.name, vertices=V, triangles=T, motion=spec.motion))
    return bodies


def build_mesh(case: CaseConfig, bodies: Sequence[RigidBody] = ()) -> BcmMesh:
    """
    Mesh of a case: its refine boxes plus boxes around every body triangle.

    Raises:
        MeshGenerationError: refinement input rejected
    """
    cfg = case.mesh
    regions = list(cfg.refine)
    if cfg.surface_refine is not None:
        for body in bodies:
            regions += refine_near_surface(body.vertices, body.triangles, cfg.surface_refine.distance, cfg.surface_refine.level)
    regions = clip_regions(regions, cfg.domain.lower, cfg.domain.upper)
    return generate_mesh(
        cfg.domain.lower, cfg.domain.upper, regions, cfg.n_cells_per_edge,
        max_level=cfg.max_level, root_edge=cfg.domain.root_edge, periodic=case.boundaries.periodic,
    )


def surface_particles(bodies: Sequence[RigidBody], mesh: BcmMesh) -> Particles:
    """All bodies' surface particles with globally unique ids"""
    particles = []
    for body in bodies:
        particles += discretize_surface(body, mesh, first_id=len(particles))
    return particles_to_arrays(particles)


class RunResult(BaseModel):
    """What a run reports (identical on every rank)"""
    steps: int = 0
    t: float = 0.0
    forces: List[Tuple[float, float, float, float]] = Field(default_factory=list)
    balance: List[BalanceReport] = Field(default_factory=list)
    checkpoints: List[str] = Field(default_factory=list)
    poisson_cycles: List[int] = Field(default_factory=list)
    capped_solves: int = 0
    kinetic_energy: float = 0.0
    divergence: float = 0.0
    wall_time: float = 0.0
    stopped_early: bool = False
    n_cubes: int = 0
    n_particles: int = 0

    @property
    def time_per_step(self) -> float:
        return self.wall_time / self.steps if self.steps else 0.0


class Simulation:
    """
    One run of a case on ``case.parallel.ranks`` in-process ranks.

    Key features:
    - Mesh, bodies and surface particles built once and shared read-only by the ranks
    - Overlapped or plain time stepping, per the case
    - Periodic imbalance checks and repartitioning
    - Initial, periodic and final checkpoints; restart from any checkpoint on any rank count

    Args:
        case: Validated case configuration
        run_dir: Output directory; None writes nothing
        restart: Checkpoint to resume from
        particles: Column arrays replacing the bodies' surface particles (synthetic suites)
        motions: Motion per body id for ``particles``
        monitor: Optional collective stop hook

    Example:
        >>> result = Simulation(case, run_dir="run").run()
        >>> result.steps
        100
    """

    def __init__(
        self,
        case: CaseConfig,
        run_dir: Optional[str | Path] = None,
        restart: Optional[str | Path] = None,
        particles: Optional[Particles] = None,
        motions: Optional[Mapping[int, MotionSpec]] = None,
        monitor: Optional[Monitor] = None,
    ):
        self.case = case
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.restart = Path(restart) if restart is not None else None
        self.monitor = monitor
        self.mesh: Optional[BcmMesh] = None
        self.particles = particles
        self.motions: Dict[int, MotionSpec] = dict(motions or {})
        if particles is None:
            self.bodies = load_bodies(case)
            self.motions.update({b.body_id: b.motion for b in self.bodies})
        else:
            self.bodies = []
            if len(particles["ids"]) and not self.motions:
                raise ConfigError("Explicit particles need a motion per body id")

    def prepare(self) -> BcmMesh:
        """Build the mesh and particles (skipped on restart, where the checkpoint holds both)"""
        if self.restart is None and self.mesh is None:
            self.mesh = build_mesh(self.case, self.bodies)
            if self.particles is None:
                self.particles = surface_particles(self.bodies, self.mesh)
        return self.mesh

    def plan(self) -> Dict[str, object]:
        """Execution plan for --dry-run: sizes and settings, no compute"""
        mesh = self.prepare() if self.restart is None else None
        case = self.case
        out: Dict[str, object] = {
            "case": case.name,
            "ranks": case.parallel.ranks,
            "threads": case.parallel.threads,
            "overlap": case.parallel.overlap,
            "balance": case.balance.enabled,
            "integrator": case.time.integrator,
            "dt": case.time.dt,
            "n_steps": case.time.n_steps,
            "bodies": [b.name for b in case.bodies],
        }
        if mesh is not None:
            dist = linear_distribution(mesh.n_cubes, case.parallel.ranks)
            out.update({
                "cubes": mesh.n_cubes,
                "levels": mesh.n_levels,
                "cells": mesh.n_cubes * mesh.n_cells_per_edge ** 3,
                "particles": int(len(self.particles["ids"])) if self.particles is not None else 0,
                "cubes_per_rank": dist.counts,
            })
        else:
            out["restart"] = str(self.restart)
        return out

    # -- rank program ----------------------------------------------------------------

    def _start(self, ctx: RankContext) -> Tuple[FlowSolver, Distribution, Dict[int, ParticleSet]]:
        case = self.case
        if self.restart is not None:
            state = read_checkpoint(ctx, self.restart)
            if state.header.n_cells_per_edge != case.mesh.n_cells_per_edge:
                ctx.log.warning(
                    "restart n_cells_per_edge={} overrides case value {}",
                    state.header.n_cells_per_edge, case.mesh.n_cells_per_edge,
                )
            self.mesh = state.mesh
            solver = FlowSolver(ctx, state.mesh, state.dist, case, self.motions)
            solver.initialize()
            for name in ("u", "p", "rhs_prev"):
                if name in state.fields:
                    getattr(solver.state, name).data[...] = state.fields[name].data
            solver.state.step = state.header.step
            solver.state.ab2_started = bool(state.header.extras.get("ab2_started", False))
            return solver, state.dist, state.sets

        mesh = self.mesh
        dist = linear_distribution(mesh.n_cubes, ctx.size)
        solver = FlowSolver(ctx, mesh, dist, case, self.motions)
        solver.initialize()
        sets = assign_sets(self.particles, mesh, dist.local_gids(ctx.rank))
        return solver, dist, sets

    def _checkpoint(self, ctx: RankContext, solver: FlowSolver, sets: Dict[int, ParticleSet]) -> Optional[str]:
        if self.run_dir is None:
            return None
        st = solver.state
        out = self.case.output
        path = checkpoint_path(self.run_dir, st.step)
        write_checkpoint(
            ctx, path, solver.mesh, [st.u, st.p, st.rhs_prev], sets, t=st.t, step=st.step,
            mode=out.checkpoint_mode, tol=out.checkpoint_tol,
            extras={"ab2_started": st.ab2_started, "integrator": st.integrator, "case": self.case.name},
            parallel=out.parallel_write,
        )
        return str(path)

    def _rank(self, ctx: RankContext) -> RunResult:
        case = self.case
        out = case.output
        solver, dist, sets = self._start(ctx)
        balancer = LoadBalancer(ctx, solver.mesh, case.balance, solver.h) if case.balance.enabled else None
        result = RunResult(n_cubes=solver.mesh.n_cubes)
        counts = ctx.comm.allgather(sum(len(s) for s in sets.values()))
        result.n_particles = int(sum(counts))

        if self.restart is None:
            path = self._checkpoint(ctx, solver, sets)
            if path:
                result.checkpoints.append(path)

        start = time.perf_counter()
        first = solver.state.step
        while solver.state.step < case.time.n_steps:
            diag = solver.step(sets)
            step = diag.step
            result.poisson_cycles.append(diag.poisson.cycles)
            if step % out.force_every == 0:
                result.forces.append((diag.t,) + tuple(diag.force))
            if balancer is not None and step % case.balance.cadence == 0:
                report, new = balancer.rebalance(dist, solver.state.fields(), sets, step)
                if new is not dist:
                    dist = new
                    solver.rebuild(dist)
                result.balance.append(report)
            stop = self.monitor(ctx, solver, sets, diag) if self.monitor is not None else False
            last = stop or step == case.time.n_steps
            if (out.checkpoint_every and step % out.checkpoint_every == 0) or last:
                path = self._checkpoint(ctx, solver, sets)
                if path and path not in result.checkpoints:
                    result.checkpoints.append(path)
            if stop:
                result.stopped_early = True
                break

        result.wall_time = time.perf_counter() - start
        result.steps = solver.state.step - first
        result.t = solver.state.t
        result.capped_solves = solver.capped_solves
        result.kinetic_energy = solver.kinetic_energy()
        result.divergence = solver.divergence_norm()
        return result

    # -- driver ------------------------------------------------------------------------

    def run(self) -> RunResult:
        """
        Execute the run and write forces.csv and balance.csv.

        Raises:
            NumericsError: non-finite state (SolverConvergenceError for a capped CN iteration)
            CheckpointError: restart file rejected
            OSError: output not writable
        """
        self.prepare()
        par = self.case.parallel
        logger.info(
            "run case={} ranks={} threads={} overlap={} balance={} steps={}",
            self.case.name, par.ranks, par.threads, par.overlap, self.case.balance.enabled, self.case.time.n_steps,
        )
        results = launch_ranks(par.ranks, self._rank, threads=par.threads, seed=par.seed, max_delay=par.max_delay)
        result = results[0]
        if self.run_dir is not None:
            write_forces_csv(self.run_dir / "forces.csv", result.forces)
            write_balance_csv(self.run_dir / "balance.csv", result.balance)
        logger.info(
            "run finished steps={} t={:.6g} wall={:.2f}s per_step={:.4f}s capped_solves={} divergence={:.3e}",
            result.steps, result.t, result.wall_time, result.time_per_step, result.capped_solves, result.divergence,
        )
        return result


def write_forces_csv(path: Path, rows: Sequence[Tuple[float, float, float, float]]) -> None:
    """Force history; the normalized columns divide by the mean Fx (0 when that mean is 0)"""
    path.parent.mkdir(parents=True, exist_ok=True)
    mean_fx = math.fsum(r[1] for r in rows) / len(rows) if rows else 0.0
    scale = 1.0 / mean_fx if mean_fx != 0.0 else 0.0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(FORCE_CSV_COLUMNS)
        for t, fx, fy, fz in rows:
            writer.writerow([repr(float(v)) for v in (t, fx, fy, fz, fx * scale, fy * scale, fz * scale)])


def write_balance_csv(path: Path, reports: Sequence[BalanceReport]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(BALANCE_CSV_COLUMNS)
        for r in reports:
            writer.writerow(r.csv_row())


def run_case(case: CaseConfig, run_dir: Optional[str | Path] = None, restart: Optional[str | Path] = None) -> RunResult:
    return Simulation(case, run_dir=run_dir, restart=restart).run()
