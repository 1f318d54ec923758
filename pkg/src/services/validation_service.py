"""
Validation Service - Sphere wake, load-balance sweep and compression bench

validate_sphere
    Re = 100 flow past a fixed sphere of diameter D at desk resolution (Δx = 0.05 D). The
    steady wake is measured by probing the velocity with the delta kernel:
        L_b       downstream extent of u_x < 0 on the wake axis, from the rear surface
        (x_c, y_c) vortex core in the z = 0 plane, y > 0: argmin |u_x| + |u_y|,
                  x_c measured from the sphere center
    and compared with the reference wake bubble (0.794, 0.729, 0.288) D.

balance_report
    Clustered-particle synthetic case run with and without balancing for γ ∈ {1, 2, 3, 4};
    one row per (γ, balancing) with the estimated imbalance and the wall time per step.

compress_bench
    Lossy compression ratio and worst error on a smooth field for cells-per-cube × tolerance.
"""
from __future__ import annotations
import csv
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, ValidationError

from ..errors import ConfigError
from ..infra.workers import RankContext
from ..models.case import (
    BalanceConfig, BodyConfig, BoundaryCondition, BoundaryConfig, CaseConfig, DomainConfig, FluidConfig,
    MeshConfig, OutputConfig, ParallelConfig, RefineBox, SphereSurface, SurfaceRefine, TimeConfig,
)
from ..models.field import HALO_WIDTH
from ..models.flow import StepDiagnostics
from ..models.particle import MotionSpec
from ..models.particle_set import ParticleSet
from .balance_service import build_graph, estimate_imbalance
from .compression import compress_cube, choose_q, compression_ratio, decompress_cube
from .decomp_service import linear_distribution
from .flow_solver import FlowSolver
from .interaction_service import interpolate_cube
from .lagrangian_service import clustered_particles
from .mesh_service import generate_mesh, locate_many
from .run_service import RunResult, Simulation

# Reference steady wake at Re = 100, in units of D
WAKE_TARGETS = {"L_b": 0.794, "x_c": 0.729, "y_c": 0.288}
WAKE_TOLERANCES = {"L_b": 0.12, "x_c": 0.10, "y_c": 0.10}

STEADY_TOL = 1e-3
STEADY_WINDOW = 100
CHECK_EVERY = 10
# u_x below −RECIRCULATION_EPS counts as reversed flow
RECIRCULATION_EPS = 1e-6

BALANCE_GAMMAS = (1.0, 2.0, 3.0, 4.0)
BENCH_CELLS = (4, 8, 16)
BENCH_TOLS = (1e-2, 1e-3, 1e-4, 1e-5)


def deep_update(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Nested dict merge; ``overrides`` may also use dotted keys ("time.n_steps")"""
    out = dict(base)
    for key, value in overrides.items():
        if "." in key:
            head, rest = key.split(".", 1)
            out[head] = deep_update(out.get(head) or {}, {rest: value})
        elif isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = deep_update(out[key], value)
        else:
            out[key] = value
    return out


def with_overrides(case: CaseConfig, overrides: Optional[Mapping[str, Any]]) -> CaseConfig:
    """
    Copy of ``case`` with overrides applied and revalidated.

    Raises:
        ConfigError: an override is rejected by the case models
    """
    if not overrides:
        return case
    data = deep_update(case.model_dump(by_alias=True), overrides)
    try:
        return CaseConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid case override {dict(overrides)}:\n{exc}") from exc


# -- sphere wake ---------------------------------------------------------------------------

def sphere_case(inflow: float = 1.0, diameter: float = 1.0, n_steps: int = 4000) -> CaseConfig:
    """
    Desk-scale sphere case: domain [−8D, 8D]³ tiled by 5³ root cubes, three refinement levels
    down to Δx = 0.05 D near the body and in the near wake, Re = U D / ν = 100.
    """
    D = diameter
    half = 8.0 * D
    inlet = BoundaryCondition(kind="inflow", velocity=(inflow, 0.0, 0.0))
    slip = BoundaryCondition(kind="slip")
    return CaseConfig(
        name="sphere_re100",
        mesh=MeshConfig(
            domain=DomainConfig(lower=(-half,) * 3, upper=(half,) * 3, root_edge=3.2 * D),
            n_cells_per_edge=8,
            max_level=3,
            refine=[
                RefineBox(lower=(-1.6 * D, -1.6 * D, -1.6 * D), upper=(4.8 * D, 1.6 * D, 1.6 * D), level=2),
                RefineBox(lower=(-0.8 * D, -0.8 * D, -0.8 * D), upper=(2.4 * D, 0.8 * D, 0.8 * D), level=3),
            ],
            surface_refine=SurfaceRefine(distance=0.2 * D, level=3),
        ),
        fluid=FluidConfig(rho=1.0, mu=abs(inflow) * D / 100.0 if inflow else 0.01, initial_velocity=(inflow, 0.0, 0.0)),
        time=TimeConfig(dt=0.02 * D, n_steps=n_steps, integrator="ab2"),
        boundaries=BoundaryConfig(**{"x-": inlet, "x+": BoundaryCondition(kind="outflow"),
                                     "y-": slip, "y+": slip, "z-": slip, "z+": slip}),
        bodies=[BodyConfig(name="sphere", sphere=SphereSurface(center=(0.0, 0.0, 0.0), diameter=D, subdivisions=4))],
        output=OutputConfig(force_every=10, checkpoint_every=0),
    )


def probe_velocity(ctx: RankContext, solver: FlowSolver, points: np.ndarray) -> np.ndarray:
    """
    Delta-kernel interpolation of the velocity at arbitrary points (collective).

    Returns:
        (k, 3) on every rank; NaN for points outside the mesh
    """
    st = solver.state
    solver.hx.exchange(st.u, "corner", solver.filler.velocity)
    where = locate_many(solver.mesh, points)
    mine: Dict[int, np.ndarray] = {}
    for g in sorted(set(int(w) for w in where) & set(st.u.gids)):
        sel = np.nonzero(where == g)[0]
        cube = solver.mesh.cubes[g]
        vals = interpolate_cube(st.u.cube(g), points[sel], cube.base_corner, cube.dx, st.u.n_cells, st.u.halo_width)
        for i, v in zip(sel, vals):
            mine[int(i)] = v
    out = np.full((points.shape[0], 3), np.nan)
    for part in ctx.comm.allgather(mine):
        for i, v in part.items():
            out[i] = v
    return out


class WakeMetrics(BaseModel):
    """Wake bubble in units of D; x_c, y_c are None without recirculation"""
    L_b: float = 0.0
    x_c: Optional[float] = None
    y_c: Optional[float] = None

    @property
    def recirculating(self) -> bool:
        return self.L_b > 0.0

    def distance(self, other: "WakeMetrics") -> float:
        pairs = [(self.L_b, other.L_b), (self.x_c, other.x_c), (self.y_c, other.y_c)]
        if any((a is None) != (b is None) for a, b in pairs):
            return math.inf
        return max((abs(a - b) for a, b in pairs if a is not None), default=0.0)


def recirculation_length(s: np.ndarray, ux: np.ndarray, eps: float = RECIRCULATION_EPS) -> float:
    """Distance from s[0] to the first sign change of ux from negative, linearly interpolated"""
    if ux.size == 0 or not ux[0] < -eps:
        return 0.0
    for i in range(1, ux.size):
        if not ux[i] < -eps:
            a, b = ux[i - 1], ux[i]
            frac = a / (a - b) if b != a else 0.0
            return float(s[i - 1] + frac * (s[i] - s[i - 1]) - s[0])
    return float(s[-1] - s[0])


def wake_metrics(ctx: RankContext, solver: FlowSolver, center: Sequence[float], diameter: float, dx: float) -> WakeMetrics:
    """Measure the wake bubble behind a sphere (collective)"""
    c = np.asarray(center, dtype=np.float64)
    R = 0.5 * diameter
    s = np.arange(0.0, 4.0 * diameter, 0.5 * dx)
    axis = np.stack([c[0] + R + s, np.full_like(s, c[1]), np.full_like(s, c[2])], axis=1)
    ux = probe_velocity(ctx, solver, axis)[:, 0]
    L_b = recirculation_length(s, np.nan_to_num(ux, nan=1.0))
    if L_b <= 0.0:
        return WakeMetrics(L_b=0.0)

    xs = c[0] + np.arange(0.0, R + L_b, 0.5 * dx)
    ys = c[1] + np.arange(0.5 * dx, R + 0.1 * diameter, 0.5 * dx)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    plane = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, c[2])], axis=1)
    outside = np.linalg.norm(plane - c, axis=1) > R
    U = probe_velocity(ctx, solver, plane)
    score = np.abs(U[:, 0]) + np.abs(U[:, 1])
    score[~outside | ~np.isfinite(score)] = np.inf
    k = int(np.argmin(score))
    if not np.isfinite(score[k]):
        return WakeMetrics(L_b=L_b / diameter)
    return WakeMetrics(
        L_b=L_b / diameter,
        x_c=float(plane[k, 0] - c[0]) / diameter,
        y_c=float(plane[k, 1] - c[1]) / diameter,
    )


class WakeMonitor:
    """
    Collective stop hook: measures the wake every ``every`` steps and stops once the metrics
    moved by less than ``tol`` over the last ``window`` steps.
    """

    def __init__(self, center: Sequence[float], diameter: float, dx: float,
                 every: int = CHECK_EVERY, window: int = STEADY_WINDOW, tol: float = STEADY_TOL,
                 min_steps: int = 0):
        self.center = tuple(center)
        self.diameter = diameter
        self.dx = dx
        self.every = every
        self.window = window
        self.tol = tol
        self.min_steps = min_steps
        self._by_rank: Dict[int, List[Tuple[int, WakeMetrics]]] = {}
        self.steady = False

    def __call__(self, ctx: RankContext, solver: FlowSolver, sets: Dict[int, ParticleSet], diag: StepDiagnostics) -> bool:
        if diag.step % self.every:
            return False
        m = wake_metrics(ctx, solver, self.center, self.diameter, self.dx)
        hist = self._by_rank.setdefault(ctx.rank, [])
        hist.append((diag.step, m))
        past = [h for h in hist if h[0] == diag.step - self.window]
        if diag.step < max(self.min_steps, self.window) or not past:
            return False
        if m.distance(past[0][1]) < self.tol:
            self.steady = True
            return True
        return False

    @property
    def history(self) -> List[Tuple[int, WakeMetrics]]:
        """Measurements as seen by rank 0 (every rank measures the same values)"""
        return self._by_rank.get(0, [])

    @property
    def latest(self) -> Optional[WakeMetrics]:
        return self.history[-1][1] if self.history else None


class SphereReport(BaseModel):
    metrics: WakeMetrics
    targets: Dict[str, float] = Field(default_factory=lambda: dict(WAKE_TARGETS))
    tolerances: Dict[str, float] = Field(default_factory=lambda: dict(WAKE_TOLERANCES))
    checks: Dict[str, bool] = Field(default_factory=dict)
    steady: bool = False
    steps: int = 0
    time_per_step: float = 0.0

    @property
    def passed(self) -> bool:
        return self.steady and bool(self.checks) and all(self.checks.values())

    def lines(self) -> List[str]:
        out = []
        for key in ("L_b", "x_c", "y_c"):
            got = getattr(self.metrics, key)
            shown = "none" if got is None else f"{got:.4f}"
            verdict = "PASS" if self.checks.get(key) else "FAIL"
            out.append(f"{key}/D measured={shown} target={self.targets[key]:.3f} ±{self.tolerances[key]:.2f} {verdict}")
        out.append(f"steady={self.steady} steps={self.steps} time_per_step={self.time_per_step:.4f}s")
        out.append("PASSED" if self.passed else "FAILED")
        return out


def validate_sphere(
    overrides: Optional[Mapping[str, Any]] = None,
    run_dir: Optional[str | Path] = None,
    inflow: float = 1.0,
) -> SphereReport:
    """
    Run the Re = 100 sphere to a steady wake and compare the bubble with the reference.

    Args:
        overrides: Case keys to change (nested or dotted), e.g. {"parallel.ranks": 4}
        run_dir: Output directory of the underlying run
        inflow: Free-stream speed; 0 gives the no-recirculation control

    Returns:
        SphereReport; a run that never reaches a steady wake is reported as failed
    """
    case = with_overrides(sphere_case(inflow=inflow), overrides)
    body = case.bodies[0].sphere
    dx = case.mesh.domain.root_edge / (1 << case.mesh.max_level) / case.mesh.n_cells_per_edge
    monitor = WakeMonitor(body.center, body.diameter, dx)
    result = Simulation(case, run_dir=run_dir, monitor=monitor).run()
    metrics = monitor.latest or WakeMetrics()
    report = SphereReport(metrics=metrics, steady=monitor.steady, steps=result.steps, time_per_step=result.time_per_step)
    for key, target in WAKE_TARGETS.items():
        got = getattr(metrics, key)
        report.checks[key] = got is not None and abs(got - target) <= WAKE_TOLERANCES[key]
    logger.info(
        "sphere L_b={:.4f} x_c={} y_c={} steady={} passed={}",
        metrics.L_b, metrics.x_c, metrics.y_c, report.steady, report.passed,
    )
    return report


# -- load balance sweep --------------------------------------------------------------------

class BalanceRow(BaseModel):
    gamma: float
    balancing: bool
    ratio_pre: float
    ratio_post: float
    rebalances: int = 0
    time_per_step: float = 0.0

    def csv_row(self) -> List[str]:
        return [f"{self.gamma:g}", str(int(self.balancing)), f"{self.ratio_pre:.6f}",
                f"{self.ratio_post:.6f}", str(self.rebalances), f"{self.time_per_step:.6f}"]


BALANCE_REPORT_COLUMNS = ("gamma", "balancing", "ratio_pre", "ratio_post", "rebalances", "time_per_step")


def synthetic_case(ranks: int = 4, cubes_per_axis: int = 8, n_cells: int = 4, n_steps: int = 10,
                   cadence: int = 5, gamma: float = 3.0, balancing: bool = True, threads: int = 1) -> CaseConfig:
    """Periodic box of equal cubes, no inflow, for the clustered-particle balancer suite"""
    L = float(cubes_per_axis)
    return CaseConfig(
        name="synthetic_cluster",
        mesh=MeshConfig(domain=DomainConfig(lower=(0.0,) * 3, upper=(L,) * 3, root_edge=1.0), n_cells_per_edge=n_cells),
        fluid=FluidConfig(rho=1.0, mu=0.01),
        time=TimeConfig(dt=0.01, n_steps=n_steps),
        boundaries=BoundaryConfig.uniform("periodic"),
        balance=BalanceConfig(enabled=balancing, kappa=1.04, gamma=gamma, cadence=cadence),
        parallel=ParallelConfig(ranks=ranks, threads=threads),
    )


def cluster_particles(case: CaseConfig, cluster: int = 3, per_cube: int = 50, seed: int = 0) -> Dict[str, np.ndarray]:
    """``per_cube`` particles in each cube of the cluster³ block at the domain's low corner"""
    dom = case.mesh.domain
    mesh = generate_mesh(dom.lower, dom.upper, (), case.mesh.n_cells_per_edge, root_edge=dom.root_edge,
                         periodic=case.boundaries.periodic)
    edge = dom.root_edge
    lo = np.asarray(dom.lower)
    targets = [
        c.global_id for c in mesh.cubes
        if np.all((np.asarray(c.base_corner) - lo) < cluster * edge - 1e-12)
    ]
    return clustered_particles(mesh, targets, per_cube, seed=seed)


def balance_report(
    gammas: Sequence[float] = BALANCE_GAMMAS,
    ranks: int = 4,
    n_steps: int = 10,
    cadence: int = 5,
    per_cube: int = 50,
    seed: int = 0,
    threads: int = 1,
) -> List[BalanceRow]:
    """
    γ sweep of the clustered-particle case, balancing off and on.

    Without balancing the imbalance is estimated on the linear distribution; with balancing
    the first check's pre/post ratios are reported.
    """
    rows: List[BalanceRow] = []
    for gamma in gammas:
        for balancing in (False, True):
            case = synthetic_case(ranks, n_steps=n_steps, cadence=cadence, gamma=gamma, balancing=balancing, threads=threads)
            particles = cluster_particles(case, per_cube=per_cube, seed=seed)
            sim = Simulation(case, particles=particles, motions={0: MotionSpec()})
            result: RunResult = sim.run()
            if balancing and result.balance:
                first = result.balance[0]
                row = BalanceRow(gamma=gamma, balancing=True, ratio_pre=first.ratio_pre, ratio_post=first.ratio_post,
                                 rebalances=sum(r.rebalanced for r in result.balance))
            else:
                counts = np.bincount(
                    locate_many(sim.mesh, particles["X"]),
                    minlength=sim.mesh.n_cubes,
                )
                graph = build_graph(sim.mesh, {g: int(c) for g, c in enumerate(counts)}, gamma, HALO_WIDTH)
                dist = linear_distribution(sim.mesh.n_cubes, ranks)
                _, ratio = estimate_imbalance(graph, dist.owner_list(), ranks)
                row = BalanceRow(gamma=gamma, balancing=balancing, ratio_pre=ratio, ratio_post=ratio)
            row.time_per_step = result.time_per_step
            rows.append(row)
            logger.info("balance_report gamma={} balancing={} ratio_pre={:.4f} ratio_post={:.4f}",
                        gamma, balancing, row.ratio_pre, row.ratio_post)
    return rows


def write_rows(path: str | Path, columns: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


# -- compression bench ---------------------------------------------------------------------

class BenchRow(BaseModel):
    n_cells: int
    tol: float
    ratio: float
    max_rel_error: float

    @property
    def within_tol(self) -> bool:
        return self.max_rel_error <= self.tol

    def csv_row(self) -> List[str]:
        return [str(self.n_cells), f"{self.tol:g}", f"{self.ratio:.3f}", f"{self.max_rel_error:.3e}", str(int(self.within_tol))]


BENCH_COLUMNS = ("n_cells", "tol", "ratio", "max_rel_error", "within_tol")


def smooth_cube(n_cells: int, halo_width: int = HALO_WIDTH, components: int = 3) -> np.ndarray:
    """Smooth velocity-like sample of one cube of edge 1, halo included"""
    m = n_cells + 2 * halo_width
    r = (np.arange(m) - halo_width + 0.5) / n_cells
    x, y, z = np.meshgrid(r, r, r, indexing="ij")
    comps = [
        1.0 + 0.5 * np.sin(np.pi * x) * np.cos(np.pi * y) + 0.2 * z,
        0.3 * np.cos(np.pi * x) * np.sin(np.pi * z) - 0.1 * y,
        0.2 * np.sin(np.pi * (x + y)) + 0.05 * x * y * z,
    ]
    return np.stack(comps[:components])


def compress_bench(cells: Sequence[int] = BENCH_CELLS, tols: Sequence[float] = BENCH_TOLS) -> List[BenchRow]:
    """Ratio and worst relative error of the lossy mode on smooth cubes"""
    rows = []
    for n in cells:
        values = smooth_cube(n)
        value_range = float(values.max() - values.min())
        for tol in tols:
            stream = compress_cube(values, choose_q(tol, value_range))
            err = float(np.abs(decompress_cube(stream) - values).max())
            rows.append(BenchRow(n_cells=n, tol=tol, ratio=compression_ratio(values, stream),
                                 max_rel_error=err / value_range))
    return rows
