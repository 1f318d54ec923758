"""
Tests for the fractional-step flow solver

Covers the projection, rank-count and overlap independence, the integrators,
the immersed-boundary force and failure reporting.
"""
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import math

import numpy as np
import pytest

from src.errors import NumericsError, SolverConvergenceError
from src.infra.workers import launch_ranks
from src.models.case import (
    BodyConfig, BoundaryConfig, CaseConfig, DomainConfig, FluidConfig, MeshConfig, ParallelConfig,
    RefineBox, SolverConfig, SphereSurface, TimeConfig,
)
from src.services.decomp_service import linear_distribution
from src.services.flow_solver import FlowSolver, gather_interiors
from src.services.mesh_service import cell_centers
from src.services.operators import convection, quick_face
from src.services.run_service import Simulation, build_mesh

TWO_PI = 2.0 * math.pi


def _box_case(
    integrator="euler", mu=0.01, dt=0.01, ranks=1, threads=1, overlap=True, solver=None, seed=None, convection=True,
):
    return CaseConfig(
        name="box",
        mesh=MeshConfig(domain=DomainConfig(lower=(0, 0, 0), upper=(1, 1, 1), root_edge=0.5), n_cells_per_edge=8),
        fluid=FluidConfig(rho=1.0, mu=mu),
        time=TimeConfig(dt=dt, n_steps=3, integrator=integrator, convection=convection),
        boundaries=BoundaryConfig.uniform("periodic"),
        solver=solver or SolverConfig(poisson_tol=1e-10, max_vcycles=100, coarse_cg_iterations=64),
        parallel=ParallelConfig(
            ranks=ranks, threads=threads, overlap=overlap, seed=ranks if seed is None else seed, max_delay=0.0005,
        ),
    )


def _seed_velocity(solver):
    s = slice(solver.h, solver.h + solver.n)
    for r, g in enumerate(solver.gids):
        x, y, z = cell_centers(solver.mesh.cubes[g], solver.n, 0)
        u = solver.state.u.data[r]
        u[0, s, s, s] = np.sin(TWO_PI * x) + 0.3 * np.cos(TWO_PI * z)
        u[1, s, s, s] = np.cos(TWO_PI * x) * np.sin(TWO_PI * y)
        u[2, s, s, s] = 0.2 * np.sin(TWO_PI * z)


def _taylor_green(solver, modes=(1,)):
    """Sum of divergence-free Taylor-Green cells with wavenumbers 2π·m, amplitude 1/m"""
    s = slice(solver.h, solver.h + solver.n)
    for r, g in enumerate(solver.gids):
        x, y, z = cell_centers(solver.mesh.cubes[g], solver.n, 0)
        u = solver.state.u.data[r]
        for m in modes:
            k = TWO_PI * m
            u[0, s, s, s] += np.sin(k * x) * np.cos(k * y) * np.cos(k * z) / m
            u[1, s, s, s] -= np.cos(k * x) * np.sin(k * y) * np.cos(k * z) / m


def _run_box(case, steps=3, poison=False, init=_seed_velocity):
    """Returns (div0, div1, diagnostics, u interiors, capped solves, p interiors, kinetic energies)"""
    mesh = build_mesh(case)

    def program(ctx):
        dist = linear_distribution(mesh.n_cubes, ctx.size)
        solver = FlowSolver(ctx, mesh, dist, case, {})
        solver.initialize()
        if init is not None:
            init(solver)
        if poison and ctx.rank == 0:
            solver.state.u.data[0, 0, solver.h, solver.h, solver.h] = float("nan")
        div0 = solver.divergence_norm(with_pressure=False)
        energies = [solver.kinetic_energy()]
        diags = []
        for _ in range(steps):
            diags.append(solver.step())
            energies.append(solver.kinetic_energy())
        div1 = solver.divergence_norm()
        return (
            div0, div1, diags, gather_interiors(ctx, solver.state.u), solver.capped_solves,
            gather_interiors(ctx, solver.state.p), energies,
        )

    p = case.parallel
    return launch_ranks(p.ranks, program, threads=p.threads, seed=p.seed, max_delay=p.max_delay)[0]


def test_quick_convection():
    """Test QUICK face values and the convection term on constant and linear fields"""
    assert quick_face(np.array(1.0), np.array(1.0), np.array(1.0)) == 1.0
    assert quick_face(np.array(-1.0), np.array(0.0), np.array(1.0)) == pytest.approx(0.5)

    n, h = 4, 2
    dx = np.array([0.5])
    u = np.full((1, 3, n + 2 * h, n + 2 * h, n + 2 * h), 0.7)
    assert not convection(u, dx, n, h).any()

    # u_y grows by one per cell along x, slope 2 at dx = 0.5
    ramp = np.arange(n + 2 * h, dtype=np.float64).reshape(-1, 1, 1)
    for ux, expected in ((1.0, 2.0), (-1.0, -2.0)):
        u = np.zeros((1, 3, n + 2 * h, n + 2 * h, n + 2 * h))
        u[0, 0] = ux
        u[0, 1] = ramp
        out = convection(u, dx, n, h)
        assert np.allclose(out[0, 1], expected)
        assert np.allclose(out[0, 0], 0.0) and np.allclose(out[0, 2], 0.0)

    print("✓ QUICK convection tests passed")


def test_projection_removes_divergence():
    """Test ‖div u‖∞ after a full step against 10 × the Poisson tolerance, scaled by the initial divergence"""
    case = _box_case()
    div0, div1, diags, _, capped, _, _ = _run_box(case, steps=1)

    assert capped == 0
    assert diags[0].poisson.converged
    assert diags[0].poisson.residual <= case.solver.poisson_tol
    assert div0 > 1.0
    bound = 10.0 * case.solver.poisson_tol * div0
    assert div1 <= bound, f"divergence {div1:.3e} after projection (bound {bound:.3e})"

    print("✓ Projection tests passed")


@pytest.mark.parametrize("integrator", ["euler", "ab2", "cn"])
def test_rank_count_independence(integrator):
    """Test bit-identical velocity on 1 and 4 ranks, overlapped, with two workers"""
    mu = 0.09765625 if integrator == "cn" else 0.01
    ref = _run_box(_box_case(integrator, mu=mu, ranks=1))
    other = _run_box(_box_case(integrator, mu=mu, ranks=4, threads=2))

    assert [d.poisson.cycles for d in ref[2]] == [d.poisson.cycles for d in other[2]]
    for g in ref[3]:
        assert np.array_equal(ref[3][g], other[3][g]), f"cube {g} differs ({integrator})"

    print(f"✓ Rank count independence tests passed ({integrator})")


@pytest.mark.parametrize("ranks", [1, 4])
def test_overlap_matches_plain(ranks):
    """Test bit-identical u and p over 20 steps with overlap on, for 10 delivery seeds, against the plain path"""
    solver = SolverConfig(poisson_tol=1e-8, max_vcycles=50)
    threads = 2 if ranks > 1 else 1
    plain = _run_box(_box_case("ab2", ranks=ranks, threads=threads, overlap=False, solver=solver, seed=0), steps=20)
    for seed in range(10):
        overlapped = _run_box(
            _box_case("ab2", ranks=ranks, threads=threads, overlap=True, solver=solver, seed=seed), steps=20,
        )
        for g in plain[3]:
            assert np.array_equal(overlapped[3][g], plain[3][g]), f"u of cube {g} differs (P={ranks}, seed {seed})"
            assert np.array_equal(overlapped[5][g], plain[5][g]), f"p of cube {g} differs (P={ranks}, seed {seed})"

    print(f"✓ Overlap equivalence tests passed (P={ranks})")


def test_crank_nicolson_converges():
    """Test that the CN iteration converges for Δtν/Δx² = 0.25"""
    diags = _run_box(_box_case("cn", mu=0.09765625), steps=1)[2]
    assert 1 <= diags[0].cn_iterations <= 50

    print("✓ Crank-Nicolson convergence tests passed")


def test_crank_nicolson_cap_raises():
    """Test that hitting the CN iteration cap raises SolverConvergenceError"""
    solver = SolverConfig(poisson_tol=1e-8, cn_tol=1e-14, cn_max_iterations=1)
    with pytest.raises(SolverConvergenceError):
        _run_box(_box_case("cn", mu=0.1, solver=solver), steps=1)

    print("✓ Crank-Nicolson cap tests passed")


def test_non_finite_state_raises():
    """Test that a NaN velocity aborts the step with NumericsError"""
    solver = SolverConfig(max_vcycles=2)
    with pytest.raises(NumericsError):
        _run_box(_box_case(solver=solver, ranks=2), steps=1, poison=True)

    print("✓ Non-finite state tests passed")


@pytest.mark.parametrize("integrator", ["euler", "ab2", "cn"])
def test_zero_velocity_stays_zero(integrator):
    """Test that a zero field with no inflow and no body stays exactly zero"""
    mu = 0.09765625 if integrator == "cn" else 0.01
    result = _run_box(_box_case(integrator, mu=mu, ranks=2), steps=5, init=None)

    assert result[1] == 0.0
    for g in result[3]:
        assert not result[3][g].any()
        assert not result[5][g].any()
    assert result[6] == [0.0] * 6

    print(f"✓ Zero fixed point tests passed ({integrator})")


def test_taylor_green_diffusive_decay():
    """Test pure-diffusion decay of a Taylor-Green cell against exp(−2ν|k|²t) within 5%"""
    mu, dt, steps = 0.01, 0.01, 40
    solver = SolverConfig(poisson_tol=1e-8, max_vcycles=50)
    energies = _run_box(_box_case(mu=mu, dt=dt, solver=solver, convection=False), steps=steps, init=_taylor_green)[6]

    assert all(b < a for a, b in zip(energies, energies[1:]))
    k2 = 3.0 * TWO_PI ** 2
    expected = math.exp(-2.0 * mu * k2 * dt * steps)
    assert energies[-1] / energies[0] == pytest.approx(expected, rel=0.05)

    print("✓ Taylor-Green decay tests passed")


@pytest.mark.parametrize("mu", [0.09765625, 0.48828125])
def test_crank_nicolson_diffusion_energy(mu):
    """Test non-increasing energy under CN pure diffusion at Δtν/Δx² = 0.25 and 1.25"""
    solver = SolverConfig(poisson_tol=1e-8, max_vcycles=50, cn_max_iterations=300)
    energies = _run_box(
        _box_case("cn", mu=mu, solver=solver, convection=False), steps=5,
        init=lambda s: _taylor_green(s, modes=(1, 2)),
    )[6]

    assert energies[0] > 0.0
    assert all(b <= a for a, b in zip(energies, energies[1:]))
    assert energies[-1] < energies[0]

    print(f"✓ Crank-Nicolson energy tests passed (mu={mu})")


def test_inviscid_energy_drift_is_bounded():
    """Test that with μ = 0 the kinetic energy drifts by at most 0.1% per step and 1% over 20 steps"""
    solver = SolverConfig(poisson_tol=1e-8, max_vcycles=50)
    energies = _run_box(_box_case("ab2", mu=0.0, dt=0.0025, solver=solver), steps=20, init=_taylor_green)[6]

    e0 = energies[0]
    assert max(abs(b - a) for a, b in zip(energies, energies[1:])) <= 1e-3 * e0
    assert abs(energies[-1] - e0) <= 1e-2 * e0

    print("✓ Inviscid energy drift tests passed")



def _sphere_case(ranks):
    return CaseConfig(
        name="ib",
        mesh=MeshConfig(
            domain=DomainConfig(lower=(-2, -2, -2), upper=(2, 2, 2), root_edge=1.0),
            n_cells_per_edge=4,
            refine=[RefineBox(lower=(-0.5, -0.5, -0.5), upper=(0.5, 0.5, 0.5), level=1)],
        ),
        fluid=FluidConfig(rho=1.0, mu=0.01, initial_velocity=(1.0, 0.0, 0.0)),
        time=TimeConfig(dt=0.02, n_steps=2, integrator="ab2"),
        boundaries=BoundaryConfig.uniform("periodic"),
        bodies=[BodyConfig(name="sphere", sphere=SphereSurface(diameter=0.8, subdivisions=2))],
        solver=SolverConfig(poisson_tol=1e-6, max_vcycles=30),
        parallel=ParallelConfig(ranks=ranks, threads=1, seed=ranks, max_delay=0.0005),
    )


def test_ib_force_on_mixed_level_mesh():
    """Test the body force direction and its bit-identity across rank counts"""
    one = Simulation(_sphere_case(1)).run()
    three = Simulation(_sphere_case(3)).run()

    assert one.n_particles > 0
    assert one.n_cubes == 120
    assert one.forces == three.forces
    t, fx, fy, fz = one.forces[0]
    assert fx > 0.0
    assert abs(fy) < 0.1 * fx and abs(fz) < 0.1 * fx

    print("✓ Immersed boundary force tests passed")


def run_all_tests():
    """Run all flow solver tests"""
    print("\n=== Testing Flow Solver ===\n")

    test_quick_convection()
    test_projection_removes_divergence()
    for integrator in ("euler", "ab2", "cn"):
        test_rank_count_independence(integrator)
    for ranks in (1, 4):
        test_overlap_matches_plain(ranks)
    test_crank_nicolson_converges()
    test_crank_nicolson_cap_raises()
    test_non_finite_state_raises()
    for integrator in ("euler", "ab2", "cn"):
        test_zero_velocity_stays_zero(integrator)
    test_taylor_green_diffusive_decay()
    for mu in (0.09765625, 0.48828125):
        test_crank_nicolson_diffusion_energy(mu)
    test_inviscid_energy_drift_is_bounded()
    test_ib_force_on_mixed_level_mesh()

    print("\n✅ All flow solver tests passed!\n")


if __name__ == "__main__":
    run_all_tests()
