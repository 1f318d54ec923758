"""
Tests for the validation suites, case overrides and VTK export

The full sphere wake run and the γ sweep are marked slow (run with ``pytest -m slow``).
"""
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import csv
import math
import tempfile

import meshio
import numpy as np
import pytest

from src.errors import ConfigError
from src.infra.vtk_export import export_vtk
from src.infra.workers import launch_ranks
from src.models.case import CaseConfig, DomainConfig, MeshConfig
from src.models.field import CubeField
from src.services.decomp_service import linear_distribution
from src.services.flow_solver import FlowSolver
from src.services.mesh_service import cell_centers, generate_mesh
from src.services.run_service import build_mesh
from src.services.validation_service import (
    BENCH_COLUMNS, SphereReport, WakeMetrics, balance_report, compress_bench, deep_update, recirculation_length,
    sphere_case, validate_sphere, wake_metrics, with_overrides, write_rows,
)


def test_recirculation_length():
    """Test the interpolated zero crossing of u_x along the wake axis"""
    s = np.array([0.0, 1.0, 2.0, 3.0])
    assert recirculation_length(s, np.array([-1.0, -0.5, 0.5, 1.0])) == 1.5
    assert recirculation_length(s, np.array([0.5, -1.0, -1.0, 1.0])) == 0.0
    assert recirculation_length(s, np.array([-1.0, -1.0, -1.0, -1.0])) == 3.0
    assert recirculation_length(s[:0], s[:0]) == 0.0

    print("✓ Recirculation length tests passed")


def test_wake_metrics_distance():
    """Test the comparison of two wake measurements"""
    a = WakeMetrics(L_b=0.8, x_c=0.7, y_c=0.3)
    b = WakeMetrics(L_b=0.79, x_c=0.72, y_c=0.3)
    assert a.distance(b) == pytest.approx(0.02)
    assert a.distance(WakeMetrics()) == math.inf
    assert WakeMetrics().distance(WakeMetrics()) == 0.0
    assert not WakeMetrics().recirculating

    report = SphereReport(metrics=a, steady=True, checks={"L_b": True, "x_c": True, "y_c": True})
    assert report.passed
    assert report.lines()[-1] == "PASSED"
    assert not SphereReport(metrics=a, steady=False, checks={"L_b": True}).passed

    print("✓ Wake metric tests passed")


def test_overrides():
    """Test nested and dotted overrides and their validation"""
    merged = deep_update({"a": {"b": 1, "c": 2}, "d": 3}, {"a.b": 10, "a": {"c": 20}, "e": 5})
    assert merged == {"a": {"b": 10, "c": 20}, "d": 3, "e": 5}

    case = sphere_case()
    changed = with_overrides(case, {"parallel.ranks": 3, "time": {"n_steps": 7}})
    assert changed.parallel.ranks == 3 and changed.time.n_steps == 7
    assert changed.boundaries.x_lo.kind == "inflow"
    assert changed.boundaries.x_hi.kind == "outflow"
    assert with_overrides(case, None) is case
    with pytest.raises(ConfigError):
        with_overrides(case, {"time.dt": -1.0})

    print("✓ Override tests passed")


def test_sphere_case_settings():
    """Test Re = 100 and the finest spacing of the sphere case"""
    case = sphere_case(inflow=2.0, diameter=0.5)
    assert 2.0 * 0.5 / case.nu == pytest.approx(100.0)
    dx = case.mesh.domain.root_edge / (1 << case.mesh.max_level) / case.mesh.n_cells_per_edge
    assert dx == pytest.approx(0.05 * 0.5)
    control = sphere_case(inflow=0.0)
    assert control.fluid.initial_velocity == (0.0, 0.0, 0.0)
    assert control.fluid.mu > 0

    print("✓ Sphere case tests passed")


def test_wake_metrics_on_linear_field():
    """Test the wake probes on u = (x − 0.9, y, 0) around a sphere of diameter 0.5 at the origin"""
    case = CaseConfig(
        mesh=MeshConfig(domain=DomainConfig(lower=(-2, -2, -2), upper=(2, 2, 2), root_edge=1.0), n_cells_per_edge=8),
    )
    mesh = build_mesh(case)

    def program(ctx):
        solver = FlowSolver(ctx, mesh, linear_distribution(mesh.n_cubes, ctx.size), case, {})
        solver.initialize()
        s = slice(solver.h, solver.h + solver.n)
        for r, g in enumerate(solver.gids):
            C = cell_centers(mesh.cubes[g], solver.n, 0)
            solver.state.u.data[r, 0, s, s, s] = C[0] - 0.9
            solver.state.u.data[r, 1, s, s, s] = C[1]
        return wake_metrics(ctx, solver, (0.0, 0.0, 0.0), 0.5, 0.125)

    for ranks in (1, 3):
        m = launch_ranks(ranks, program, seed=ranks, max_delay=0.0005)[0]
        assert m.L_b == pytest.approx(1.3, abs=1e-9)
        assert m.x_c == pytest.approx(1.75, abs=1e-9)
        assert m.y_c == pytest.approx(0.125, abs=1e-9)

    print("✓ Wake probe tests passed")


def test_compress_bench_rows():
    """Test the bench table: every tolerance met, ratio growing with the cube size"""
    rows = compress_bench([4, 16], [1e-2, 1e-4])
    assert [(r.n_cells, r.tol) for r in rows] == [(4, 1e-2), (4, 1e-4), (16, 1e-2), (16, 1e-4)]
    assert all(r.within_tol for r in rows)
    assert rows[2].ratio > rows[0].ratio
    assert rows[3].ratio >= 2.0

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "sub" / "bench.csv"
        write_rows(path, BENCH_COLUMNS, [r.csv_row() for r in rows])
        with open(path, newline="") as fh:
            table = list(csv.reader(fh))
    assert table[0] == list(BENCH_COLUMNS)
    assert table[1][:2] == ["4", "0.01"]

    print("✓ Compression bench tests passed")


def test_vtk_export():
    """Test one legacy VTK file per cube with interior cell data"""
    mesh = generate_mesh((0, 0, 0), (2, 1, 1), n_cells_per_edge=4, root_edge=1.0)
    u = CubeField.allocate("u", 1, [0, 1], 4, 3, "velocity")
    p = CubeField.allocate("p", 2, [0, 1], 4, 1, "pressure")
    for g in (0, 1):
        C = cell_centers(mesh.cubes[g], 4, 2)
        u.cube(g)[...] = C
        p.cube(g)[0] = C[0] + 10.0 * g

    with tempfile.TemporaryDirectory() as d:
        paths = export_vtk(d, mesh.cubes, {"u": u, "p": p})
        assert [q.name for q in paths] == ["cube_000000.vtk", "cube_000001.vtk"]
        grid = meshio.read(str(paths[1]))

    assert grid.points.shape == (125, 3)
    assert np.allclose(grid.points.min(axis=0), (1.0, 0.0, 0.0))
    assert grid.cells[0].data.shape == (64, 8)
    cells_u = np.asarray(grid.cell_data["u"][0])
    assert cells_u.shape == (64, 3)
    assert np.allclose(cells_u, u.interior_of(1).reshape(3, -1).T)
    centers = grid.points[grid.cells[0].data].mean(axis=1)
    assert np.allclose(centers, cells_u)
    assert np.allclose(np.asarray(grid.cell_data["p"][0]).ravel(), centers[:, 0] + 10.0)

    print("✓ VTK export tests passed")


@pytest.mark.slow
def test_balance_report_sweep():
    """Test that balancing lowers the clustered-case imbalance"""
    rows = balance_report([3.0], ranks=4, n_steps=5, cadence=5)
    off, on = rows
    assert not off.balancing and on.balancing
    assert off.ratio_pre == off.ratio_post > 1.04
    assert on.rebalances >= 1
    assert on.ratio_post < on.ratio_pre

    print("✓ Balance sweep tests passed")


@pytest.mark.slow
def test_sphere_wake_validation():
    """Test the Re = 100 sphere wake against the reference bubble, and the zero-inflow control"""
    with tempfile.TemporaryDirectory() as d:
        report = validate_sphere({"parallel.ranks": 4, "parallel.threads": 2}, run_dir=Path(d) / "sphere")
        assert report.steady
        assert report.passed, "\n".join(report.lines())

        control = validate_sphere({"time.n_steps": 200}, run_dir=Path(d) / "control", inflow=0.0)
        assert control.metrics.L_b == 0.0
        assert not control.passed

    print("✓ Sphere validation tests passed")


def run_all_tests(slow=False):
    """Run all validation tests"""
    print("\n=== Testing Validation ===\n")

    test_recirculation_length()
    test_wake_metrics_distance()
    test_overrides()
    test_sphere_case_settings()
    test_wake_metrics_on_linear_field()
    test_compress_bench_rows()
    test_vtk_export()
    if slow:
        test_balance_report_sweep()
        test_sphere_wake_validation()

    print("\n✅ All validation tests passed!\n")


if __name__ == "__main__":
    run_all_tests(slow="--slow" in sys.argv)
