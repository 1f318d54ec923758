"""
Tests for the Lagrangian service

Covers surface discretization, set assignment, rigid advection and migration.
"""
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from src.errors import ParticleError
from src.infra.geometry import icosphere
from src.infra.workers import launch_ranks
from src.models.particle import MotionSpec, RigidBody
from src.services.decomp_service import linear_distribution
from src.services.lagrangian_service import (
    advect, assign_sets, body_velocity, clip_to_box, clustered_particles, discretize_surface,
    gather_particles, migrate, polygon_area_centroid,
)
from src.services.mesh_service import generate_mesh, locate_many


def _sphere_body(diameter=1.0, subdivisions=2):
    V, T = icosphere((0.0, 0.0, 0.0), diameter, subdivisions)
    return RigidBody(body_id=0, name="sphere", vertices=V, triangles=T)


def test_clip_to_box():
    """Test triangle clipping and fragment geometry"""
    tri = [(0.1, 0.1, 0.5), (0.9, 0.1, 0.5), (0.1, 0.9, 0.5)]
    inside = clip_to_box(tri, (0, 0, 0), (1, 1, 1))
    assert len(inside) == 3
    area, cen = polygon_area_centroid(inside)
    assert abs(area - 0.32) < 1e-12
    assert np.allclose(cen, (1.1 / 3, 1.1 / 3, 0.5))

    half = clip_to_box(tri, (0, 0, 0), (0.5, 1, 1))
    area_half, _ = polygon_area_centroid(half)
    assert 0 < area_half < area
    assert clip_to_box(tri, (2, 2, 2), (3, 3, 3)) == []

    print("✓ Clipping tests passed")


def test_discretize_sphere():
    """Test one particle per crossed cell and conservation of the surface area"""
    mesh = generate_mesh((-1, -1, -1), (1, 1, 1), n_cells_per_edge=8, root_edge=1.0)
    body = _sphere_body()
    particles = discretize_surface(body, mesh)

    dx = mesh.cubes[0].dx
    total = sum(p.dc_volume for p in particles) / dx
    assert abs(total - body.surface_area) < 1e-9 * body.surface_area
    assert [p.global_id for p in particles] == list(range(len(particles)))

    X = np.array([p.X for p in particles])
    where = locate_many(mesh, X)
    assert np.all(where >= 0)
    cells = set()
    for p, g in zip(particles, where):
        c = mesh.cubes[int(g)]
        cells.add((int(g),) + tuple(np.floor((np.asarray(p.X) - c.base_corner) / c.dx).astype(int)))
    assert len(cells) == len(particles)
    assert np.allclose(np.linalg.norm(X, axis=1), 0.5, atol=dx)

    print("✓ Surface discretization tests passed")


def test_body_outside_mesh():
    """Test that a surface leaving the mesh is rejected"""
    mesh = generate_mesh((0, 0, 0), (1, 1, 1), n_cells_per_edge=4)
    with pytest.raises(ParticleError):
        discretize_surface(_sphere_body(), mesh)

    print("✓ Outside-surface tests passed")


def test_assign_and_advect():
    """Test set assignment and rigid-body advection"""
    mesh = generate_mesh((0, 0, 0), (2, 2, 2), n_cells_per_edge=4, root_edge=1.0)
    arrays = clustered_particles(mesh, [0, 7], per_cube=10, seed=1)
    sets = assign_sets(arrays, mesh)
    assert len(sets[0]) == 10 and len(sets[7]) == 10
    assert sum(len(s) for s in sets.values()) == 20

    motions = {0: MotionSpec(linear_velocity=(1.0, 0.0, 0.0))}
    before = sets[0].ordered()[1]
    advect(sets, motions, 0.1, 0.1)
    after = sets[0].ordered()[1]
    assert np.allclose(after - before, [[0.1, 0.0, 0.0]])

    spin = MotionSpec(angular_velocity=(0.0, 0.0, 2.0))
    assert np.allclose(body_velocity(spin, np.array([1.0, 0.0, 0.0]), 0.0), (0.0, 2.0, 0.0))
    ramped = MotionSpec(angular_velocity=(0.0, 0.0, 2.0), ramp_alpha=1.0, ramp_t0=1.0)
    assert np.allclose(body_velocity(ramped, np.array([1.0, 0.0, 0.0]), 0.5), 0.0)

    bad = {k: v.copy() for k, v in arrays.items()}
    bad["X"][0] = (5.0, 0.0, 0.0)
    with pytest.raises(ParticleError):
        assign_sets(bad, mesh)

    print("✓ Assignment and advection tests passed")


@pytest.mark.parametrize("ranks", [1, 3])
def test_migration_conserves_particles(ranks):
    """Test that migration places every particle in its containing cube on any rank count"""
    mesh = generate_mesh((0, 0, 0), (2, 2, 2), n_cells_per_edge=4, root_edge=1.0, periodic=(True, False, False))
    arrays = clustered_particles(mesh, list(range(mesh.n_cubes)), per_cube=15, seed=2)
    motions = {0: MotionSpec(linear_velocity=(0.7, 0.0, 0.0))}

    def program(ctx):
        dist = linear_distribution(mesh.n_cubes, ctx.size)
        sets = assign_sets(arrays, mesh, dist.local_gids(ctx.rank))
        for _ in range(4):
            advect(sets, motions, 0.5, 0.0)
            migrate(ctx, sets, mesh, dist)
        for g, s in sets.items():
            if len(s):
                assert np.all(locate_many(mesh, s.positions) == g)
        return gather_particles(ctx, sets)

    gathered = launch_ranks(ranks, program, seed=ranks, max_delay=0.001)[0]
    assert gathered["ids"].tolist() == arrays["ids"].tolist()
    assert np.allclose(gathered["X"][:, 1:], arrays["X"][:, 1:])

    print(f"✓ Migration tests passed (P={ranks})")


@pytest.mark.parametrize("ranks", [1, 3])
def test_rotation_keeps_sets_consistent(ranks):
    """Test 1000 rotation steps on a graded mesh: ids conserved and every particle in its own cube's set"""
    mesh = generate_mesh((0, 0, 0), (2, 2, 2), [((0.5, 0.5, 0.5), (1.5, 1.5, 1.5), 2)], 4, root_edge=1.0)
    rng = np.random.default_rng(11)
    k = 120
    direction = rng.standard_normal((k, 3))
    direction /= np.linalg.norm(direction, axis=1)[:, None]
    X = 1.0 + direction * (0.8 * rng.random(k) ** (1 / 3))[:, None]
    arrays = {
        "ids": np.arange(k, dtype=np.int64),
        "X": X,
        "dc": np.full(k, 1e-3),
        "body": np.zeros(k, dtype=np.int64),
    }
    motions = {0: MotionSpec(angular_velocity=(0.2, -0.3, 1.0), center=(1.0, 1.0, 1.0))}

    def program(ctx):
        dist = linear_distribution(mesh.n_cubes, ctx.size)
        sets = assign_sets(arrays, mesh, dist.local_gids(ctx.rank))
        moved = exited = 0
        for step in range(1000):
            advect(sets, motions, 0.004, 0.004 * (step + 1))
            stats = migrate(ctx, sets, mesh, dist)
            moved += stats.moved_local + stats.sent
            exited += stats.exited
            for g, s in sets.items():
                if len(s):
                    assert np.all(locate_many(mesh, s.positions) == g)
        return gather_particles(ctx, sets), moved, exited

    results = launch_ranks(ranks, program, seed=ranks)
    gathered = results[0][0]
    assert sorted(gathered["ids"].tolist()) == arrays["ids"].tolist()
    assert sum(r[2] for r in results) == 0
    assert sum(r[1] for r in results) > k
    radius = np.linalg.norm(gathered["X"] - 1.0, axis=1)
    assert np.all(radius < 0.9)

    print(f"✓ Rotation migration tests passed (P={ranks})")


def test_migration_drops_exits():
    """Test that particles leaving a non-periodic domain are counted and removed"""
    mesh = generate_mesh((0, 0, 0), (2, 2, 2), n_cells_per_edge=4, root_edge=1.0)
    arrays = clustered_particles(mesh, [1], per_cube=5, seed=3)

    def program(ctx):
        dist = linear_distribution(mesh.n_cubes, ctx.size)
        sets = assign_sets(arrays, mesh, dist.local_gids(ctx.rank))
        advect(sets, {0: MotionSpec(linear_velocity=(3.0, 0.0, 0.0))}, 1.0, 1.0)
        stats = migrate(ctx, sets, mesh, dist)
        return stats.exited, sum(len(s) for s in sets.values())

    exited, left = launch_ranks(1, program)[0]
    assert exited == 5 and left == 0

    print("✓ Exit tests passed")


def run_all_tests():
    """Run all Lagrangian tests"""
    print("\n=== Testing Lagrangian Service ===\n")

    test_clip_to_box()
    test_discretize_sphere()
    test_body_outside_mesh()
    test_assign_and_advect()
    test_migration_conserves_particles(1)
    test_migration_conserves_particles(3)
    test_rotation_keeps_sets_consistent(1)
    test_rotation_keeps_sets_consistent(3)
    test_migration_drops_exits()

    print("\n✅ All Lagrangian tests passed!\n")


if __name__ == "__main__":
    run_all_tests()
