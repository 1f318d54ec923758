"""
Tests for the mesh service

Covers generation, grading, Z-ordering, adjacency and point location.
"""
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from src.errors import MeshGenerationError
from src.services.mesh_service import (
    check_grading, from_leaves, generate_mesh, locate_cube, locate_many, mesh_stats, morton_key, zorder_sort,
)


def _refined_mesh(n=4):
    return generate_mesh((0, 0, 0), (1, 1, 1), [((0.25, 0.25, 0.25), (0.5, 0.5, 0.5), 3)], n)


def test_uniform_mesh():
    """Test a 2×2×2 grid of root cubes"""
    mesh = generate_mesh((0, 0, 0), (2, 2, 2), n_cells_per_edge=4, root_edge=1.0)

    assert mesh.n_cubes == 8
    assert mesh.n_levels == 1
    assert all(c.level == 0 for c in mesh.cubes)
    assert all(c.dx == 0.25 for c in mesh.cubes)
    first = mesh.cubes[0]
    assert first.lattice == (0, 0, 0)
    assert first.is_boundary(0) and first.is_boundary(2) and first.is_boundary(4)
    assert len(first.neighbors[1]) == 1

    print("✓ Uniform mesh tests passed")


def test_refinement_and_grading():
    """Test that refinement reaches the target level and grading holds across every face"""
    mesh = _refined_mesh()

    assert mesh.n_levels == 4
    assert max(c.level for c in mesh.cubes) == 3
    assert check_grading(mesh) <= 1
    volume = sum(c.edge_length ** 3 for c in mesh.cubes)
    assert abs(volume - 1.0) < 1e-12

    print("✓ Refinement and grading tests passed")


def test_zorder_numbering():
    """Test that global ids follow the Morton key of each cube's lattice corner"""
    mesh = _refined_mesh()

    assert zorder_sort(mesh) == list(range(mesh.n_cubes))
    keys = [morton_key(*c.lattice) for c in mesh.cubes]
    assert keys == sorted(keys)
    assert all(c.global_id == g for g, c in enumerate(mesh.cubes))
    assert morton_key(1, 0, 0) == 1 and morton_key(0, 1, 0) == 2 and morton_key(0, 0, 1) == 4

    print("✓ Z-order tests passed")


def test_adjacency_symmetry():
    """Test that every neighbor relation is mirrored across the opposite face"""
    mesh = _refined_mesh()

    for c in mesh.cubes:
        for face, nbrs in enumerate(c.neighbors):
            assert len(nbrs) in (0, 1, 4)
            for g in nbrs:
                assert c.global_id in mesh.cubes[g].neighbors[face ^ 1]
                assert abs(mesh.cubes[g].level - c.level) <= 1

    print("✓ Adjacency symmetry tests passed")


def test_periodic_adjacency():
    """Test wrap-around neighbors on a periodic axis"""
    mesh = generate_mesh((0, 0, 0), (2, 1, 1), n_cells_per_edge=4, root_edge=1.0, periodic=(True, False, False))

    assert mesh.n_cubes == 2
    assert mesh.cubes[0].neighbors[0] == [1]
    assert mesh.cubes[0].neighbors[1] == [1]
    assert mesh.cubes[0].is_boundary(2)

    print("✓ Periodic adjacency tests passed")


def test_generation_errors():
    """Test rejected refinement inputs"""
    with pytest.raises(MeshGenerationError):
        generate_mesh((0, 0, 0), (1, 1, 1), [((0, 0, 0), (0.5, 0.5, 0.5), 3)], 4, max_level=2)
    with pytest.raises(MeshGenerationError):
        generate_mesh((0, 0, 0), (1.5, 1, 1), n_cells_per_edge=4, root_edge=1.0)
    with pytest.raises(MeshGenerationError):
        generate_mesh((0, 0, 0), (1, 1, 1), [((2, 2, 2), (3, 3, 3), 1)], 4)

    print("✓ Generation error tests passed")


def test_locate():
    """Test point location with lower-closed cube extents"""
    mesh = _refined_mesh()

    for x in [(0.3, 0.3, 0.3), (0.9, 0.1, 0.5), (0.0, 0.0, 0.0)]:
        g = locate_cube(mesh, x)
        c = mesh.cubes[g]
        lo = np.asarray(c.base_corner)
        assert np.all(lo <= x) and np.all(np.asarray(x) < lo + c.edge_length)
    assert locate_cube(mesh, (1.0, 0.5, 0.5)) is None
    assert locate_cube(mesh, (-0.1, 0.5, 0.5)) is None
    where = locate_many(mesh, np.array([[0.3, 0.3, 0.3], [2.0, 0.0, 0.0]]))
    assert where[0] == locate_cube(mesh, (0.3, 0.3, 0.3))
    assert where[1] == -1

    print("✓ Locate tests passed")


def test_from_leaves_and_stats():
    """Test rebuilding a mesh from its leaf records and the per-level statistics"""
    mesh = _refined_mesh()
    again = from_leaves(
        mesh.origin, mesh.root_edge, mesh.root_dims, mesh.max_level, mesh.n_cells_per_edge,
        mesh.periodic, [(c.level, c.lattice) for c in reversed(mesh.cubes)],
    )
    assert [(c.level, c.lattice) for c in again.cubes] == [(c.level, c.lattice) for c in mesh.cubes]
    assert [c.neighbors for c in again.cubes] == [c.neighbors for c in mesh.cubes]

    stats = mesh_stats(mesh)
    assert stats["cubes"] == mesh.n_cubes
    assert stats["cells"] == mesh.n_cubes * 64
    assert sum(level["cubes"] for level in stats["levels"]) == mesh.n_cubes

    print("✓ Rebuild and statistics tests passed")


def run_all_tests():
    """Run all mesh tests"""
    print("\n=== Testing Mesh Service ===\n")

    test_uniform_mesh()
    test_refinement_and_grading()
    test_zorder_numbering()
    test_adjacency_symmetry()
    test_periodic_adjacency()
    test_generation_errors()
    test_locate()
    test_from_leaves_and_stats()

    print("\n✅ All mesh tests passed!\n")


if __name__ == "__main__":
    run_all_tests()
