"""
Tests for the load balancer

Covers the workload model, the exact trigger, partition quality, the greedy remap and the
redistribution of cube data and particle sets.
"""
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from src.errors import PartitionError
from src.infra.workers import launch_ranks
from src.models.case import BalanceConfig
from src.models.field import CubeField
from src.services.balance_service import (
    LoadBalancer, build_graph, construct_similarity, estimate_imbalance, matching_weight, needs_rebalance,
    partition_graph, remap_mwbg,
)
from src.services.decomp_service import linear_distribution
from src.services.lagrangian_service import assign_sets, clustered_particles, gather_particles
from src.services.mesh_service import generate_mesh, locate_many


def _cluster_mesh():
    mesh = generate_mesh((0, 0, 0), (8, 8, 8), n_cells_per_edge=4, root_edge=1.0)
    cluster = [c.global_id for c in mesh.cubes if max(c.base_corner) < 3.0]
    return mesh, cluster


def test_graph_weights():
    """Test node and edge weights of the dual graph"""
    mesh = generate_mesh((0, 0, 0), (2, 1, 1), n_cells_per_edge=4, root_edge=1.0)
    G = build_graph(mesh, {0: 10}, gamma=3.0, halo_width=2)
    assert G.number_of_nodes() == 2 and G.number_of_edges() == 1
    assert G.edges[0, 1]["weight"] == 32.0
    assert G.nodes[0]["weight"] == 64.0 + 30.0 + 32.0
    assert G.nodes[1]["weight"] == 64.0 + 32.0

    W, ratio = estimate_imbalance(G, [0, 1], 2)
    assert W == [126.0, 96.0]
    assert ratio == pytest.approx(126.0 * 2 / 222.0)

    fine = generate_mesh((0, 0, 0), (2, 1, 1), [((1.0, 0.0, 0.0), (2.0, 1.0, 1.0), 1)], n_cells_per_edge=4, root_edge=1.0)
    Gf = build_graph(fine, {}, gamma=3.0)
    coarse_fine = [d["weight"] for i, j, d in Gf.edges(data=True) if fine.cubes[i].level != fine.cubes[j].level]
    assert coarse_fine and all(w == 8.0 for w in coarse_fine)

    print("✓ Graph weight tests passed")


def test_needs_rebalance_is_exact():
    """Test the trigger at and just above the threshold"""
    assert not needs_rebalance([104.0, 96.0], 1.04)
    assert needs_rebalance([104.0 + 1e-9, 96.0], 1.04)
    assert not needs_rebalance([50.0, 50.0], 1.04)
    assert needs_rebalance([10.0, 0.0], 1.04)

    print("✓ Trigger tests passed")


def test_partition_quality():
    """Test that the partition covers every cube with balanced parts"""
    mesh, cluster = _cluster_mesh()
    counts = {g: 50 for g in cluster}
    G = build_graph(mesh, counts, gamma=3.0)
    for k in (2, 3, 4, 7):
        parts = partition_graph(G, k)
        assert len(parts) == mesh.n_cubes
        assert set(parts) == set(range(k))
        _, ratio = estimate_imbalance(G, parts, k)
        assert ratio <= 1.04, f"k={k} ratio {ratio:.4f}"

    with pytest.raises(PartitionError):
        partition_graph(G, mesh.n_cubes + 1)

    print("✓ Partition quality tests passed")


def _exhaustive(S):
    P = S.shape[0]
    return max(sum(S[r, q] for q, r in enumerate(perm)) for perm in itertools.permutations(range(P)))


def test_remap_greedy_matching():
    """Test the greedy remap against exact assignment oracles"""
    assert remap_mwbg(np.array([[10.0, 0.0], [9.0, 8.0]])) == [0, 1]

    rng = np.random.default_rng(7)
    for P in (1, 2, 3, 4, 5, 6):
        for _ in range(20):
            S = rng.integers(0, 100, size=(P, P)).astype(np.float64)
            rank_of = remap_mwbg(S)
            assert sorted(rank_of) == list(range(P))
            greedy = matching_weight(S, rank_of)
            rows, cols = linear_sum_assignment(S, maximize=True)
            best = float(S[rows, cols].sum())
            assert best == _exhaustive(S)
            assert greedy <= best
            assert greedy >= 0.5 * best

    with pytest.raises(ValueError):
        remap_mwbg(np.zeros((2, 3)))

    print("✓ Remap tests passed")


def test_similarity_matrix():
    """Test that S counts resident cell weight per (old rank, new part)"""
    mesh = generate_mesh((0, 0, 0), (4, 1, 1), n_cells_per_edge=4, root_edge=1.0)
    G = build_graph(mesh, {}, gamma=3.0)
    S = construct_similarity(G, [0, 0, 1, 1], [1, 0, 0, 0], 2)
    assert S.tolist() == [[64.0, 64.0], [128.0, 0.0]]
    assert remap_mwbg(S) == [1, 0]

    print("✓ Similarity tests passed")


def test_rebalance_and_redistribute():
    """Test that a clustered load is rebalanced with data and particles preserved"""
    mesh, cluster = _cluster_mesh()
    arrays = clustered_particles(mesh, cluster, per_cube=50, seed=4)
    config = BalanceConfig(enabled=True, kappa=1.04, gamma=3.0, cadence=1)

    def program(ctx):
        dist = linear_distribution(mesh.n_cubes, ctx.size)
        sets = assign_sets(arrays, mesh, dist.local_gids(ctx.rank))
        u = CubeField.allocate("u", 0, dist.local_gids(ctx.rank), 4, 3, "velocity")
        for g in u.gids:
            u.cube(g)[...] = float(g)
        balancer = LoadBalancer(ctx, mesh, config)
        first, new = balancer.rebalance(dist, [u], sets, step=1)

        assert u.gids == new.local_gids(ctx.rank)
        assert sorted(sets) == u.gids
        for g in u.gids:
            assert np.all(u.cube(g) == float(g))
            if len(sets[g]):
                assert np.all(locate_many(mesh, sets[g].positions) == g)

        second, _ = balancer.rebalance(new, [u], sets, step=2)
        return first, second, gather_particles(ctx, sets)

    first, second, gathered = launch_ranks(4, program, seed=3, max_delay=0.0005)[0]

    assert first.rebalanced
    assert first.ratio_pre > 1.04
    assert first.ratio_post < first.ratio_pre
    assert first.cubes_moved > 0 and first.bytes_moved > 0
    assert not second.rebalanced
    assert gathered["ids"].tolist() == arrays["ids"].tolist()
    assert np.array_equal(gathered["X"], arrays["X"])

    print("✓ Rebalance tests passed")


def test_single_rank_never_moves():
    """Test that one rank reports without repartitioning"""
    mesh, cluster = _cluster_mesh()
    arrays = clustered_particles(mesh, cluster[:1], per_cube=500, seed=1)

    def program(ctx):
        dist = linear_distribution(mesh.n_cubes, 1)
        sets = assign_sets(arrays, mesh)
        report, new = LoadBalancer(ctx, mesh, BalanceConfig(enabled=True)).rebalance(dist, [], sets)
        return report, new is dist

    report, same = launch_ranks(1, program)[0]
    assert not report.rebalanced and same
    assert report.ratio_pre == 1.0

    print("✓ Single rank tests passed")


def run_all_tests():
    """Run all balance tests"""
    print("\n=== Testing Load Balancer ===\n")

    test_graph_weights()
    test_needs_rebalance_is_exact()
    test_partition_quality()
    test_remap_greedy_matching()
    test_similarity_matrix()
    test_rebalance_and_redistribute()
    test_single_rank_never_moves()

    print("\n✅ All balance tests passed!\n")


if __name__ == "__main__":
    run_all_tests()
