"""
Tests for the halo exchange

Validates same-level halo values, independence from rank count and delivery order,
the overlapped compute path and the reverse (accumulating) exchange.
"""
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from src.errors import HaloContractError
from src.infra.workers import launch_ranks
from src.models.field import CubeField
from src.services.decomp_service import linear_distribution
from src.services.halo_service import FACE_PASSES, HaloExchanger, slab_ranges
from src.services.mesh_service import cell_centers, generate_mesh
from src.services.operators import neighbor_sum

N = 4
H = 2


def _uniform_mesh(periodic=(False, False, False)):
    return generate_mesh((0, 0, 0), (2, 2, 2), n_cells_per_edge=N, root_edge=1.0, periodic=periodic)


def _refined_mesh():
    return generate_mesh((0, 0, 0), (2, 2, 2), [((0.5, 0.5, 0.5), (1.5, 1.5, 1.5), 2)], N, root_edge=1.0)


def _linear(cube):
    C = cell_centers(cube, N, H)
    return C[0] + 2.0 * C[1] + 3.0 * C[2]


def _filled(mesh, gids, qid=11):
    fld = CubeField.allocate("phi", qid, gids, N, 1, "scratch", H)
    s = slice(H, H + N)
    for g in gids:
        fld.cube(g)[0, s, s, s] = _linear(mesh.cubes[g])[s, s, s]
    return fld


def _exchange_all(mesh, ranks, mode, seed=0, threads=1):
    def program(ctx):
        dist = linear_distribution(mesh.n_cubes, ctx.size)
        hx = HaloExchanger(mesh, dist, ctx, H)
        fld = _filled(mesh, hx.gids)
        hx.exchange(fld, mode)
        return {g: fld.cube(g).copy() for g in fld.gids}

    out = {}
    for part in launch_ranks(ranks, program, threads=threads, seed=seed, max_delay=0.001 if ranks > 1 else 0.0):
        out.update(part)
    return out


def test_same_level_face_halos():
    """Test that face halos across same-level neighbors hold the neighbor's values"""
    mesh = _uniform_mesh()
    cubes = _exchange_all(mesh, 1, "face")

    for c in mesh.cubes:
        expect = _linear(c)
        arr = cubes[c.global_id][0]
        for face in range(6):
            if c.is_boundary(face):
                continue
            ix, iy, iz = np.meshgrid(*slab_ranges(face, N, H, FACE_PASSES[0]), indexing="ij")
            idx = (ix + H, iy + H, iz + H)
            assert np.allclose(arr[idx], expect[idx], atol=1e-12)

    print("✓ Same-level face halo tests passed")


@pytest.mark.parametrize("mode", ["face", "corner"])
def test_rank_count_independence(mode):
    """Test bit-identical halos for P in {1, 2, 4} and several delivery seeds"""
    mesh = _refined_mesh()
    reference = _exchange_all(mesh, 1, mode)
    for ranks, seed, threads in [(2, 0, 1), (4, 1, 2), (4, 5, 1)]:
        other = _exchange_all(mesh, ranks, mode, seed=seed, threads=threads)
        assert sorted(other) == sorted(reference)
        for g in reference:
            assert np.array_equal(other[g], reference[g]), f"cube {g} differs for P={ranks}"

    print(f"✓ Rank count independence tests passed ({mode})")


def test_overlap_matches_plain():
    """Test that the overlapped exchange-and-compute path gives the plain path's bits"""
    mesh = _refined_mesh()

    def program(ctx, overlap):
        dist = linear_distribution(mesh.n_cubes, ctx.size)
        hx = HaloExchanger(mesh, dist, ctx, H)
        fld = _filled(mesh, hx.gids)
        out = np.zeros((len(hx.gids), 1, N, N, N))

        def kernel(rows):
            out[rows] = neighbor_sum(fld.data[rows], N, H)

        hx.exchange_and_compute(fld, kernel, overlap=overlap)
        return {g: out[r].copy() for r, g in enumerate(hx.gids)}

    for ranks in (1, 4):
        results = {}
        for overlap in (True, False):
            merged = {}
            for part in launch_ranks(ranks, lambda ctx: program(ctx, overlap), threads=2, seed=3, max_delay=0.001):
                merged.update(part)
            results[overlap] = merged
        for g in results[False]:
            assert np.array_equal(results[True][g], results[False][g])

    print("✓ Overlap equivalence tests passed")


def test_unfinalized_epoch_raises():
    """Test that starting a second exchange of a field before finalizing the first is rejected"""
    mesh = _uniform_mesh()

    def program(ctx):
        dist = linear_distribution(mesh.n_cubes, ctx.size)
        hx = HaloExchanger(mesh, dist, ctx, H)
        fld = _filled(mesh, hx.gids)
        token = hx.exchange_begin(fld)
        with pytest.raises(HaloContractError):
            hx.exchange_begin(fld)
        hx.exchange_finalize(token)
        assert not fld.exchange_pending
        return True

    assert launch_ranks(1, program) == [True]

    print("✓ Epoch contract tests passed")


def test_reverse_exchange_conserves_sum():
    """Test that the reverse exchange moves every halo value into exactly one interior cell"""
    mesh = _uniform_mesh(periodic=(True, True, True))
    m = N + 2 * H

    def program(ctx):
        dist = linear_distribution(mesh.n_cubes, ctx.size)
        hx = HaloExchanger(mesh, dist, ctx, H)
        fld = CubeField.allocate("f", 12, hx.gids, N, 1, "force", H)
        fld.data.fill(1.0)
        fld.data[fld.interior] = 0.0
        hx.reverse_exchange(fld, "corner")
        halo_total = float(np.abs(fld.data).sum() - np.abs(fld.data[fld.interior]).sum())
        return float(fld.data[fld.interior].sum()), halo_total

    for ranks in (1, 2, 4):
        results = launch_ranks(ranks, program, seed=ranks, max_delay=0.001)
        assert sum(r[0] for r in results) == mesh.n_cubes * (m ** 3 - N ** 3)
        assert all(r[1] == 0.0 for r in results)

    print("✓ Reverse exchange conservation tests passed")


@pytest.mark.parametrize("mode", ["face", "corner"])
def test_reverse_exchange_is_volume_transpose(mode):
    """Test <E a, b> = <a, R b> with cell volumes as weights across level interfaces"""
    mesh = _refined_mesh()
    m = N + 2 * H
    s = slice(H, H + N)

    def program(ctx):
        dist = linear_distribution(mesh.n_cubes, ctx.size)
        hx = HaloExchanger(mesh, dist, ctx, H)
        a = CubeField.allocate("a", 13, hx.gids, N, 1, "scratch", H)
        b = CubeField.allocate("b", 14, hx.gids, N, 1, "force", H)
        for g in hx.gids:
            a.cube(g)[0, s, s, s] = np.random.default_rng(g).standard_normal((N, N, N))
            b.cube(g)[0] = np.random.default_rng(500 + g).standard_normal((m, m, m))
            b.cube(g)[0, s, s, s] = 0.0

        hx.exchange(a, mode)
        forward = sum(mesh.cubes[g].dx ** 3 * float((a.cube(g) * b.cube(g)).sum()) for g in hx.gids)
        hx.reverse_exchange(b, mode)
        backward = sum(mesh.cubes[g].dx ** 3 * float((a.interior_of(g) * b.interior_of(g)).sum()) for g in hx.gids)
        return forward, backward

    for ranks in (1, 3):
        results = launch_ranks(ranks, program, seed=ranks, max_delay=0.001)
        forward = sum(r[0] for r in results)
        backward = sum(r[1] for r in results)
        assert forward != 0.0
        assert forward == pytest.approx(backward, rel=1e-12, abs=1e-12)

    print(f"✓ Reverse exchange transpose tests passed ({mode})")


def run_all_tests():
    """Run all halo exchange tests"""
    print("\n=== Testing Halo Exchange ===\n")

    test_same_level_face_halos()
    test_rank_count_independence("face")
    test_rank_count_independence("corner")
    test_overlap_matches_plain()
    test_unfinalized_epoch_raises()
    test_reverse_exchange_conserves_sum()
    test_reverse_exchange_is_volume_transpose("face")
    test_reverse_exchange_is_volume_transpose("corner")

    print("\n✅ All halo exchange tests passed!\n")


if __name__ == "__main__":
    run_all_tests()
