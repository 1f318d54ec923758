"""
Decomposition Service - Linear and explicit cube-to-rank distributions

Linear mode splits the Z-ordered cubes into contiguous blocks:
    N = P·L + R,  0 ≤ R < P,  n(p) = ⌊(N + P − p − 1) / P⌋
so the first R ranks hold L + 1 cubes. Owners follow in closed form from the same split.
"""
from __future__ import annotations
from itertools import accumulate
from typing import Dict, List, Mapping, Sequence

from ..errors import ConfigError
from ..models.decomp import Distribution, IndexMap, linear_owner


def linear_counts(n_cubes: int, n_ranks: int) -> List[int]:
    return [(n_cubes + n_ranks - p - 1) // n_ranks for p in range(n_ranks)]


def linear_distribution(n_cubes: int, n_ranks: int) -> Distribution:
    """
    Load-balanced linear distribution of N Z-ordered cubes over P ranks.

    Raises:
        ConfigError: N < 0 or P < 1

    Example:
        >>> linear_distribution(10, 4).counts
        [3, 3, 2, 2]
    """
    if n_ranks < 1:
        raise ConfigError(f"Rank count must be >= 1, got {n_ranks}")
    if n_cubes < 0:
        raise ConfigError(f"Cube count must be >= 0, got {n_cubes}")
    counts = linear_counts(n_cubes, n_ranks)
    offsets = [0] + list(accumulate(counts))[:-1]
    return Distribution(n_cubes=n_cubes, n_ranks=n_ranks, counts=counts, offsets=offsets)


def owner_of(gid: int, n_cubes: int, n_ranks: int) -> int:
    """Rank owning Z-order position ``gid`` under the linear distribution"""
    if n_ranks < 1:
        raise ConfigError(f"Rank count must be >= 1, got {n_ranks}")
    if gid < 0 or gid >= n_cubes:
        raise ConfigError(f"Cube index {gid} out of range [0, {n_cubes})")
    return linear_owner(gid, n_cubes, n_ranks)


def explicit_distribution(owners: Sequence[int], n_ranks: int) -> Distribution:
    """Distribution from a per-cube owner list (after rebalancing)"""
    counts = [0] * n_ranks
    for r in owners:
        if r < 0 or r >= n_ranks:
            raise ConfigError(f"Owner rank {r} out of range [0, {n_ranks})")
        counts[r] += 1
    offsets = [0] + list(accumulate(counts))[:-1]
    return Distribution(
        n_cubes=len(owners), n_ranks=n_ranks, counts=counts, offsets=offsets,
        mode="explicit", owners=[int(r) for r in owners],
    )


def index_map(dist: Distribution) -> IndexMap:
    local = [dist.local_gids(p) for p in range(dist.n_ranks)]
    g2l = {g: (p, i) for p, gids in enumerate(local) for i, g in enumerate(gids)}
    return IndexMap(local_to_global=local, global_to_local=g2l)


def partition_lagrangian(dist: Distribution, set_sizes: Mapping[int, int]) -> Dict[int, List[int]]:
    """
    Ranks owning each cube's particle set: a set always lives with its cube.

    Args:
        dist: Cube distribution
        set_sizes: Particle count per cube id (cubes without particles may be omitted)

    Returns:
        rank -> ascending cube ids whose non-empty sets it owns
    """
    out: Dict[int, List[int]] = {p: [] for p in range(dist.n_ranks)}
    for gid in sorted(set_sizes):
        if set_sizes[gid] > 0:
            out[dist.owner(gid)].append(gid)
    return out
