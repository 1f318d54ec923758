"""
Tests for the decomposition service

Checks the linear split formula, owner lookup and explicit distributions.
"""
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from src.errors import ConfigError
from src.services.decomp_service import (
    explicit_distribution, index_map, linear_distribution, owner_of, partition_lagrangian,
)


def test_linear_counts_example():
    """Test the documented 10-over-4 split"""
    dist = linear_distribution(10, 4)
    assert dist.counts == [3, 3, 2, 2]
    assert dist.offsets == [0, 3, 6, 8]
    assert dist.local_gids(2) == [6, 7]

    print("✓ Linear split example passed")


def test_linear_distribution_properties():
    """Test contiguity, balance and owner consistency on random sizes"""
    rng = np.random.default_rng(7)
    cases = [(0, 3), (1, 1), (5, 8), (64, 64)] + [
        (int(rng.integers(0, 10_001)), int(rng.integers(1, 65))) for _ in range(40)
    ]
    for n, p in cases:
        dist = linear_distribution(n, p)
        assert sum(dist.counts) == n
        assert max(dist.counts) - min(dist.counts) <= 1
        assert dist.counts == sorted(dist.counts, reverse=True)
        for r in range(p):
            assert dist.offsets[r] == sum(dist.counts[:r])
        for g in rng.integers(0, max(n, 1), size=min(n, 25)):
            g = int(g)
            r = owner_of(g, n, p)
            assert dist.offsets[r] <= g < dist.offsets[r] + dist.counts[r]
            assert dist.owner(g) == r

    print("✓ Linear distribution property tests passed")


def test_invalid_inputs():
    """Test that bad rank counts and ids raise ConfigError"""
    with pytest.raises(ConfigError):
        linear_distribution(10, 0)
    with pytest.raises(ConfigError):
        owner_of(10, 10, 2)
    with pytest.raises(ConfigError):
        explicit_distribution([0, 2], 2)

    print("✓ Invalid input tests passed")


def test_explicit_distribution():
    """Test owners, local ids and the index map of an explicit assignment"""
    dist = explicit_distribution([1, 0, 1, 2, 0], 3)
    assert dist.counts == [2, 2, 1]
    assert dist.local_gids(0) == [1, 4]
    assert dist.local_gids(1) == [0, 2]
    assert dist.owner(3) == 2
    imap = index_map(dist)
    assert imap.lookup(4) == (0, 1)
    assert imap.local_to_global[2] == [3]

    sets = partition_lagrangian(dist, {0: 5, 1: 0, 3: 2})
    assert sets == {0: [], 1: [0], 2: [3]}

    print("✓ Explicit distribution tests passed")


def run_all_tests():
    """Run all decomposition tests"""
    print("\n=== Testing Decomposition ===\n")

    test_linear_counts_example()
    test_linear_distribution_properties()
    test_invalid_inputs()
    test_explicit_distribution()

    print("\n✅ All decomposition tests passed!\n")


if __name__ == "__main__":
    run_all_tests()
