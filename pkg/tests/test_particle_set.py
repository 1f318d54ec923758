"""
Tests for ParticleSet

Checks the hash-table set operations against a dict model.
"""
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from src.models.particle import Particle
from src.models.particle_set import ParticleSet


def test_insert_erase_contains():
    """Test basic membership and the erase record"""
    s = ParticleSet(3)
    s.insert(10, (0.1, 0.2, 0.3), 0.5, body=1)
    s.insert(20, (1.0, 1.0, 1.0), 0.25)
    assert len(s) == 2
    assert 10 in s and 20 in s and 30 not in s

    pid, X, dc, body = s.erase(10)
    assert pid == 10 and tuple(X) == (0.1, 0.2, 0.3) and dc == 0.5 and body == 1
    assert 10 not in s and len(s) == 1
    assert s.row_of(20) == 0

    with pytest.raises(KeyError):
        s.insert(20, (0, 0, 0), 1.0)
    with pytest.raises(KeyError):
        s.erase(10)

    print("✓ Insert / erase / contains tests passed")


def test_random_operations_match_dict():
    """Test thousands of mixed operations against a dict model"""
    rng = np.random.default_rng(42)
    s = ParticleSet(0, capacity=4)
    model = {}
    for _ in range(5000):
        pid = int(rng.integers(0, 400))
        if pid in model and rng.random() < 0.6:
            rec = s.erase(pid)
            assert rec[2] == model.pop(pid)
        elif pid not in model:
            dc = float(rng.random())
            s.insert(pid, rng.random(3), dc)
            model[pid] = dc
        assert len(s) == len(model)

    for pid, dc in model.items():
        row = s.row_of(pid)
        assert row is not None and s.dc[row] == dc
    assert sorted(s.live_ids.tolist()) == sorted(model)
    for pid in range(400):
        assert (pid in s) == (pid in model)

    print("✓ Random operation tests passed")


def test_ordered_views_and_arrays():
    """Test id-sorted views and the column round trip"""
    s = ParticleSet(5)
    for pid in (7, 3, 9, 1):
        s.insert(pid, (pid, 0.0, 0.0), float(pid))
    ids, X, dc, body = s.ordered()
    assert ids.tolist() == [1, 3, 7, 9]
    assert X[:, 0].tolist() == [1.0, 3.0, 7.0, 9.0]

    again = ParticleSet.from_arrays(5, s.to_arrays())
    assert again.ordered()[0].tolist() == [1, 3, 7, 9]
    assert [p.global_id for p in again.particles()] == [1, 3, 7, 9]

    s.insert_particle(Particle(global_id=11, X=(0.5, 0.5, 0.5), dc_volume=0.1, body_id=2))
    assert 11 in s and s.body[s.row_of(11)] == 2

    print("✓ Ordered view tests passed")


def run_all_tests():
    """Run all particle set tests"""
    print("\n=== Testing ParticleSet ===\n")

    test_insert_erase_contains()
    test_random_operations_match_dict()
    test_ordered_views_and_arrays()

    print("\n✅ All ParticleSet tests passed!\n")


if __name__ == "__main__":
    run_all_tests()
