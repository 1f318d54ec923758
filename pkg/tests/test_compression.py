"""
Tests for the per-cube compression streams
"""
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from src.errors import CheckpointError
from src.infra.workers import launch_ranks
from src.models.field import CubeField
from src.services.compression import (
    AMPLIFICATION, choose_q, compress_cube, compress_field, compression_ratio, decompress_cube, dwt53, idwt53,
)


def _trilinear(m=16):
    r = np.linspace(0.0, 1.0, m)
    x, y, z = np.meshgrid(r, r, r, indexing="ij")
    return (1.0 + x) * (2.0 - y) * (0.5 + z)


def test_lifting_is_invertible():
    """Test that the lifting transform inverts to round-off for even and odd sizes"""
    rng = np.random.default_rng(0)
    for shape in ((8, 8, 8), (7, 9, 12), (2, 3, 5)):
        x = rng.standard_normal(shape)
        assert np.allclose(idwt53(dwt53(x)), x, atol=1e-12)

    print("✓ Lifting inversion tests passed")


def test_lossless_is_bit_exact():
    """Test that the lossless stream reproduces every bit, NaN and signed zero included"""
    rng = np.random.default_rng(1)
    values = rng.standard_normal((3, 12, 12, 12))
    values[0, 0, 0, 0] = -0.0
    values[1, 2, 3, 4] = np.nan
    out = decompress_cube(compress_cube(values))
    assert out.shape == values.shape
    assert values.tobytes() == out.tobytes()

    constant = np.full((16, 16, 16), 3.25)
    assert compression_ratio(constant, compress_cube(constant)) > 20.0

    print("✓ Lossless tests passed")


def test_lossy_error_bound():
    """Test that every reconstructed value is within AMPLIFICATION · q/2"""
    rng = np.random.default_rng(2)
    values = np.stack([_trilinear(), rng.standard_normal((16, 16, 16))])
    for q in (1e-1, 1e-3, 1e-6):
        out = decompress_cube(compress_cube(values, q))
        err = float(np.abs(out - values).max())
        assert err <= AMPLIFICATION * q / 2 + 1e-12, f"q={q} error {err:.3e}"

    print("✓ Lossy error bound tests passed")


def test_lossy_ratio_on_smooth_data():
    """Test that smooth data compresses at least twofold at a 1e-4 relative tolerance"""
    values = _trilinear()
    value_range = float(values.max() - values.min())
    q = choose_q(1e-4, value_range)
    stream = compress_cube(values, q)
    assert compression_ratio(values, stream) >= 2.0
    assert float(np.abs(decompress_cube(stream) - values).max()) <= 1e-4 * value_range

    assert choose_q(1e-4, 0.0) == 1.0

    print("✓ Lossy ratio tests passed")


def test_bad_streams_raise():
    """Test that corrupt, truncated or foreign streams raise CheckpointError"""
    values = np.random.default_rng(3).standard_normal((8, 8, 8))
    for stream in (compress_cube(values), compress_cube(values, 1e-3)):
        corrupt = bytearray(stream)
        corrupt[-1] ^= 0xFF
        with pytest.raises(CheckpointError):
            decompress_cube(bytes(corrupt))
        with pytest.raises(CheckpointError):
            decompress_cube(stream[:-10])
        with pytest.raises(CheckpointError):
            decompress_cube(stream[:8])
        with pytest.raises(CheckpointError):
            decompress_cube(stream + b"\x00")
    with pytest.raises(CheckpointError):
        decompress_cube(b"JUNK" + bytes(40))

    with pytest.raises(ValueError):
        compress_cube(values, 0.0)
    with pytest.raises(ValueError):
        compress_cube(values, -1.0)

    print("✓ Bad stream tests passed")


def test_field_streams_independent_of_workers():
    """Test that field compression yields the same bytes for any worker count"""
    u = CubeField.allocate("u", 0, [0, 1, 2, 3, 4], 8, 3, "velocity")
    u.data[...] = np.random.default_rng(4).standard_normal(u.data.shape)

    def program(ctx):
        return compress_field(ctx, u, 1e-3)

    one = launch_ranks(1, program, threads=1)[0]
    three = launch_ranks(1, program, threads=3)[0]
    assert list(one) == [0, 1, 2, 3, 4]
    assert one == three

    print("✓ Field stream tests passed")


def run_all_tests():
    """Run all compression tests"""
    print("\n=== Testing Compression ===\n")

    test_lifting_is_invertible()
    test_lossless_is_bit_exact()
    test_lossy_error_bound()
    test_lossy_ratio_on_smooth_data()
    test_bad_streams_raise()
    test_field_streams_independent_of_workers()

    print("\n✅ All compression tests passed!\n")


if __name__ == "__main__":
    run_all_tests()
