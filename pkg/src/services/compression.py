"""
Compression Service - Per-cube lossless and wavelet-lossy streams

Stream layout (little endian):
    b"CQS1" | mode u8 (0 lossless, 1 lossy) | ndim u8 | shape u32 × ndim | q f64 |
    n_segments u8 | segment lengths u64 × n | segments

Lossless: one segment, the float64 bytes byte-shuffled and DEFLATE-compressed.
Lossy, per component:
    one level of the 3D CDF 5/3 lifting transform (float, symmetric extension)
    approximation band kept as float64 (shuffled, DEFLATE)
    the seven detail bands quantized to rint(d / q) as int64 (shuffled, DEFLATE)
Reconstruction error is at most AMPLIFICATION · q/2 per value.
"""
from __future__ import annotations
import struct
import zlib
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import CheckpointError
from ..models.field import CubeField

if TYPE_CHECKING:
    from ..infra.workers import RankContext

STREAM_MAGIC = b"CQS1"
MODE_LOSSLESS = 0
MODE_LOSSY = 1

# Per-value error gain of the seven detail bands of one synthesis level
AMPLIFICATION = 7.0
_Q_MARGIN = 0.99
_ZLIB_LEVEL = 6


def choose_q(tol: float, value_range: float) -> float:
    """Quantization step keeping the error below tol · value_range"""
    if value_range <= 0.0:
        return 1.0
    return 2.0 * tol * value_range / AMPLIFICATION * _Q_MARGIN


def _shuffle(raw: np.ndarray) -> bytes:
    b = np.ascontiguousarray(raw).view(np.uint8).reshape(-1, raw.dtype.itemsize)
    return np.ascontiguousarray(b.T).tobytes()


def _unshuffle(data: bytes, dtype, count: int) -> np.ndarray:
    size = np.dtype(dtype).itemsize
    b = np.frombuffer(data, dtype=np.uint8)
    if b.size != count * size:
        raise CheckpointError(f"Stream segment holds {b.size} bytes, expected {count * size}")
    return np.ascontiguousarray(b.reshape(size, count).T).view(dtype).reshape(count)


def _pack(values: np.ndarray) -> bytes:
    return zlib.compress(_shuffle(values), _ZLIB_LEVEL)


def _unpack(data: bytes, dtype, count: int) -> np.ndarray:
    try:
        raw = zlib.decompress(data)
    except zlib.error as exc:
        raise CheckpointError(f"Corrupt compressed segment: {exc}") from exc
    return _unshuffle(raw, dtype, count)


# -- CDF 5/3 lifting ---------------------------------------------------------------

def _next_even(s: np.ndarray, nd: int) -> np.ndarray:
    """s[i+1] for i < nd, mirrored past the end"""
    if s.shape[-1] > nd:
        return s[..., 1:nd + 1]
    return np.concatenate([s[..., 1:], s[..., -1:]], axis=-1)


def _prev_odd(d: np.ndarray, ns: int) -> Tuple[np.ndarray, np.ndarray]:
    """(d[i−1], d[i]) for i < ns, mirrored at both ends"""
    prev = np.concatenate([d[..., :1], d[..., :-1]], axis=-1)
    cur = d
    if ns > d.shape[-1]:
        prev = np.concatenate([prev, d[..., -1:]], axis=-1)
        cur = np.concatenate([d, d[..., -1:]], axis=-1)
    return prev, cur


def dwt53_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Forward lifting along ``axis``; the result holds [approximation, detail] along it"""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    if x.shape[-1] < 2:
        return np.moveaxis(x.copy(), -1, axis)
    s = x[..., 0::2].copy()
    d = x[..., 1::2].copy()
    d -= 0.5 * (s[..., :d.shape[-1]] + _next_even(s, d.shape[-1]))
    prev, cur = _prev_odd(d, s.shape[-1])
    s += 0.25 * (prev + cur)
    return np.moveaxis(np.concatenate([s, d], axis=-1), -1, axis)


def idwt53_axis(y: np.ndarray, axis: int) -> np.ndarray:
    y = np.moveaxis(np.asarray(y, dtype=np.float64), axis, -1)
    m = y.shape[-1]
    if m < 2:
        return np.moveaxis(y.copy(), -1, axis)
    ns = (m + 1) // 2
    s = y[..., :ns].copy()
    d = y[..., ns:].copy()
    prev, cur = _prev_odd(d, ns)
    s -= 0.25 * (prev + cur)
    d += 0.5 * (s[..., :d.shape[-1]] + _next_even(s, d.shape[-1]))
    x = np.empty(y.shape, dtype=np.float64)
    x[..., 0::2] = s
    x[..., 1::2] = d
    return np.moveaxis(x, -1, axis)


def dwt53(x: np.ndarray) -> np.ndarray:
    """One level of the separable 3D transform of an (m, m, m) block"""
    for axis in range(3):
        x = dwt53_axis(x, axis)
    return x


def idwt53(y: np.ndarray) -> np.ndarray:
    for axis in (2, 1, 0):
        y = idwt53_axis(y, axis)
    return y


def _approx_slices(shape: Sequence[int]) -> Tuple[slice, ...]:
    return tuple(slice(0, (m + 1) // 2) for m in shape)


# -- streams -------------------------------------------------------------------------

def _header(mode: int, shape: Sequence[int], q: float, segments: List[bytes]) -> bytes:
    head = STREAM_MAGIC + struct.pack("<BB", mode, len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape)
    head += struct.pack("<dB", q, len(segments))
    head += struct.pack(f"<{len(segments)}Q", *(len(s) for s in segments))
    return head


def compress_cube(values: np.ndarray, q: Optional[float] = None) -> bytes:
    """
    Encode one cube's array (components × m³, halo included).

    Args:
        values: Array of shape (C, m, m, m) or (m, m, m)
        q: Quantization step; None selects the lossless mode

    Raises:
        ValueError: q given but not positive
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    if q is None:
        segment = _pack(values.ravel())
        return _header(MODE_LOSSLESS, values.shape, 0.0, [segment]) + segment
    if q <= 0:
        raise ValueError(f"quantization step must be positive, got {q}")
    blocks = values.reshape((-1,) + values.shape[-3:])
    approx: List[np.ndarray] = []
    details: List[np.ndarray] = []
    for block in blocks:
        coeffs = dwt53(block)
        mask = np.ones(coeffs.shape, dtype=bool)
        mask[_approx_slices(coeffs.shape)] = False
        approx.append(coeffs[_approx_slices(coeffs.shape)].ravel())
        details.append(np.rint(coeffs[mask] / q).astype(np.int64))
    segments = [_pack(np.concatenate(approx)), _pack(np.concatenate(details))]
    return _header(MODE_LOSSY, values.shape, float(q), segments) + b"".join(segments)


def _parse(stream: bytes) -> Tuple[int, Tuple[int, ...], float, List[bytes]]:
    try:
        if stream[:4] != STREAM_MAGIC:
            raise CheckpointError("Not a compressed cube stream")
        mode, ndim = struct.unpack_from("<BB", stream, 4)
        pos = 6
        shape = struct.unpack_from(f"<{ndim}I", stream, pos)
        pos += 4 * ndim
        q, nseg = struct.unpack_from("<dB", stream, pos)
        pos += 9
        lengths = struct.unpack_from(f"<{nseg}Q", stream, pos)
        pos += 8 * nseg
    except struct.error as exc:
        raise CheckpointError(f"Truncated cube stream header: {exc}") from exc
    segments = []
    for n in lengths:
        seg = stream[pos:pos + n]
        if len(seg) != n:
            raise CheckpointError("Truncated cube stream payload")
        segments.append(seg)
        pos += n
    if pos != len(stream):
        raise CheckpointError(f"Cube stream has {len(stream) - pos} trailing bytes")
    return mode, tuple(shape), q, segments


def decompress_cube(stream: bytes) -> np.ndarray:
    """
    Decode a stream produced by compress_cube.

    Raises:
        CheckpointError: malformed or corrupt stream
    """
    mode, shape, q, segments = _parse(bytes(stream))
    count = int(np.prod(shape))
    if mode == MODE_LOSSLESS:
        return _unpack(segments[0], np.float64, count).reshape(shape)
    if mode != MODE_LOSSY or len(segments) != 2:
        raise CheckpointError(f"Unknown cube stream mode {mode}")
    block_shape = shape[-3:]
    n_blocks = count // int(np.prod(block_shape))
    a_shape = tuple((m + 1) // 2 for m in block_shape)
    n_a = int(np.prod(a_shape))
    n_d = int(np.prod(block_shape)) - n_a
    approx = _unpack(segments[0], np.float64, n_a * n_blocks)
    details = _unpack(segments[1], np.int64, n_d * n_blocks)
    out = np.empty((n_blocks,) + tuple(block_shape), dtype=np.float64)
    for b in range(n_blocks):
        coeffs = np.empty(block_shape, dtype=np.float64)
        mask = np.ones(block_shape, dtype=bool)
        mask[_approx_slices(block_shape)] = False
        coeffs[_approx_slices(block_shape)] = approx[b * n_a:(b + 1) * n_a].reshape(a_shape)
        coeffs[mask] = details[b * n_d:(b + 1) * n_d].astype(np.float64) * q
        out[b] = idwt53(coeffs)
    return out.reshape(shape)


def compression_ratio(values: np.ndarray, stream: bytes) -> float:
    return float(np.asarray(values, dtype=np.float64).nbytes) / max(1, len(stream))


def compress_field(ctx: "RankContext", field: CubeField, q: Optional[float] = None) -> Dict[int, bytes]:
    """
    Streams of every local cube of a field, worker w taking cubes w, w+T, ...

    The result is keyed by global id; the bytes do not depend on the worker count.
    """
    streams = ctx.strided(list(field.gids), lambda g: compress_cube(field.cube(g), q))
    return dict(zip(field.gids, streams))
