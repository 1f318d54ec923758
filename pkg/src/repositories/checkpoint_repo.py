"""
Checkpoint container - one flat binary file per checkpoint, restartable on any rank count

Layout:
    MAGIC (8) | version u32 | header length u64 | header (canonical JSON) |
    payload | checksum (blake2b, 8 bytes, over every preceding byte)

The payload holds one record per cube in global-id order: the compressed stream of each
field in header field order, then the cube's particles as raw little-endian columns
(ids i64, X f64×3, dc f64, body i64), sorted by id. Offsets in the header are relative to
the first payload byte, so the header alone locates every cube and any linear distribution
can read exactly its own byte ranges.
"""
from __future__ import annotations
import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError
from loguru import logger

from ..errors import CheckpointError
from ..infra.workers import RankContext
from ..models.checkpoint import FORMAT_VERSION, MAGIC, CheckpointHeader, CubeRecord, FieldDescriptor
from ..models.decomp import Distribution
from ..models.field import HALO_WIDTH, CubeField
from ..models.mesh import BcmMesh
from ..models.particle_set import ParticleSet
from ..services.compression import choose_q, compress_field, decompress_cube
from ..services.decomp_service import linear_distribution
from ..services.mesh_service import from_leaves

_PREAMBLE = struct.Struct("<8sIQ")
CHECKSUM_BYTES = 8
PARTICLE_RECORD_BYTES = 8 + 24 + 8 + 8
_CHUNK = 1 << 20


class CheckpointState(BaseModel):
    """What a rank holds after reading a checkpoint"""
    header: CheckpointHeader
    mesh: BcmMesh
    dist: Distribution
    fields: Dict[str, CubeField]
    sets: Dict[int, ParticleSet]

    class Config:
        arbitrary_types_allowed = True

    @property
    def t(self) -> float:
        return self.header.t

    @property
    def step(self) -> int:
        return self.header.step


def canonical_json(header: CheckpointHeader) -> bytes:
    return json.dumps(header.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode("utf-8")


def checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


def _file_checksum(path: Path, length: int) -> bytes:
    h = hashlib.blake2b(digest_size=CHECKSUM_BYTES)
    with open(path, "rb") as fh:
        left = length
        while left > 0:
            chunk = fh.read(min(_CHUNK, left))
            if not chunk:
                break
            h.update(chunk)
            left -= len(chunk)
    return h.digest()


def pack_particles(ps: Optional[ParticleSet]) -> Tuple[bytes, int]:
    """Raw column block of a cube's particles, sorted by id"""
    if ps is None or len(ps) == 0:
        return b"", 0
    ids, X, dc, body = ps.ordered()
    block = (
        ids.astype("<i8").tobytes() + X.astype("<f8").tobytes()
        + dc.astype("<f8").tobytes() + body.astype("<i8").tobytes()
    )
    return block, len(ids)


def unpack_particles(gid: int, block: bytes, count: int) -> ParticleSet:
    if len(block) != count * PARTICLE_RECORD_BYTES:
        raise CheckpointError(f"Particle block of cube {gid} holds {len(block)} bytes for {count} particles")
    if count == 0:
        return ParticleSet(gid)
    pos = 0

    def take(dtype: str, n: int) -> np.ndarray:
        nonlocal pos
        arr = np.frombuffer(block, dtype=dtype, count=n, offset=pos)
        pos += arr.nbytes
        return arr

    arrays = {
        "ids": take("<i8", count).astype(np.int64),
        "X": take("<f8", 3 * count).astype(np.float64).reshape(count, 3),
        "dc": take("<f8", count).astype(np.float64),
        "body": take("<i8", count).astype(np.int64),
    }
    return ParticleSet.from_arrays(gid, arrays)


def _value_range(ctx: RankContext, field: CubeField) -> float:
    data = field.data
    hi = float(data.max()) if data.size else float("-inf")
    lo = float(data.min()) if data.size else float("inf")
    hi, lo = ctx.comm.allreduce_max(hi), ctx.comm.allreduce_min(lo)
    return hi - lo if hi >= lo else 0.0


def _build_header(
    mesh: BcmMesh,
    descriptors: List[FieldDescriptor],
    sizes: Mapping[int, Tuple[List[int], int]],
    halo_width: int,
    t: float,
    step: int,
    extras: Dict[str, Any],
) -> CheckpointHeader:
    records: List[CubeRecord] = []
    offset = 0
    for c in mesh.cubes:
        lengths, n_particles = sizes[c.global_id]
        fields_end = offset + sum(lengths)
        records.append(CubeRecord(
            gid=c.global_id, level=c.level, lattice=c.lattice, offset=offset, lengths=lengths,
            n_particles=n_particles, particle_offset=fields_end,
        ))
        offset = fields_end + n_particles * PARTICLE_RECORD_BYTES
    return CheckpointHeader(
        n_cubes=mesh.n_cubes, n_cells_per_edge=mesh.n_cells_per_edge, n_levels=mesh.n_levels,
        max_level=mesh.max_level, halo_width=halo_width, origin=mesh.origin, root_edge=mesh.root_edge,
        root_dims=mesh.root_dims, periodic=mesh.periodic, fields=descriptors, cubes=records,
        payload_length=offset, t=t, step=step, extras=extras,
    )


def write_checkpoint(
    ctx: RankContext,
    path: str | Path,
    mesh: BcmMesh,
    fields: Sequence[CubeField],
    sets: Mapping[int, ParticleSet],
    t: float = 0.0,
    step: int = 0,
    mode: str = "lossless",
    tol: float = 1e-4,
    extras: Optional[Dict[str, Any]] = None,
    parallel: bool = True,
) -> int:
    """
    Write the global state to one checkpoint file (collective).

    Cube streams are compressed on the rank's worker threads. With ``parallel`` every rank
    writes its cubes at their header offsets into a shared temporary file; otherwise the
    payloads are gathered and rank 0 writes alone. The file appears under its final name
    only once the checksum is appended.

    Args:
        ctx: Rank context
        path: Destination file
        mesh: Shared mesh
        fields: Local fields, all over the same cubes
        sets: Local particle sets keyed by cube id
        t, step: Simulation time and completed steps
        mode: lossless | lossy
        tol: Lossy error tolerance relative to each field's global value range
        extras: JSON-serializable solver history keys
        parallel: Offset-addressed writes by every rank

    Returns:
        File size in bytes

    Raises:
        ValueError: unknown mode
        OSError: storage failure
    """
    if mode not in ("lossless", "lossy"):
        raise ValueError(f"checkpoint mode must be lossless or lossy, got {mode!r}")
    path = Path(path)
    comm = ctx.comm
    gids = list(fields[0].gids) if fields else sorted(sets)

    descriptors: List[FieldDescriptor] = []
    streams: List[Dict[int, bytes]] = []
    for fld in fields:
        desc = FieldDescriptor(name=fld.name, qid=fld.qid, quantity=fld.quantity, n_components=fld.n_components)
        q = None
        if mode == "lossy":
            value_range = _value_range(ctx, fld)
            q = choose_q(tol, value_range)
            desc.mode, desc.q, desc.value_range = "lossy", q, value_range
        descriptors.append(desc)
        streams.append(compress_field(ctx, fld, q))

    payloads: Dict[int, bytes] = {}
    sizes: Dict[int, Tuple[List[int], int]] = {}
    for g in gids:
        block, count = pack_particles(sets.get(g))
        parts = [s[g] for s in streams]
        payloads[g] = b"".join(parts) + block
        sizes[g] = ([len(p) for p in parts], count)
    all_sizes: Dict[int, Tuple[List[int], int]] = {}
    for part in comm.allgather(sizes):
        all_sizes.update(part)

    halo = fields[0].halo_width if fields else HALO_WIDTH
    header = _build_header(mesh, descriptors, all_sizes, halo, t, step, dict(extras or {}))
    head = canonical_json(header)
    preamble = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(head))
    data_start = len(preamble) + len(head)
    offsets = {rec.gid: rec.offset for rec in header.cubes}
    tmp = path.with_name(path.name + ".part")

    if ctx.rank == 0:
        path.parent.mkdir(parents=True, exist_ok=True)
    if parallel:
        if ctx.rank == 0:
            with open(tmp, "wb") as fh:
                fh.write(preamble + head)
                fh.truncate(data_start + header.payload_length)
        comm.barrier()
        if payloads:
            with open(tmp, "r+b") as fh:
                for g in gids:
                    fh.seek(data_start + offsets[g])
                    fh.write(payloads[g])
        comm.barrier()
    else:
        gathered = comm.allgather(payloads)
        if ctx.rank == 0:
            merged: Dict[int, bytes] = {}
            for part in gathered:
                merged.update(part)
            with open(tmp, "wb") as fh:
                fh.write(preamble + head)
                for g in range(mesh.n_cubes):
                    fh.write(merged[g])

    size = data_start + header.payload_length + CHECKSUM_BYTES
    if ctx.rank == 0:
        digest = _file_checksum(tmp, data_start + header.payload_length)
        with open(tmp, "ab") as fh:
            fh.write(digest)
        os.replace(tmp, path)
        logger.info(
            "checkpoint written path={} step={} mode={} cubes={} bytes={}",
            path, step, mode, mesh.n_cubes, size,
        )
    comm.barrier()
    return size


def verify_checkpoint(path: str | Path) -> Tuple[CheckpointHeader, int]:
    """
    Check magic, version, header and checksum of a checkpoint file.

    Returns:
        (header, byte position of the payload)

    Raises:
        CheckpointError: the file is not an intact checkpoint
    """
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as fh:
            pre = fh.read(_PREAMBLE.size)
            if len(pre) != _PREAMBLE.size:
                raise CheckpointError(f"{path}: truncated preamble ({size} bytes)")
            magic, version, head_len = _PREAMBLE.unpack(pre)
            if magic != MAGIC:
                raise CheckpointError(f"{path}: bad magic {magic!r}")
            if version != FORMAT_VERSION:
                raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
            if _PREAMBLE.size + head_len + CHECKSUM_BYTES > size:
                raise CheckpointError(f"{path}: truncated header (claims {head_len} bytes, file has {size})")
            head = fh.read(head_len)
            fh.seek(size - CHECKSUM_BYTES)
            stored = fh.read(CHECKSUM_BYTES)
    except FileNotFoundError as exc:
        raise CheckpointError(f"Checkpoint not found: {path}") from exc
    if _file_checksum(path, size - CHECKSUM_BYTES) != stored:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    try:
        header = CheckpointHeader.model_validate_json(head)
    except ValidationError as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    data_start = _PREAMBLE.size + head_len
    if data_start + header.payload_length + CHECKSUM_BYTES != size:
        raise CheckpointError(
            f"{path}: payload length {header.payload_length} inconsistent with file size {size}"
        )
    if [r.gid for r in header.cubes] != list(range(header.n_cubes)):
        raise CheckpointError(f"{path}: cube records not in global-id order")
    return header, data_start


def read_checkpoint(ctx: RankContext, path: str | Path) -> CheckpointState:
    """
    Read a checkpoint on the current rank count (collective).

    Rank 0 verifies the file and broadcasts the header; every rank then rebuilds the mesh,
    takes the linear distribution of the header's cube count and reads only its cubes.

    Raises:
        CheckpointError: on every rank when the file is rejected
    """
    path = Path(path)
    verdict: Optional[Tuple[str, Any]] = None
    if ctx.rank == 0:
        try:
            header, data_start = verify_checkpoint(path)
            verdict = ("ok", (canonical_json(header), data_start))
        except CheckpointError as exc:
            verdict = ("error", str(exc))
    status, body = ctx.comm.bcast(verdict, root=0)
    if status != "ok":
        raise CheckpointError(body)
    head, data_start = body
    header = CheckpointHeader.model_validate_json(head)

    mesh = from_leaves(
        header.origin, header.root_edge, header.root_dims, header.max_level, header.n_cells_per_edge,
        header.periodic, [(r.level, r.lattice) for r in header.cubes],
    )
    for r in header.cubes:
        if tuple(mesh.cubes[r.gid].lattice) != tuple(r.lattice):
            raise CheckpointError(f"{path}: cube {r.gid} does not match the rebuilt mesh ordering")
    dist = linear_distribution(header.n_cubes, ctx.size)
    gids = dist.local_gids(ctx.rank)

    raw: Dict[int, bytes] = {}
    if gids:
        with open(path, "rb") as fh:
            for g in gids:
                rec = header.cubes[g]
                end = rec.particle_offset + rec.n_particles * PARTICLE_RECORD_BYTES
                fh.seek(data_start + rec.offset)
                raw[g] = fh.read(end - rec.offset)

    n = header.n_cells_per_edge
    fields: Dict[str, CubeField] = {}
    for k, desc in enumerate(header.fields):
        fld = CubeField.allocate(desc.name, desc.qid, gids, n, desc.n_components, desc.quantity, header.halo_width)

        def decode(g: int, k: int = k) -> np.ndarray:
            rec = header.cubes[g]
            start = sum(rec.lengths[:k])
            return decompress_cube(raw[g][start:start + rec.lengths[k]])

        for g, values in zip(gids, ctx.strided(gids, decode)):
            if values.shape != fld.cube(g).shape:
                raise CheckpointError(f"{path}: field {desc.name} of cube {g} has shape {values.shape}")
            fld.cube(g)[...] = values
        fields[desc.name] = fld

    sets: Dict[int, ParticleSet] = {}
    for g in gids:
        rec = header.cubes[g]
        start = rec.particle_offset - rec.offset
        sets[g] = unpack_particles(g, raw[g][start:], rec.n_particles)

    ctx.log.debug("checkpoint read path={} cubes={} step={}", path, len(gids), header.step)
    return CheckpointState(header=header, mesh=mesh, dist=dist, fields=fields, sets=sets)
