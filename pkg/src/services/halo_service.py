"""
Halo Service - Fill and accumulate cube halos across cubes and ranks

Every halo cell is written by exactly one transfer: the cube across the face supplies it by
copy (same level), injection (coarser neighbor, piecewise constant) or an ordered 8-cell
average (finer neighbor). Transfers are grouped into passes:

    face mode    one pass, all three axes, transverse extent = interior
    corner mode  x, then y, then z; later passes also cover the halo cells of earlier axes,
                 so edge and corner halos are filled without diagonal messages

Transfers are keyed (dst cube, face, src cube) and always processed in key order, so results
do not depend on the rank count, the worker count or message arrival order.

Concurrency:
    exchange_begin runs on all T workers of a rank. The first worker to claim the pack role
    posts receives, packs and sends; every worker then drains the on-rank transfers.
    exchange_finalize polls test_some and unpacks arrivals in any order (cells are disjoint).
"""
from __future__ import annotations
import threading
from dataclasses import dataclass, field as dc_field
from itertools import product
from typing import Callable, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from ..errors import HaloContractError
from ..infra.transport import MessageHandle
from ..infra.workers import RankContext
from ..models.decomp import Distribution
from ..models.field import CubeField
from ..models.mesh import BcmMesh, N_FACES, face_axis, face_side

Mode = Literal["face", "corner"]
TransferKind = Literal["copy", "inject", "average"]

# Tag layout: quantity id | 16-bit epoch | pass id (reverse passes offset by 8)
_EPOCH_BITS = 16
_PASS_BITS = 4
_REVERSE_PASS = 8

# Reverse factors: transpose of the forward transfer in the volume-weighted inner product
_REVERSE_FACTOR = {"copy": 1.0, "inject": 0.125, "average": 1.0}

_AVG_OFFSETS = list(product((0, 1), (0, 1), (0, 1)))


class PassSpec(NamedTuple):
    """Axes whose faces are exchanged in this pass, and transverse axes filled over their halo too"""
    pass_id: int
    normal_axes: Tuple[int, ...]
    full_axes: Tuple[int, ...]


FACE_PASSES = (PassSpec(0, (0, 1, 2), ()),)
CORNER_PASSES = (
    PassSpec(0, (0,), ()),
    PassSpec(1, (1,), (0,)),
    PassSpec(2, (2,), (0, 1)),
)

BoundaryFill = Callable[[CubeField, PassSpec], None]


def passes_for(mode: Mode) -> Tuple[PassSpec, ...]:
    if mode == "face":
        return FACE_PASSES
    if mode == "corner":
        return CORNER_PASSES
    raise ValueError(f"Unknown exchange mode '{mode}'")


def slab_ranges(face: int, n: int, h: int, spec: PassSpec) -> List[np.ndarray]:
    """Cell index ranges (per axis) of the halo slab behind ``face`` in pass ``spec``"""
    a, side = face_axis(face), face_side(face)
    ranges = []
    for b in range(3):
        if b == a:
            ranges.append(np.arange(n, n + h) if side else np.arange(-h, 0))
        elif b in spec.full_axes:
            ranges.append(np.arange(-h, n + h))
        else:
            ranges.append(np.arange(0, n))
    return ranges


@dataclass(frozen=True)
class Transfer:
    """
    One (dst, face, src) halo recipe.

    dst_idx are flat indices into the dst cube's m³ array; src_idx are flat indices into the
    src cube's array, shape (K,) for copy/inject and (K, 8) for average.
    """
    dst: int
    face: int
    src: int
    kind: str
    dst_idx: np.ndarray
    src_idx: np.ndarray

    @property
    def key(self) -> Tuple[int, int, int]:
        return (self.dst, self.face, self.src)

    @property
    def size(self) -> int:
        return int(self.dst_idx.shape[0])


def _flat(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, m: int, h: int) -> np.ndarray:
    return ((ix + h) * m + (iy + h)) * m + (iz + h)


def _build_transfers(mesh: BcmMesh, n: int, h: int, spec: PassSpec) -> List[Transfer]:
    L = mesh.max_level
    m = n + 2 * h
    out: List[Transfer] = []
    for D in mesh.cubes:
        sD = D.lattice_size(L)
        for face in range(N_FACES):
            a, side = face_axis(face), face_side(face)
            if a not in spec.normal_axes or not D.neighbors[face]:
                continue
            grids = np.meshgrid(*slab_ranges(face, n, h, spec), indexing="ij")
            I = [g.ravel().astype(np.int64) for g in grids]
            dst_flat_all = _flat(I[0], I[1], I[2], m, h)
            for sg in D.neighbors[face]:
                S = mesh.cubes[sg]
                if S.level == D.level:
                    src = list(I)
                    src[a] = I[a] - n if side else I[a] + n
                    src = [src[b] if b == a else np.clip(src[b], -h, n + h - 1) for b in range(3)]
                    out.append(Transfer(D.global_id, face, sg, "copy", dst_flat_all, _flat(*src, m, h)))
                elif S.level == D.level - 1:
                    # positions in dst-cell units; src cube spans 2n of them
                    cD = [D.lattice[b] * n // sD for b in range(3)]
                    cS = [S.lattice[b] * n // sD for b in range(3)]
                    cS[a] = cD[a] + n if side else cD[a] - 2 * n
                    src = [(cD[b] + I[b] - cS[b]) // 2 for b in range(3)]
                    src = [
                        np.clip(src[b], 0, n - 1) if b == a else np.clip(src[b], -h, n + h - 1)
                        for b in range(3)
                    ]
                    out.append(Transfer(D.global_id, face, sg, "inject", dst_flat_all, _flat(*src, m, h)))
                elif S.level == D.level + 1:
                    sS = S.lattice_size(L)
                    # positions in src-cell units; dst cube spans 2n of them
                    cD = [D.lattice[b] * n // sS for b in range(3)]
                    cS = [S.lattice[b] * n // sS for b in range(3)]
                    cS[a] = cD[a] + 2 * n if side else cD[a] - n
                    mask = np.ones(I[0].shape[0], dtype=bool)
                    for b in range(3):
                        if b == a:
                            continue
                        centre = cD[b] + 2 * np.clip(I[b], 0, n - 1)
                        mask &= (centre >= cS[b]) & (centre < cS[b] + n)
                    Ib = [I[b][mask] for b in range(3)]
                    base = [cD[b] + 2 * Ib[b] - cS[b] for b in range(3)]
                    base = [
                        np.clip(base[b], 0, n - 2) if b == a else np.clip(base[b], -h, n + h - 2)
                        for b in range(3)
                    ]
                    idx8 = np.stack(
                        [_flat(base[0] + ox, base[1] + oy, base[2] + oz, m, h) for ox, oy, oz in _AVG_OFFSETS],
                        axis=1,
                    )
                    out.append(Transfer(D.global_id, face, sg, "average", dst_flat_all[mask], idx8))
                else:
                    raise HaloContractError(
                        f"Cube {D.global_id} face {face}: neighbor {sg} is {abs(S.level - D.level)} levels away"
                    )
    out.sort(key=lambda t: t.key)
    return out


def global_transfers(mesh: BcmMesh, n: int, h: int, mode: Mode) -> List[List[Transfer]]:
    """Transfers of every pass for the whole mesh (memoized on the mesh)"""
    return mesh.cached(
        ("halo_transfers", n, h, mode),
        lambda: [_build_transfers(mesh, n, h, spec) for spec in passes_for(mode)],
    )


def gather_values(arr: np.ndarray, tr: Transfer) -> np.ndarray:
    """Source values of a transfer, shape (C, K); ``arr`` is the src cube as (C, m³)"""
    if tr.kind != "average":
        return arr[:, tr.src_idx]
    v = arr[:, tr.src_idx]
    acc = v[:, :, 0].copy()
    for j in range(1, 8):
        acc += v[:, :, j]
    acc *= 0.125
    return acc


def scatter_add(arr: np.ndarray, tr: Transfer, vals: np.ndarray) -> None:
    """Transpose of a transfer: add dst halo values back into the src cube (C, m³)"""
    f = _REVERSE_FACTOR[tr.kind]
    v = vals * f if f != 1.0 else vals
    if tr.kind == "average":
        for j in range(8):
            np.add.at(arr, (slice(None), tr.src_idx[:, j]), v)
    else:
        np.add.at(arr, (slice(None), tr.src_idx), v)


def fine_to_coarse(values: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    """Weighted combination of a 2×2×2 fine block; uniform 1/8 weights by default"""
    v = np.asarray(values, dtype=np.float64).reshape(8)
    if weights is None:
        acc = v[0]
        for j in range(1, 8):
            acc += v[j]
        return float(acc * 0.125)
    w = np.asarray(weights, dtype=np.float64).reshape(8)
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"fine_to_coarse weights must sum to 1, got {w.sum()}")
    return float(np.dot(w, v))


def coarse_to_fine(value: float) -> np.ndarray:
    """Piecewise-constant injection of one coarse value into a 2×2×2 block"""
    return np.full((2, 2, 2), float(value))


def classify_zones(mesh: BcmMesh, dist: Distribution) -> Dict[int, str]:
    """'internal' when every face neighbor is on the same rank, else 'external'"""
    zones = {}
    for c in mesh.cubes:
        r = dist.owner(c.global_id)
        ext = any(dist.owner(g) != r for nbrs in c.neighbors for g in nbrs)
        zones[c.global_id] = "external" if ext else "internal"
    return zones


@dataclass
class PassPlan:
    spec: PassSpec
    local: List[Transfer] = dc_field(default_factory=list)
    send: Dict[int, List[Transfer]] = dc_field(default_factory=dict)
    recv: Dict[int, List[Transfer]] = dc_field(default_factory=dict)


@dataclass
class ExchangePlan:
    """Per-rank exchange recipes for one cube resolution and mode"""
    mode: str
    n_cells: int
    passes: List[PassPlan]

    def recipe_count(self) -> int:
        return sum(
            len(pp.local) + sum(len(v) for v in pp.recv.values())
            for pp in self.passes
        )


@dataclass
class ExchangeToken:
    field: CubeField
    plan: ExchangePlan
    epoch: int
    bc: Optional[BoundaryFill]
    next_pass: int = 0
    handles: List[MessageHandle] = dc_field(default_factory=list)
    groups: List[List[Transfer]] = dc_field(default_factory=list)
    done: bool = False


class HaloExchanger:
    """
    Halo exchange of CubeFields for one rank.

    Key features:
    - Exchange plans per (cells per edge, mode), built from mesh-wide memoized transfers
    - Overlappable exchange_begin / exchange_finalize with pack-role claiming
    - reverse_exchange: transpose accumulation used after force spreading
    - Internal / external zones of the local cubes

    Args:
        mesh: Shared mesh
        dist: Current distribution
        ctx: The rank's context (communicator and worker pool)
    """

    def __init__(self, mesh: BcmMesh, dist: Distribution, ctx: RankContext, halo_width: int = 2):
        self.mesh = mesh
        self.ctx = ctx
        self.h = halo_width
        self._plans: Dict[Tuple[int, str], ExchangePlan] = {}
        self.rebuild(dist)

    # -- plans and zones -----------------------------------------------------

    def rebuild(self, dist: Distribution) -> None:
        """Adopt a new distribution; plans and zones are recomputed lazily"""
        self.dist = dist
        self.gids = dist.local_gids(self.ctx.rank)
        self._plans.clear()
        zones = classify_zones(self.mesh, dist)
        self.zones = {g: zones[g] for g in self.gids}
        self.internal_rows = np.array([r for r, g in enumerate(self.gids) if zones[g] == "internal"], dtype=np.int64)
        self.external_rows = np.array([r for r, g in enumerate(self.gids) if zones[g] == "external"], dtype=np.int64)
        self.all_rows = np.arange(len(self.gids), dtype=np.int64)

    def plan(self, n: int, mode: Mode = "face") -> ExchangePlan:
        key = (n, mode)
        if key not in self._plans:
            rank = self.ctx.rank
            owner = self.dist.owner
            passes = []
            for spec, transfers in zip(passes_for(mode), global_transfers(self.mesh, n, self.h, mode)):
                pp = PassPlan(spec)
                for tr in transfers:
                    od, os_ = owner(tr.dst), owner(tr.src)
                    if od == rank and os_ == rank:
                        pp.local.append(tr)
                    elif od == rank:
                        pp.recv.setdefault(os_, []).append(tr)
                    elif os_ == rank:
                        pp.send.setdefault(od, []).append(tr)
                passes.append(pp)
            self._plans[key] = ExchangePlan(mode=mode, n_cells=n, passes=passes)
        return self._plans[key]

    @staticmethod
    def _tag(field: CubeField, epoch: int, pass_id: int) -> int:
        return (field.qid << (_EPOCH_BITS + _PASS_BITS)) | ((epoch & 0xFFFF) << _PASS_BITS) | pass_id

    def _check_field(self, field: CubeField) -> None:
        if field.gids != self.gids:
            raise HaloContractError(f"Field '{field.name}' rows do not match the rank's cubes")

    # -- forward exchange ----------------------------------------------------

    def _apply_local(self, field: CubeField, tr: Transfer) -> None:
        C = field.n_components
        src = field.data[field.row(tr.src)].reshape(C, -1)
        dst = field.data[field.row(tr.dst)].reshape(C, -1)
        dst[:, tr.dst_idx] = gather_values(src, tr)

    def _start_pass(self, token: ExchangeToken) -> None:
        field = token.field
        pp = token.plan.passes[token.next_pass]
        comm = self.ctx.comm
        tag = self._tag(field, token.epoch, pp.spec.pass_id)
        C = field.n_components
        claim = threading.Lock()
        claimed = [False]
        token.handles, token.groups = [], []
        T = self.ctx.threads

        def pack_and_post() -> None:
            for q in sorted(pp.recv):
                token.handles.append(comm.post_recv(q, tag))
                token.groups.append(pp.recv[q])
            for q in sorted(pp.send):
                parts = [
                    gather_values(field.data[field.row(tr.src)].reshape(C, -1), tr).ravel()
                    for tr in pp.send[q]
                ]
                comm.post_send(q, tag, np.concatenate(parts).tobytes())

        def task(w: int) -> None:
            with claim:
                mine = not claimed[0]
                claimed[0] = True
            if mine:
                pack_and_post()
            for i in range(w, len(pp.local), T):
                self._apply_local(field, pp.local[i])

        self.ctx.run_workers(task)
        if token.bc is not None:
            token.bc(field, pp.spec)

    def _complete_pass(self, token: ExchangeToken) -> None:
        field = token.field
        C = field.n_components
        comm = self.ctx.comm
        pending = len(token.handles)
        while pending:
            for i in comm.test_some(token.handles):
                vals = np.frombuffer(token.handles[i].payload, dtype=np.float64)
                pos = 0
                for tr in token.groups[i]:
                    k = C * tr.size
                    dst = field.data[field.row(tr.dst)].reshape(C, -1)
                    dst[:, tr.dst_idx] = vals[pos:pos + k].reshape(C, tr.size)
                    pos += k
                if pos != vals.shape[0]:
                    raise HaloContractError(
                        f"Field '{field.name}': halo payload of {vals.shape[0]} values, expected {pos}"
                    )
                pending -= 1
            if pending:
                comm.wait_progress()
        token.next_pass += 1

    def exchange_begin(self, field: CubeField, mode: Mode = "face", bc: Optional[BoundaryFill] = None) -> ExchangeToken:
        """
        Start a halo exchange of ``field``.

        On return every halo cell whose source is on this rank is valid and, when ``bc``
        is given, the boundary halos of the first pass are filled.

        Raises:
            HaloContractError: the previous exchange of this field was not finalized
        """
        self._check_field(field)
        epoch = field.begin_epoch()
        token = ExchangeToken(field=field, plan=self.plan(field.n_cells, mode), epoch=epoch, bc=bc)
        self._start_pass(token)
        return token

    def exchange_finalize(self, token: ExchangeToken) -> None:
        """Receive and unpack the remaining halo data, then run any further passes"""
        if token.done:
            return
        self._complete_pass(token)
        while token.next_pass < len(token.plan.passes):
            self._start_pass(token)
            self._complete_pass(token)
        token.done = True
        token.field.end_epoch()

    def exchange(self, field: CubeField, mode: Mode = "face", bc: Optional[BoundaryFill] = None) -> None:
        self.exchange_finalize(self.exchange_begin(field, mode, bc))

    def exchange_and_compute(
        self,
        field: CubeField,
        kernel: Callable[[np.ndarray], None],
        bc: Optional[BoundaryFill] = None,
        overlap: bool = True,
    ) -> None:
        """
        Face-exchange ``field`` and run ``kernel(rows)`` over every local row.

        Overlapped: internal rows run between exchange_begin and exchange_finalize,
        external rows after it. Plain: exchange, then all rows. The kernel must only
        write the rows it is given, so both orders give the same bits.
        """
        if overlap:
            token = self.exchange_begin(field, "face", bc)
            self.ctx.map_rows(kernel, self.internal_rows)
            self.exchange_finalize(token)
            self.ctx.map_rows(kernel, self.external_rows)
        else:
            self.exchange(field, "face", bc)
            self.ctx.map_rows(kernel, self.all_rows)

    # -- reverse exchange ----------------------------------------------------

    def reverse_exchange(self, field: CubeField, mode: Mode = "corner") -> None:
        """
        Add every halo cell's value into the cell it mirrors, then zero all halos.

        Passes run in reverse order. Contributions to a cube are applied in transfer-key
        order whether they come from this rank or another.
        """
        self._check_field(field)
        epoch = field.begin_epoch()
        plan = self.plan(field.n_cells, mode)
        comm = self.ctx.comm
        C = field.n_components

        def take(tr: Transfer) -> np.ndarray:
            dst = field.data[field.row(tr.dst)].reshape(C, -1)
            vals = dst[:, tr.dst_idx].copy()
            dst[:, tr.dst_idx] = 0.0
            return vals

        for pp in reversed(plan.passes):
            tag = self._tag(field, epoch, pp.spec.pass_id + _REVERSE_PASS)
            peers = sorted(pp.send)
            handles = [comm.post_recv(q, tag) for q in peers]
            contributions: List[Tuple[Tuple[int, int, int], Transfer, np.ndarray]] = [
                (tr.key, tr, take(tr)) for tr in pp.local
            ]
            for q in sorted(pp.recv):
                parts = [take(tr).ravel() for tr in pp.recv[q]]
                comm.post_send(q, tag, np.concatenate(parts).tobytes())
            comm.wait_all(handles)
            for q, hnd in zip(peers, handles):
                vals = np.frombuffer(hnd.payload, dtype=np.float64)
                pos = 0
                for tr in pp.send[q]:
                    k = C * tr.size
                    contributions.append((tr.key, tr, vals[pos:pos + k].reshape(C, tr.size)))
                    pos += k
            contributions.sort(key=lambda c: c[0])
            for _, tr, vals in contributions:
                scatter_add(field.data[field.row(tr.src)].reshape(C, -1), tr, vals)

        field.zero_halos()
        field.end_epoch()

    def log_plan(self, n: int, mode: Mode = "face") -> None:
        plan = self.plan(n, mode)
        peers = sorted({q for pp in plan.passes for q in list(pp.send) + list(pp.recv)})
        logger.bind(rank=self.ctx.rank).debug(
            "halo plan n={} mode={} recipes={} peers={} internal={} external={}",
            n, mode, plan.recipe_count(), peers, len(self.internal_rows), len(self.external_rows),
        )
