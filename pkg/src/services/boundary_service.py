"""
Boundary Service - Ghost values on domain-boundary faces

Ghost layer g (1..h) behind a face mirrors interior layer g−1:
    no_slip   u_ghost = −u_mirror
    slip      normal component odd, tangential components even
    inflow    u_ghost = 2·u0 − u_mirror (face average equals u0)
    outflow   even
    scalars   even (zero normal gradient)
Fills use the transverse extents of the current exchange pass so edge cells are written
exactly once and always from valid data.
"""
from __future__ import annotations
from typing import Dict, List, Tuple

import numpy as np

from ..models.case import BoundaryConfig
from ..models.field import CubeField
from ..models.mesh import BcmMesh, N_FACES, face_axis, face_side
from .halo_service import PassSpec


def _slab(a: int, layer, spec: PassSpec, n: int, h: int) -> Tuple:
    sl = []
    for b in range(3):
        if b == a:
            sl.append(layer)
        elif b in spec.full_axes:
            sl.append(slice(None))
        else:
            sl.append(slice(h, h + n))
    return tuple(sl)


def ghost_layers(face: int, n: int, h: int) -> List[Tuple[int, int]]:
    """(ghost array index, mirror array index) pairs behind ``face``"""
    if face_side(face):
        return [(h + n - 1 + g, h + n - g) for g in range(1, h + 1)]
    return [(h - g, h + g - 1) for g in range(1, h + 1)]


class BoundaryFiller:
    """
    Per-rank boundary ghost fills for velocity, scalar and force fields.

    Args:
        mesh: Shared mesh
        gids: Local cube ids (field row order)
        config: Per-face boundary conditions
    """

    def __init__(self, mesh: BcmMesh, gids: List[int], config: BoundaryConfig):
        self.mesh = mesh
        self.config = config
        self.rebuild(gids)

    def rebuild(self, gids: List[int]) -> None:
        # face -> local rows whose cube has no neighbor there
        self.rows: Dict[int, List[int]] = {f: [] for f in range(N_FACES)}
        for r, g in enumerate(gids):
            cube = self.mesh.cubes[g]
            for f in range(N_FACES):
                if cube.is_boundary(f):
                    self.rows[f].append(r)

    def velocity(self, field: CubeField, spec: PassSpec) -> None:
        n, h = field.n_cells, field.halo_width
        for f in range(N_FACES):
            a = face_axis(f)
            if a not in spec.normal_axes or not self.rows[f]:
                continue
            bc = self.config.face(f)
            u0 = np.asarray(bc.velocity, dtype=np.float64)
            for r in self.rows[f]:
                arr = field.data[r]
                for ghost, mirror in ghost_layers(f, n, h):
                    gs, ms = _slab(a, ghost, spec, n, h), _slab(a, mirror, spec, n, h)
                    for c in range(field.n_components):
                        src = arr[c][ms]
                        if bc.kind == "no_slip":
                            arr[c][gs] = -src
                        elif bc.kind == "slip":
                            arr[c][gs] = -src if c == a else src
                        elif bc.kind == "inflow":
                            arr[c][gs] = 2.0 * u0[c] - src
                        else:
                            arr[c][gs] = src

    def even(self, field: CubeField, spec: PassSpec) -> None:
        """Zero-gradient ghosts (pressure, multigrid corrections)"""
        n, h = field.n_cells, field.halo_width
        for f in range(N_FACES):
            a = face_axis(f)
            if a not in spec.normal_axes:
                continue
            for r in self.rows[f]:
                arr = field.data[r]
                for ghost, mirror in ghost_layers(f, n, h):
                    arr[(slice(None),) + _slab(a, ghost, spec, n, h)] = arr[(slice(None),) + _slab(a, mirror, spec, n, h)]

    def zero(self, field: CubeField, spec: PassSpec) -> None:
        n, h = field.n_cells, field.halo_width
        for f in range(N_FACES):
            a = face_axis(f)
            if a not in spec.normal_axes:
                continue
            for r in self.rows[f]:
                arr = field.data[r]
                for ghost, _ in ghost_layers(f, n, h):
                    arr[(slice(None),) + _slab(a, ghost, spec, n, h)] = 0.0

    def face_kinds(self, gid_row: int) -> List[str]:
        """Boundary kind per face of a local row ('' where the face has a neighbor)"""
        return [self.config.face(f).kind if gid_row in self.rows[f] else "" for f in range(N_FACES)]
