"""
Mesh Service - Build Building-Cube meshes and answer geometric queries

Generation works on (level, i, j, k) leaf keys where (i, j, k) indexes the level's uniform
grid of cubes. Refinement splits leaves until every refine region is covered at its target
level; grading then splits any leaf that has a face neighbor more than one level finer.
All decisions are integer arithmetic on the finest-cube lattice.
"""
from __future__ import annotations
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from loguru import logger

from ..errors import MeshGenerationError, MeshStructureError
from ..models.case import RefineBox
from ..models.mesh import BcmMesh, Cube, N_FACES, face_axis, face_side

LeafKey = Tuple[int, int, int, int]
Region = Union[RefineBox, Tuple[Sequence[float], Sequence[float], int]]

# Relative slack when checking that the domain tiles into whole root cubes
_TILE_EPS = 1e-9


def morton_key(i: int, j: int, k: int) -> int:
    """Interleave lattice coordinate bits, x in the lowest position"""
    key = 0
    bit = 0
    while i or j or k:
        key |= (i & 1) << (3 * bit)
        key |= (j & 1) << (3 * bit + 1)
        key |= (k & 1) << (3 * bit + 2)
        i >>= 1
        j >>= 1
        k >>= 1
        bit += 1
    return key


def _as_region(r: Region) -> Tuple[np.ndarray, np.ndarray, int]:
    if isinstance(r, RefineBox):
        return np.asarray(r.lower, float), np.asarray(r.upper, float), r.level
    lower, upper, level = r
    return np.asarray(lower, float), np.asarray(upper, float), int(level)


def _children(key: LeafKey) -> List[LeafKey]:
    l, i, j, k = key
    return [
        (l + 1, 2 * i + dx, 2 * j + dy, 2 * k + dz)
        for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)
    ]


class _LeafSet:
    """Leaf keys of a hierarchy under construction"""

    def __init__(self, root_dims: Tuple[int, int, int], max_level: int, periodic: Tuple[bool, bool, bool]):
        self.root_dims = root_dims
        self.max_level = max_level
        self.periodic = periodic
        self.leaves: Set[LeafKey] = {
            (0, i, j, k)
            for k in range(root_dims[2]) for j in range(root_dims[1]) for i in range(root_dims[0])
        }

    def dims(self, level: int) -> Tuple[int, int, int]:
        return tuple(d << level for d in self.root_dims)  # type: ignore[return-value]

    def split(self, key: LeafKey) -> None:
        self.leaves.discard(key)
        self.leaves.update(_children(key))

    def neighbor_index(self, key: LeafKey, face: int) -> Optional[Tuple[int, int, int]]:
        """Index of the same-level cube across ``face``, wrapped on periodic axes; None at a wall"""
        l = key[0]
        idx = list(key[1:])
        a = face_axis(face)
        idx[a] += 1 if face_side(face) else -1
        n = self.dims(l)[a]
        if idx[a] < 0 or idx[a] >= n:
            if not self.periodic[a]:
                return None
            idx[a] %= n
        return idx[0], idx[1], idx[2]

    def covering(self, level: int, idx: Tuple[int, int, int]) -> Optional[LeafKey]:
        """The leaf at ``level`` or coarser that contains the level-``level`` cell ``idx``"""
        for up in range(level + 1):
            key = (level - up, idx[0] >> up, idx[1] >> up, idx[2] >> up)
            if key in self.leaves:
                return key
        return None


def _refine(leafset: _LeafSet, regions: List[Tuple[np.ndarray, np.ndarray, int]], origin: np.ndarray, unit: float) -> None:
    """Split leaves until each region's overlap is at or above its target level"""
    if not regions:
        return
    lo_r = np.array([(r[0] - origin) / unit for r in regions])
    hi_r = np.array([(r[1] - origin) / unit for r in regions])
    lv_r = np.array([r[2] for r in regions], dtype=np.int64)
    L = leafset.max_level

    work = sorted(leafset.leaves)
    while work:
        key = work.pop()
        l = key[0]
        s = 1 << (L - l)
        lo = np.array(key[1:], dtype=np.float64) * s
        hi = lo + s
        # positive-volume overlap only; touching a face does not count
        hit = np.all(lo_r < hi, axis=1) & np.all(hi_r > lo, axis=1)
        if not hit.any():
            continue
        if int(lv_r[hit].max()) > l:
            leafset.split(key)
            work.extend(_children(key))


def _grade(leafset: _LeafSet) -> int:
    """Split leaves until face neighbors differ by at most one level; returns the split count"""
    splits = 0
    while True:
        to_split: Set[LeafKey] = set()
        for key in leafset.leaves:
            l = key[0]
            if l < 2:
                continue
            for face in range(N_FACES):
                nidx = leafset.neighbor_index(key, face)
                if nidx is None:
                    continue
                cover = leafset.covering(l, nidx)
                if cover is not None and cover[0] < l - 1:
                    to_split.add(cover)
        if not to_split:
            return splits
        for key in sorted(to_split):
            if key in leafset.leaves:
                leafset.split(key)
                splits += 1


def _assemble(
    origin: Sequence[float],
    root_edge: float,
    root_dims: Tuple[int, int, int],
    max_level: int,
    n_cells_per_edge: int,
    periodic: Tuple[bool, bool, bool],
    leaves: Iterable[LeafKey],
) -> BcmMesh:
    """Z-order the leaves, create cubes and build adjacency"""
    L = max_level
    records = []
    for (l, i, j, k) in leaves:
        s = 1 << (L - l)
        lat = (i * s, j * s, k * s)
        records.append((morton_key(*lat), l, lat))
    records.sort()

    unit = root_edge / (1 << L)
    cubes: List[Cube] = []
    for gid, (_, l, lat) in enumerate(records):
        edge = root_edge / (1 << l)
        dx = edge / n_cells_per_edge
        cubes.append(Cube(
            global_id=gid,
            level=l,
            lattice=lat,
            base_corner=tuple(float(origin[a]) + lat[a] * unit for a in range(3)),
            edge_length=edge,
            cell_spacing=(dx, dx, dx),
        ))
    mesh = BcmMesh(
        origin=tuple(float(o) for o in origin),
        root_edge=root_edge,
        root_dims=root_dims,
        max_level=max_level,
        n_cells_per_edge=n_cells_per_edge,
        periodic=periodic,
        cubes=cubes,
        zorder=list(range(len(cubes))),
    )
    build_adjacency(mesh)
    return mesh


def generate_mesh(
    lower: Sequence[float],
    upper: Sequence[float],
    refine_regions: Sequence[Region] = (),
    n_cells_per_edge: int = 16,
    max_level: Optional[int] = None,
    root_edge: Optional[float] = None,
    periodic: Tuple[bool, bool, bool] = (False, False, False),
) -> BcmMesh:
    """
    Generate a graded, Z-ordered Building-Cube mesh.

    Args:
        lower, upper: Domain box
        refine_regions: RefineBox models or (lower, upper, level) tuples
        n_cells_per_edge: Cells per cube edge (same for every cube)
        max_level: Finest permitted level; defaults to the highest target level
        root_edge: Edge of the level-0 cubes; defaults to the shortest domain extent
        periodic: Per-axis wrap of adjacency and grading

    Returns:
        BcmMesh with adjacency built

    Raises:
        MeshGenerationError: domain not tileable by root cubes, target level above
            max_level, or a region with no volume inside the domain

    Example:
        >>> mesh = generate_mesh((0, 0, 0), (1, 1, 1), [((0.25,) * 3, (0.75,) * 3, 2)], 8)
        >>> mesh.n_levels
        3
    """
    lower_a = np.asarray(lower, dtype=np.float64)
    upper_a = np.asarray(upper, dtype=np.float64)
    extent = upper_a - lower_a
    if np.any(extent <= 0):
        raise MeshGenerationError(f"Empty domain box {tuple(lower)} .. {tuple(upper)}")
    root_edge = float(root_edge) if root_edge is not None else float(extent.min())
    dims_f = extent / root_edge
    root_dims = tuple(int(round(d)) for d in dims_f)
    if any(d < 1 for d in root_dims) or np.any(np.abs(dims_f - np.array(root_dims)) > _TILE_EPS * np.maximum(dims_f, 1)):
        raise MeshGenerationError(
            f"Domain extent {tuple(extent)} is not a whole multiple of root_edge {root_edge}"
        )

    regions = [_as_region(r) for r in refine_regions]
    top = max((r[2] for r in regions), default=0)
    if max_level is None:
        max_level = top
    for lo, hi, level in regions:
        if level > max_level:
            raise MeshGenerationError(f"Refine target level {level} exceeds max_level {max_level}")
        if np.any(hi <= lower_a) or np.any(lo >= upper_a) or np.any(hi <= lo):
            raise MeshGenerationError(
                f"Refine region {tuple(lo)} .. {tuple(hi)} (level {level}) does not intersect the domain "
                f"{tuple(lower_a)} .. {tuple(upper_a)}"
            )

    leafset = _LeafSet(root_dims, max_level, tuple(bool(p) for p in periodic))  # type: ignore[arg-type]
    _refine(leafset, regions, lower_a, root_edge / (1 << max_level))
    splits = _grade(leafset)

    mesh = _assemble(lower_a, root_edge, root_dims, max_level, n_cells_per_edge, leafset.periodic, leafset.leaves)
    logger.info(
        "mesh generated cubes={} levels={} grading_splits={} root_dims={}",
        mesh.n_cubes, mesh.n_levels, splits, root_dims,
    )
    return mesh


def from_leaves(
    origin: Sequence[float],
    root_edge: float,
    root_dims: Tuple[int, int, int],
    max_level: int,
    n_cells_per_edge: int,
    periodic: Tuple[bool, bool, bool],
    leaves: Iterable[Tuple[int, Sequence[int]]],
) -> BcmMesh:
    """Rebuild a mesh from (level, lattice corner) records, e.g. from a checkpoint header"""
    keys = []
    for level, lat in leaves:
        s = 1 << (max_level - level)
        keys.append((int(level), lat[0] // s, lat[1] // s, lat[2] // s))
    return _assemble(origin, root_edge, tuple(root_dims), max_level, n_cells_per_edge, tuple(periodic), keys)


def zorder_sort(mesh: BcmMesh) -> List[int]:
    """Cube ids sorted by the Morton key of their lattice corner"""
    keys = [morton_key(*c.lattice) for c in mesh.cubes]
    return sorted(range(mesh.n_cubes), key=lambda g: keys[g])


def cell_center(cube: Cube, index: Sequence[int]) -> np.ndarray:
    """Center of cell ``index`` (halo indices allowed): x_c + (i + ½)Δx per axis"""
    return np.asarray(cube.base_corner) + (np.asarray(index, dtype=np.float64) + 0.5) * np.asarray(cube.cell_spacing)


def cell_centers(cube: Cube, n: int, h: int = 0) -> np.ndarray:
    """Cell-center coordinates of indices −h..n+h−1, shape (3, m, m, m)"""
    r = np.arange(-h, n + h, dtype=np.float64) + 0.5
    grids = np.meshgrid(r, r, r, indexing="ij")
    return np.stack([cube.base_corner[a] + grids[a] * cube.cell_spacing[a] for a in range(3)])


def locate_many(mesh: BcmMesh, X: np.ndarray) -> np.ndarray:
    """Containing cube id per position (lower-closed extents); −1 outside the domain"""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    s = np.floor(mesh.lattice_coords(X)).astype(np.int64)
    dims = np.asarray(mesh.lattice_dims)
    inside = np.all((s >= 0) & (s < dims), axis=1)
    out = np.full(X.shape[0], -1, dtype=np.int64)
    if inside.any():
        si = s[inside]
        out[inside] = mesh.leaf_grid()[si[:, 0], si[:, 1], si[:, 2]]
    return out


def locate_cube(mesh: BcmMesh, x: Sequence[float]) -> Optional[int]:
    """The cube whose half-open extent contains x, or None outside the domain"""
    g = int(locate_many(mesh, np.asarray(x, dtype=np.float64).reshape(1, 3))[0])
    return None if g < 0 else g


def build_adjacency(mesh: BcmMesh) -> List[List[List[int]]]:
    """
    Fill every cube's per-face neighbor list and return the table.

    A face lists one same-level cube, one coarser cube, the four finer cubes touching it
    (ascending ids), or nothing at a non-periodic domain boundary.

    Raises:
        MeshStructureError: a face whose neighbors are neither of the above (grading violated)
    """
    dims0 = mesh.root_dims
    table: List[List[List[int]]] = []
    for cube in mesh.cubes:
        l = cube.level
        s = cube.lattice_size(mesh.max_level)
        idx = [cube.lattice[a] // s for a in range(3)]
        faces: List[List[int]] = []
        for face in range(N_FACES):
            a, side = face_axis(face), face_side(face)
            nidx = list(idx)
            nidx[a] += 1 if side else -1
            n_l = dims0[a] << l
            if nidx[a] < 0 or nidx[a] >= n_l:
                if not mesh.periodic[a]:
                    faces.append([])
                    continue
                nidx[a] %= n_l
            same = mesh.leaf_id(l, tuple(nidx))
            if same is not None:
                faces.append([same])
                continue
            if l > 0:
                coarse = mesh.leaf_id(l - 1, (nidx[0] >> 1, nidx[1] >> 1, nidx[2] >> 1))
                if coarse is not None:
                    faces.append([coarse])
                    continue
            fine: List[int] = []
            near = 0 if side else 1
            b, c = [ax for ax in range(3) if ax != a]
            for ob in (0, 1):
                for oc in (0, 1):
                    child = [0, 0, 0]
                    child[a] = 2 * nidx[a] + near
                    child[b] = 2 * nidx[b] + ob
                    child[c] = 2 * nidx[c] + oc
                    g = mesh.leaf_id(l + 1, tuple(child))
                    if g is not None:
                        fine.append(g)
            if len(fine) != 4:
                raise MeshStructureError(
                    f"Cube {cube.global_id} (level {l}) face {face}: neighbors differ by more than one level"
                )
            faces.append(sorted(fine))
        cube.neighbors = faces
        table.append(faces)
    return table


def refine_near_surface(
    vertices: np.ndarray, triangles: np.ndarray, distance: float, level: int
) -> List[RefineBox]:
    """One refine box per triangle: its bounding box inflated by ``distance``"""
    p = np.asarray(vertices, dtype=np.float64)[np.asarray(triangles, dtype=np.int64)]
    lo = p.min(axis=1) - distance
    hi = p.max(axis=1) + distance
    return [RefineBox(lower=tuple(lo[t]), upper=tuple(hi[t]), level=level) for t in range(lo.shape[0])]


def clip_regions(regions: Sequence[RefineBox], lower: Sequence[float], upper: Sequence[float]) -> List[RefineBox]:
    """Clip boxes to the domain, dropping those with no volume inside it"""
    out = []
    for r in regions:
        lo = np.maximum(r.lower, lower)
        hi = np.minimum(r.upper, upper)
        if np.all(hi > lo):
            out.append(RefineBox(lower=tuple(lo), upper=tuple(hi), level=r.level))
    return out


def check_grading(mesh: BcmMesh) -> int:
    """Largest level difference across any face (≤ 1 on a valid mesh)"""
    worst = 0
    for c in mesh.cubes:
        for nbrs in c.neighbors:
            for g in nbrs:
                worst = max(worst, abs(mesh.cubes[g].level - c.level))
    return worst


def mesh_stats(mesh: BcmMesh) -> Dict[str, object]:
    """Cubes, cells and spacing per level plus totals"""
    n3 = mesh.n_cells_per_edge ** 3
    levels = []
    for l in range(mesh.n_levels):
        count = sum(1 for c in mesh.cubes if c.level == l)
        levels.append({
            "level": l,
            "cubes": count,
            "cells": count * n3,
            "dx": mesh.root_edge / (1 << l) / mesh.n_cells_per_edge,
        })
    return {
        "cubes": mesh.n_cubes,
        "cells": mesh.n_cubes * n3,
        "n_cells_per_edge": mesh.n_cells_per_edge,
        "root_dims": list(mesh.root_dims),
        "bounding_box": [list(b) for b in mesh.bounding_box],
        "levels": levels,
    }
