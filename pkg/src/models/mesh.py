"""
Building-Cube mesh models

The domain is tiled by cubes of edge ``root_edge / 2**level``; every cube holds the same
n×n×n cells. Cube extents live on an integer lattice whose unit is the finest cube edge
(``root_edge / 2**max_level``), so coverage and adjacency are decided exactly; physical
coordinates are derived from the lattice on demand.

Face numbering:
    face = 2*axis + side, side 0 = low (−axis), side 1 = high (+axis)
"""
from __future__ import annotations
import threading
from typing import Callable, Dict, List, Optional, Tuple, TypeVar

import numpy as np
from pydantic import BaseModel, Field, PrivateAttr

Vec3 = Tuple[float, float, float]
IVec3 = Tuple[int, int, int]

N_FACES = 6

T = TypeVar("T")
_CACHE_LOCK = threading.RLock()


def face_axis(face: int) -> int:
    return face // 2


def face_side(face: int) -> int:
    return face % 2


class Cube(BaseModel):
    """
    One block of the Building-Cube mesh.

    Attributes:
        global_id: Position of the cube on the Z-order curve
        level: Refinement level, 0 = coarsest
        lattice: Lower corner in finest-cube lattice units
        base_corner: Lower corner in length units
        edge_length: root_edge / 2**level
        cell_spacing: edge_length / n_cells_per_edge on every axis
        neighbors: Per face: [] at a domain boundary, [same-level id], [coarser id] or 4 finer ids
    """
    global_id: int
    level: int = Field(ge=0)
    lattice: IVec3
    base_corner: Vec3
    edge_length: float = Field(gt=0)
    cell_spacing: Vec3
    neighbors: List[List[int]] = Field(default_factory=lambda: [[] for _ in range(N_FACES)])

    @property
    def dx(self) -> float:
        return self.cell_spacing[0]

    def lattice_size(self, max_level: int) -> int:
        return 1 << (max_level - self.level)

    def is_boundary(self, face: int) -> bool:
        return len(self.neighbors[face]) == 0


class BcmMesh(BaseModel):
    """
    Immutable cube hierarchy with adjacency and Z-ordering.

    Cubes are stored in Z-order; ``cubes[g].global_id == g``. The mesh is shared read-only
    by every rank thread of a run; the leaf lookup table is built at construction.
    """
    origin: Vec3
    root_edge: float = Field(gt=0)
    root_dims: IVec3
    max_level: int = Field(ge=0)
    n_cells_per_edge: int = Field(ge=2)
    periodic: Tuple[bool, bool, bool] = (False, False, False)
    refinement_ratio: int = 2
    cubes: List[Cube] = Field(default_factory=list)
    zorder: List[int] = Field(default_factory=list)

    _lookup: Dict[Tuple[int, int, int, int], int] = PrivateAttr(default_factory=dict)
    _cache: Dict[tuple, object] = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context) -> None:
        self._lookup = {}
        for c in self.cubes:
            s = c.lattice_size(self.max_level)
            self._lookup[(c.level, c.lattice[0] // s, c.lattice[1] // s, c.lattice[2] // s)] = c.global_id

    @property
    def n_cubes(self) -> int:
        return len(self.cubes)

    @property
    def n_levels(self) -> int:
        return self.max_level + 1

    @property
    def lattice_unit(self) -> float:
        """Edge of a finest-level cube"""
        return self.root_edge / (1 << self.max_level)

    @property
    def lattice_dims(self) -> IVec3:
        f = 1 << self.max_level
        return (self.root_dims[0] * f, self.root_dims[1] * f, self.root_dims[2] * f)

    @property
    def bounding_box(self) -> Tuple[Vec3, Vec3]:
        upper = tuple(self.origin[a] + self.root_dims[a] * self.root_edge for a in range(3))
        return self.origin, upper  # type: ignore[return-value]

    def leaf_id(self, level: int, index: IVec3) -> Optional[int]:
        """Cube id of the leaf at (level, index) if that leaf exists"""
        return self._lookup.get((level, index[0], index[1], index[2]))

    def cached(self, key: tuple, build: Callable[[], T]) -> T:
        """
        Per-mesh memo for derived structures (exchange transfers, leaf grid, bounds).

        Rank threads share one mesh, so construction is serialized.
        """
        with _CACHE_LOCK:
            if key not in self._cache:
                self._cache[key] = build()
            return self._cache[key]  # type: ignore[return-value]

    def lattice_coords(self, x: np.ndarray) -> np.ndarray:
        """Positions in lattice units (float), shape (..., 3)"""
        return (np.asarray(x, dtype=np.float64) - np.asarray(self.origin)) / self.lattice_unit

    def cube_lattice_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """(lower, upper) lattice corners of all cubes, shape (N, 3) each"""
        def build():
            lo = np.array([c.lattice for c in self.cubes], dtype=np.int64).reshape(-1, 3)
            size = np.array([c.lattice_size(self.max_level) for c in self.cubes], dtype=np.int64)
            return lo, lo + size[:, None]
        return self.cached(("cube_lattice_bounds",), build)

    def leaf_grid(self) -> np.ndarray:
        """Finest-lattice array holding the id of the cube covering each lattice cell"""
        def build():
            grid = np.full(self.lattice_dims, -1, dtype=np.int64)
            lo, hi = self.cube_lattice_bounds()
            for g in range(self.n_cubes):
                grid[lo[g, 0]:hi[g, 0], lo[g, 1]:hi[g, 1], lo[g, 2]:hi[g, 2]] = g
            return grid
        return self.cached(("leaf_grid",), build)
