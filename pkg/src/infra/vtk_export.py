"""
Per-cube legacy VTK export for inspection (not restartable)

Each cube becomes one ASCII legacy VTK file of n³ hexahedral cells with the interior
values of the exported fields as cell data; any VTK reader shows the cubes side by side.
"""
from __future__ import annotations
from pathlib import Path
from typing import List, Mapping, Sequence

import meshio
import numpy as np

from ..models.field import CubeField
from ..models.mesh import Cube

# VTK hexahedron vertex order relative to the cell's lower corner
_HEX_CORNERS = ((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1))


def cube_grid(cube: Cube, n: int) -> meshio.Mesh:
    """Points and hexahedra of one cube's n³ cells, cells in (i, j, k) C order"""
    r = np.arange(n + 1, dtype=np.float64)
    gx, gy, gz = np.meshgrid(r, r, r, indexing="ij")
    points = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3) * np.asarray(cube.cell_spacing) + np.asarray(cube.base_corner)

    def vid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    i, j, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    hexes = np.stack([vid(i + a, j + b, k + c) for a, b, c in _HEX_CORNERS], axis=1).astype(np.int64)
    return meshio.Mesh(points, [("hexahedron", hexes)])


def export_vtk(out_dir: str | Path, cubes: Sequence[Cube], fields: Mapping[str, CubeField]) -> List[Path]:
    """
    Write ``cube_{gid}.vtk`` for every local cube of the given fields.

    Args:
        out_dir: Directory, created if needed
        cubes: Cube models indexed by global id (mesh.cubes)
        fields: Exported fields by name, all over the same local cubes

    Returns:
        Written paths in global-id order
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not fields:
        return []
    first = next(iter(fields.values()))
    n = first.n_cells
    paths: List[Path] = []
    for g in first.gids:
        grid = cube_grid(cubes[g], n)
        cell_data = {}
        for name, fld in fields.items():
            vals = fld.interior_of(g).reshape(fld.n_components, -1).T
            cell_data[name] = [vals[:, 0] if fld.n_components == 1 else vals]
        grid.cell_data = cell_data
        path = out / f"cube_{g:06d}.vtk"
        meshio.write(str(path), grid, file_format="vtk", binary=False)
        paths.append(path)
    return paths
