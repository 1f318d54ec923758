"""
Surface geometry input

Triangulated surfaces come from STL files (binary or ASCII, read and written with meshio)
or from the built-in icosphere generator used by the sphere case and the test suites.
"""
from __future__ import annotations
from pathlib import Path
from typing import Sequence, Tuple

import meshio
import numpy as np

from ..errors import ConfigError


def read_stl(path: str | Path) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read an STL triangle soup.

    Returns:
        (vertices (nv, 3) float64, triangles (nt, 3) int64)

    Raises:
        FileNotFoundError: path does not exist
        ConfigError: the file holds no triangles
    """
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"STL file not found: {path}")
    mesh = meshio.read(str(p), file_format="stl")
    tris = [c.data for c in mesh.cells if c.type == "triangle"]
    if not tris:
        raise ConfigError(f"STL file has no triangles: {path}")
    return np.asarray(mesh.points, dtype=np.float64), np.concatenate(tris).astype(np.int64)


def write_stl(path: str | Path, vertices: np.ndarray, triangles: np.ndarray, binary: bool = True) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    mesh = meshio.Mesh(np.asarray(vertices, dtype=np.float64), [("triangle", np.asarray(triangles, dtype=np.int64))])
    meshio.write(str(p), mesh, file_format="stl", binary=binary)


def icosphere(center: Sequence[float] = (0.0, 0.0, 0.0), diameter: float = 1.0, subdivisions: int = 3) -> Tuple[np.ndarray, np.ndarray]:
    """Geodesic sphere: an icosahedron with every triangle split in four ``subdivisions`` times"""
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    points = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]

    for _ in range(subdivisions):
        midpoint = {}

        def mid(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                p = points[i] + points[j]
                points.append(p / np.linalg.norm(p))
                midpoint[key] = len(points) - 1
            return midpoint[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined

    V = np.asarray(points) * (diameter / 2.0) + np.asarray(center, dtype=np.float64)
    return V, np.asarray(faces, dtype=np.int64)


def surface_area(vertices: np.ndarray, triangles: np.ndarray) -> float:
    p = np.asarray(vertices)[np.asarray(triangles)]
    return float(0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1).sum())
