"""
Interaction Service - Discrete delta kernel, interpolation and force spreading

The smoothed 3-point kernel:
    φ(r) = 3/4 − r²                 |r| ≤ 1/2
         = ½ (9/4 − 3|r| + r²)      1/2 < |r| ≤ 3/2
         = 0                        otherwise
For a particle in cell i0 = ⌊(X − x_c)/Δx⌋ of its cube, the cells i0 − 1 .. i0 + 1 per
axis carry every non-zero weight; indices −1 and n reach into the halo.
"""
from __future__ import annotations
from itertools import product
from typing import Dict, Mapping, Tuple

import numpy as np

from ..errors import HaloContractError
from ..models.field import CubeField
from ..models.mesh import BcmMesh
from ..models.particle_set import ParticleSet

_OFFSETS = list(product((-1, 0, 1), repeat=3))


def delta1(r):
    """1-D smoothed 3-point kernel (scalar or array)"""
    a = np.abs(np.asarray(r, dtype=np.float64))
    out = np.where(
        a <= 0.5, 0.75 - a * a,
        np.where(a <= 1.5, 0.5 * (2.25 - 3.0 * a + a * a), 0.0),
    )
    return float(out) if out.ndim == 0 else out


def delta3(x, dx) -> float:
    """δ_Δ(x) = Π φ(x_n/Δx_n)/Δx_n"""
    x = np.asarray(x, dtype=np.float64)
    dx = np.broadcast_to(np.asarray(dx, dtype=np.float64), (3,))
    return float(np.prod(delta1(x / dx) / dx))


def stencil(X: np.ndarray, corner, dx: float, n: int, h: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Base array indices and per-axis weights of the 3×3×3 support.

    Returns:
        (base (k, 3) array index of offset −1, weights (k, 3, 3) indexed [particle, axis, offset])

    Raises:
        HaloContractError: support would leave the halo
    """
    s = (np.asarray(X, dtype=np.float64) - np.asarray(corner, dtype=np.float64)) / dx
    i0 = np.floor(s).astype(np.int64)
    if i0.size and (i0.min() < -h + 1 or i0.max() > n + h - 2):
        raise HaloContractError("Particle kernel support extends past the cube halo")
    w = np.empty(s.shape + (3,), dtype=np.float64)
    for o in range(3):
        w[..., o] = delta1(s - (i0 + (o - 1) + 0.5))
    return i0 - 1 + h, w


def interpolate_cube(u: np.ndarray, X: np.ndarray, corner, dx: float, n: int, h: int) -> np.ndarray:
    """
    U_R = Σ u_ijk δ_Δ(x_ijk − X_R) Δx³ over the 27 nearest cells of one cube.

    Args:
        u: Cube array (C, m, m, m) with valid halos
        X: Particle positions (k, 3)

    Returns:
        (k, C)
    """
    k = X.shape[0]
    out = np.zeros((k, u.shape[0]), dtype=np.float64)
    if k == 0:
        return out
    base, w = stencil(X, corner, dx, n, h)
    for ox, oy, oz in _OFFSETS:
        wt = w[:, 0, ox + 1] * w[:, 1, oy + 1] * w[:, 2, oz + 1]
        vals = u[:, base[:, 0] + ox + 1, base[:, 1] + oy + 1, base[:, 2] + oz + 1]
        out += (vals * wt).T
    return out


def project_cube(f: np.ndarray, F: np.ndarray, dc: np.ndarray, X: np.ndarray, corner, dx: float, n: int, h: int) -> None:
    """Scatter F·dc·δ_Δ into the cube array ``f`` (C, m, m, m), halo included"""
    if X.shape[0] == 0:
        return
    base, w = stencil(X, corner, dx, n, h)
    scale = dc / dx ** 3
    for ox, oy, oz in _OFFSETS:
        wt = w[:, 0, ox + 1] * w[:, 1, oy + 1] * w[:, 2, oz + 1] * scale
        idx = (base[:, 0] + ox + 1, base[:, 1] + oy + 1, base[:, 2] + oz + 1)
        for c in range(f.shape[0]):
            np.add.at(f[c], idx, F[:, c] * wt)


def interpolate(u: CubeField, sets: Mapping[int, ParticleSet], mesh: BcmMesh) -> Dict[int, np.ndarray]:
    """
    Interpolated field at every particle of the local cubes.

    Returns:
        cube id -> (k, C) values in the id order of ``ParticleSet.ordered()``
    """
    out: Dict[int, np.ndarray] = {}
    for g, s in sets.items():
        if len(s) == 0:
            continue
        cube = mesh.cubes[g]
        _, X, _, _ = s.ordered()
        out[g] = interpolate_cube(u.cube(g), X, cube.base_corner, cube.dx, u.n_cells, u.halo_width)
    return out


def project(F: Mapping[int, np.ndarray], sets: Mapping[int, ParticleSet], f: CubeField, mesh: BcmMesh) -> None:
    """
    Spread per-particle forces into ``f`` (accumulating, halo included).

    The caller zeroes ``f`` first and runs reverse_exchange afterwards.
    """
    for g in sorted(F):
        s = sets[g]
        cube = mesh.cubes[g]
        _, X, dc, _ = s.ordered()
        project_cube(f.cube(g), F[g], dc, X, cube.base_corner, cube.dx, f.n_cells, f.halo_width)
