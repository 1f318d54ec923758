"""
Finite-volume kernels on stacked cube arrays

Every kernel takes the rows of a CubeField (shape (R, C, m, m, m), halo width h) plus the
per-row cell spacing and returns interior values (R, C', n, n, n). Kernels are elementwise
in the row index, so any chunking of rows over workers gives identical bits.

Discretization (collocated, cell-centered):
    convection   A[u]_c = Σ_a (F_{i+½} − F_{i−½})/Δx,  F = U_face · φ_face(u_c)
                 U_face = ½(u_a[i] + u_a[i+1]), φ_face by QUICK upwinded on sign(U_face)
    diffusion    7-point Laplacian
    gradient     wide central (p[i+1] − p[i−1]) / 2Δx
    divergence   Rhie-Chow face velocity
                 ū_f = ½(u[i] + u[i+1]) + c (½(Gp[i] + Gp[i+1]) − (p[i+1] − p[i])/Δx),  c = Δt/ρ
                 with boundary faces overridden (walls 0, inflow u0, outflow extrapolated + δ)
"""
from __future__ import annotations
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..models.case import BoundaryConfig
from ..models.mesh import N_FACES, face_axis, face_side

# Per-row boundary face rules: None for faces with a neighbor, else (kind, value)
FaceRule = Optional[Tuple[str, float]]

QUICK_UPWIND = 0.75
QUICK_DOWNWIND = 0.375
QUICK_FAR = -0.125


def _span(a: int, lo: int, hi: int, n: int, h: int) -> tuple:
    """Spatial index tuple: cells lo..hi−1 along axis a, interior on the other axes"""
    out = []
    for b in range(3):
        out.append(slice(h + lo, h + hi) if b == a else slice(h, h + n))
    return (slice(None),) + tuple(out)


def _col(dx: np.ndarray) -> np.ndarray:
    return np.asarray(dx, dtype=np.float64).reshape(-1, 1, 1, 1)


def quick_face(phi_uu: np.ndarray, phi_u: np.ndarray, phi_d: np.ndarray) -> np.ndarray:
    """φ_face = 6/8 φ_U + 3/8 φ_D − 1/8 φ_UU"""
    return QUICK_UPWIND * phi_u + QUICK_DOWNWIND * phi_d + QUICK_FAR * phi_uu


def convection(u: np.ndarray, dx: np.ndarray, n: int, h: int) -> np.ndarray:
    """Conservative QUICK convection of every velocity component, (R, 3, n, n, n)"""
    R = u.shape[0]
    inv = 1.0 / _col(dx)
    out = np.zeros((R, 3, n, n, n), dtype=np.float64)
    for a in range(3):
        ua = u[:, a]
        U = 0.5 * (ua[_span(a, -1, n, n, h)] + ua[_span(a, 0, n + 1, n, h)])
        pos = U >= 0.0
        for c in range(3):
            phi = u[:, c]
            m1, p0, p1, p2 = (phi[_span(a, s, s + n + 1, n, h)] for s in (-2, -1, 0, 1))
            face = np.where(pos, quick_face(m1, p0, p1), quick_face(p2, p1, p0))
            flux = U * face
            hi = [slice(None)] * 4
            lo = [slice(None)] * 4
            hi[a + 1] = slice(1, n + 1)
            lo[a + 1] = slice(0, n)
            out[:, c] += (flux[tuple(hi)] - flux[tuple(lo)]) * inv
    return out


def neighbor_sum(phi: np.ndarray, n: int, h: int) -> np.ndarray:
    """Sum of the six face neighbors of every interior cell, (R, C, n, n, n)"""
    C = phi.shape[1]
    out = np.empty((phi.shape[0], C, n, n, n), dtype=np.float64)
    for c in range(C):
        f = phi[:, c]
        acc = f[_span(0, -1, n - 1, n, h)] + f[_span(0, 1, n + 1, n, h)]
        for a in (1, 2):
            acc = acc + f[_span(a, -1, n - 1, n, h)] + f[_span(a, 1, n + 1, n, h)]
        out[:, c] = acc
    return out


def laplacian(phi: np.ndarray, dx: np.ndarray, n: int, h: int) -> np.ndarray:
    """7-point Laplacian of every component, (R, C, n, n, n)"""
    inv2 = 1.0 / _col(dx) ** 2
    s = slice(h, h + n)
    centre = phi[:, :, s, s, s]
    return (neighbor_sum(phi, n, h) - 6.0 * centre) * inv2[:, None]


def gradient(p: np.ndarray, a: int, lo: int, hi: int, dx: np.ndarray, n: int, h: int) -> np.ndarray:
    """Wide central gradient along ``a`` for cells lo..hi−1 of component 0"""
    f = p[:, 0]
    return (f[_span(a, lo + 1, hi + 1, n, h)] - f[_span(a, lo - 1, hi - 1, n, h)]) / (2.0 * _col(dx))


def face_velocity(u: np.ndarray, p: Optional[np.ndarray], a: int, dx: np.ndarray, coef: float, n: int, h: int) -> np.ndarray:
    """
    Normal velocity on the n+1 faces along axis ``a`` (faces −½ .. n−½), shape (R, n+1, n, n).

    Without ``p`` the face value is the plain average of the adjacent cells.
    """
    ua = u[:, a]
    uf = 0.5 * (ua[_span(a, -1, n, n, h)] + ua[_span(a, 0, n + 1, n, h)])
    if p is not None:
        G = gradient(p, a, -1, n + 1, dx, n, h)
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[a + 1] = slice(0, n + 1)
        hi[a + 1] = slice(1, n + 2)
        compact = (p[:, 0][_span(a, 0, n + 1, n, h)] - p[:, 0][_span(a, -1, n, n, h)]) / _col(dx)
        uf = uf + coef * (0.5 * (G[tuple(lo)] + G[tuple(hi)]) - compact)
    return uf


def _boundary_cell(a: int, side: int, n: int, h: int) -> tuple:
    i = n - 1 if side else 0
    return _span(a, i, i + 1, n, h)


def outflow_base(u: np.ndarray, p: Optional[np.ndarray], face: int, dx: np.ndarray, coef: float, n: int, h: int) -> np.ndarray:
    """Extrapolated normal velocity on a boundary face, (R, 1, n, n) with axis ``a`` of length 1"""
    a, side = face_axis(face), face_side(face)
    base = u[:, a][_boundary_cell(a, side, n, h)]
    if p is not None:
        i = n - 1 if side else 0
        base = base + coef * gradient(p, a, i, i + 1, dx, n, h)
    return base


def divergence(
    u: np.ndarray,
    p: Optional[np.ndarray],
    dx: np.ndarray,
    coef: float,
    rules: Sequence[Sequence[FaceRule]],
    n: int,
    h: int,
) -> np.ndarray:
    """
    Discrete divergence of the face velocity, (R, 1, n, n, n).

    Args:
        u: Velocity rows with face halos
        p: Pressure rows with face halos, or None for the plain average
        dx: Cell spacing per row
        coef: Δt/ρ
        rules: Per row, per face: None or (kind, value) with kind wall | inflow | outflow
    """
    R = u.shape[0]
    inv = 1.0 / _col(dx)
    out = np.zeros((R, 1, n, n, n), dtype=np.float64)
    for a in range(3):
        uf = face_velocity(u, p, a, dx, coef, n, h)
        for side in (0, 1):
            face = 2 * a + side
            sel = [slice(None)] * 4
            sel[a + 1] = slice(n, n + 1) if side else slice(0, 1)
            sel = tuple(sel)
            base = None
            for r in range(R):
                rule = rules[r][face]
                if rule is None:
                    continue
                kind, value = rule
                if kind == "wall":
                    uf[r][sel[1:]] = 0.0
                elif kind == "inflow":
                    uf[r][sel[1:]] = value
                else:
                    if base is None:
                        base = outflow_base(u, p, face, dx, coef, n, h)
                    uf[r][sel[1:]] = base[r] + value
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[a + 1] = slice(1, n + 1)
        lo[a + 1] = slice(0, n)
        out[:, 0] += (uf[tuple(hi)] - uf[tuple(lo)]) * inv
    return out


def wide_gradient_all(p: np.ndarray, dx: np.ndarray, n: int, h: int) -> np.ndarray:
    """(R, 3, n, n, n) wide gradient of a scalar"""
    return np.stack([gradient(p, a, 0, n, dx, n, h) for a in range(3)], axis=1)


def face_kinds(config: BoundaryConfig, boundary_rows: Dict[int, List[int]], n_rows: int) -> List[List[str]]:
    """Per row, per face: boundary kind or '' where the face has a neighbor"""
    kinds = [[""] * N_FACES for _ in range(n_rows)]
    for f in range(N_FACES):
        for r in boundary_rows[f]:
            kinds[r][f] = config.face(f).kind
    return kinds


def face_rules(config: BoundaryConfig, kinds: Sequence[Sequence[str]], delta: float) -> List[List[FaceRule]]:
    """
    Divergence overrides per row and face.

    Outflow faces get ``±δ`` along the outward normal so the net boundary flux vanishes.
    """
    rules: List[List[FaceRule]] = []
    for row in kinds:
        out: List[FaceRule] = []
        for f, kind in enumerate(row):
            if not kind:
                out.append(None)
            elif kind in ("slip", "no_slip"):
                out.append(("wall", 0.0))
            elif kind == "inflow":
                out.append(("inflow", float(config.face(f).velocity[face_axis(f)])))
            else:
                out.append(("outflow", delta if face_side(f) else -delta))
        rules.append(out)
    return rules


def boundary_flux_partials(
    u: np.ndarray,
    p: Optional[np.ndarray],
    dx: np.ndarray,
    coef: float,
    config: BoundaryConfig,
    kinds: Sequence[Sequence[str]],
    gids: Sequence[int],
    n: int,
    h: int,
) -> Tuple[Dict[int, float], Dict[int, float]]:
    """
    Per-cube outward boundary flux before the outflow correction, and outflow face area.

    Returns:
        (flux per gid, outflow area per gid)
    """
    flux: Dict[int, float] = {}
    area: Dict[int, float] = {}
    bases: Dict[int, np.ndarray] = {}
    for r, g in enumerate(gids):
        terms: List[float] = []
        out_area: List[float] = []
        cell_area = float(dx[r]) ** 2
        for f, kind in enumerate(kinds[r]):
            if kind not in ("inflow", "outflow"):
                continue
            sign = 1.0 if face_side(f) else -1.0
            if kind == "inflow":
                terms.append(sign * float(config.face(f).velocity[face_axis(f)]) * n * n * cell_area)
            else:
                if f not in bases:
                    bases[f] = outflow_base(u, p, f, dx, coef, n, h)
                terms.append(sign * math.fsum(bases[f][r].ravel()) * cell_area)
                out_area.append(n * n * cell_area)
        if terms:
            flux[g] = math.fsum(terms)
        if out_area:
            area[g] = math.fsum(out_area)
    return flux, area


def cube_sums(values: np.ndarray, gids: Sequence[int], weights: Optional[np.ndarray] = None) -> Dict[int, float]:
    """Correctly rounded per-cube sums of (R, ...) values, optionally scaled per row"""
    out: Dict[int, float] = {}
    for r, g in enumerate(gids):
        s = math.fsum(values[r].ravel())
        out[g] = s * float(weights[r]) if weights is not None else s
    return out
