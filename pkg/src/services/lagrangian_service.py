"""
Lagrangian Service - Surface particles, rigid motion and migration between cubes

Surface discretization places one particle in every Eulerian cell the surface crosses:
each triangle is clipped against candidate cells (Sutherland-Hodgman), fragments are
credited to the half-open cell holding their centroid, and the particle sits at the
area-weighted centroid of the cell's fragments with weight dc = area × Δx.
"""
from __future__ import annotations
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from ..errors import ParticleError
from ..infra.workers import RankContext
from ..models.decomp import Distribution
from ..models.mesh import BcmMesh
from ..models.particle import MotionSpec, Particle, RigidBody
from ..models.particle_set import ParticleSet
from .mesh_service import locate_many

Point = Tuple[float, float, float]

# Fragments below this fraction of a cell face area carry no particle
_MIN_FRAGMENT = 1e-12


def _intersect(p: Point, q: Point, axis: int, value: float) -> Point:
    t = (value - p[axis]) / (q[axis] - p[axis])
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]), p[2] + t * (q[2] - p[2]))


def _clip(poly: List[Point], axis: int, value: float, keep_above: bool) -> List[Point]:
    out: List[Point] = []
    if not poly:
        return out
    prev = poly[-1]
    prev_in = prev[axis] >= value if keep_above else prev[axis] <= value
    for cur in poly:
        cur_in = cur[axis] >= value if keep_above else cur[axis] <= value
        if cur_in:
            if not prev_in:
                out.append(_intersect(prev, cur, axis, value))
            out.append(cur)
        elif prev_in:
            out.append(_intersect(prev, cur, axis, value))
        prev, prev_in = cur, cur_in
    return out


def clip_to_box(tri: Sequence[Point], lo: Sequence[float], hi: Sequence[float]) -> List[Point]:
    """Convex polygon of the triangle inside the closed box [lo, hi]"""
    poly = [tuple(map(float, p)) for p in tri]
    for a in range(3):
        poly = _clip(poly, a, lo[a], True)
        poly = _clip(poly, a, hi[a], False)
        if len(poly) < 3:
            return []
    return poly


def polygon_area_centroid(poly: List[Point]) -> Tuple[float, np.ndarray]:
    """Area and centroid of a planar convex polygon by fan triangulation"""
    P = np.asarray(poly, dtype=np.float64)
    a = P[1:-1] - P[0]
    b = P[2:] - P[0]
    areas = 0.5 * np.linalg.norm(np.cross(a, b), axis=1)
    total = float(areas.sum())
    if total <= 0.0:
        return 0.0, P.mean(axis=0)
    cents = (P[0] + P[1:-1] + P[2:]) / 3.0
    return total, (areas[:, None] * cents).sum(axis=0) / total


def discretize_surface(body: RigidBody, mesh: BcmMesh, first_id: int = 0) -> List[Particle]:
    """
    One particle per Eulerian cell crossed by the body surface.

    Args:
        body: Triangulated rigid body
        mesh: Mesh whose cells sample the surface
        first_id: Id of the first particle; ids are dense in (cube id, cell index) order

    Raises:
        ParticleError: a surface vertex lies outside the mesh
    """
    lower, upper = (np.asarray(b) for b in mesh.bounding_box)
    V = body.vertices
    if np.any(V < lower) or np.any(V >= upper):
        raise ParticleError(f"Body '{body.name}' surface extends outside the mesh {tuple(lower)} .. {tuple(upper)}")

    n = mesh.n_cells_per_edge
    grid = mesh.leaf_grid()
    dims = np.asarray(mesh.lattice_dims)
    acc_area: Dict[Tuple[int, int, int, int], float] = defaultdict(float)
    acc_moment: Dict[Tuple[int, int, int, int], np.ndarray] = {}

    for tri in V[body.triangles]:
        tlo, thi = tri.min(axis=0), tri.max(axis=0)
        llo = np.clip(np.floor(mesh.lattice_coords(tlo)).astype(np.int64), 0, dims - 1)
        lhi = np.clip(np.floor(mesh.lattice_coords(thi)).astype(np.int64), 0, dims - 1)
        gids = np.unique(grid[llo[0]:lhi[0] + 1, llo[1]:lhi[1] + 1, llo[2]:lhi[2] + 1])
        for g in gids:
            cube = mesh.cubes[int(g)]
            dx = cube.dx
            corner = np.asarray(cube.base_corner)
            ilo = np.clip(np.floor((tlo - corner) / dx).astype(np.int64), 0, n - 1)
            ihi = np.clip(np.floor((thi - corner) / dx).astype(np.int64), 0, n - 1)
            for i in range(ilo[0], ihi[0] + 1):
                for j in range(ilo[1], ihi[1] + 1):
                    for k in range(ilo[2], ihi[2] + 1):
                        clo = corner + np.array((i, j, k)) * dx
                        chi = clo + dx
                        poly = clip_to_box(tri, clo, chi)
                        if not poly:
                            continue
                        area, cen = polygon_area_centroid(poly)
                        if area <= _MIN_FRAGMENT * dx * dx:
                            continue
                        if np.any(cen < clo) or np.any(cen >= chi):
                            continue
                        key = (int(g), i, j, k)
                        acc_area[key] += area
                        acc_moment[key] = acc_moment.get(key, 0.0) + area * cen

    particles = []
    for pid, key in enumerate(sorted(acc_area), start=first_id):
        area = acc_area[key]
        dx = mesh.cubes[key[0]].dx
        X = acc_moment[key] / area
        particles.append(Particle(global_id=pid, X=tuple(float(v) for v in X), dc_volume=area * dx, body_id=body.body_id))
    logger.info("surface '{}' discretized particles={} triangles={}", body.name, len(particles), body.triangles.shape[0])
    return particles


def particles_to_arrays(particles: Sequence[Particle]) -> Dict[str, np.ndarray]:
    return {
        "ids": np.array([p.global_id for p in particles], dtype=np.int64),
        "X": np.array([p.X for p in particles], dtype=np.float64).reshape(-1, 3),
        "dc": np.array([p.dc_volume for p in particles], dtype=np.float64),
        "body": np.array([p.body_id for p in particles], dtype=np.int64),
    }


def assign_sets(
    particles: Sequence[Particle] | Mapping[str, np.ndarray],
    mesh: BcmMesh,
    gids: Optional[Iterable[int]] = None,
) -> Dict[int, ParticleSet]:
    """
    Insert particles into the set of the cube containing them.

    Args:
        particles: Particle models or column arrays (ids, X, dc, body)
        mesh: Mesh
        gids: Cubes to build sets for (a rank's cubes); particles elsewhere are skipped.
            Defaults to every cube.

    Raises:
        ParticleError: a particle lies outside every cube
    """
    arrays = particles if isinstance(particles, Mapping) else particles_to_arrays(particles)
    wanted = list(range(mesh.n_cubes)) if gids is None else sorted(int(g) for g in gids)
    sets = {g: ParticleSet(g) for g in wanted}
    where = locate_many(mesh, arrays["X"])
    if np.any(where < 0):
        bad = int(arrays["ids"][np.argmax(where < 0)])
        raise ParticleError(f"Particle {bad} lies outside the mesh")
    for i in np.argsort(arrays["ids"], kind="stable"):
        s = sets.get(int(where[i]))
        if s is not None:
            s.insert(int(arrays["ids"][i]), arrays["X"][i], float(arrays["dc"][i]), int(arrays["body"][i]))
    return sets


def body_velocity(motion: MotionSpec, X: np.ndarray, t: float) -> np.ndarray:
    """U_s = U0 + r(t)·ω × (X − center(t)) for one position or an (n, 3) array"""
    X = np.asarray(X, dtype=np.float64)
    U0 = np.asarray(motion.linear_velocity, dtype=np.float64)
    omega = np.asarray(motion.angular_velocity, dtype=np.float64) * motion.ramp(t)
    return U0 + np.cross(omega, X - motion.center_at(t))


def body_velocities(motions: Mapping[int, MotionSpec], X: np.ndarray, body: np.ndarray, t: float) -> np.ndarray:
    """Prescribed velocity per particle, selecting each particle's body motion"""
    U = np.zeros_like(X)
    for b in np.unique(body):
        sel = body == b
        U[sel] = body_velocity(motions[int(b)], X[sel], t)
    return U


def advect(sets: Mapping[int, ParticleSet], motions: Mapping[int, MotionSpec], dt: float, t_next: float) -> None:
    """Explicit Euler: X ← X + Δt·U_s(X, t^{n+1})"""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    for s in sets.values():
        if len(s) == 0:
            continue
        X = s.positions
        X += dt * body_velocities(motions, X, s.body[: len(s)], t_next)


@dataclass
class MigrationStats:
    moved_local: int = 0
    sent: int = 0
    received: int = 0
    exited: int = 0


def wrap_periodic(mesh: BcmMesh, X: np.ndarray) -> None:
    lo, hi = mesh.bounding_box
    for a in range(3):
        if mesh.periodic[a]:
            length = hi[a] - lo[a]
            X[:, a] = lo[a] + np.mod(X[:, a] - lo[a], length)


def migrate(ctx: RankContext, sets: Dict[int, ParticleSet], mesh: BcmMesh, dist: Distribution) -> MigrationStats:
    """
    Move every particle into the set of the cube containing it (collective).

    Detection is vectorized per set; reconciliation handles movers in id order: on-rank
    moves first, then one all-to-all exchange of the particles leaving the rank.
    Particles leaving a non-periodic domain are dropped and counted.
    """
    stats = MigrationStats()
    rank = ctx.rank
    movers: List[Tuple[int, int, int]] = []
    for g, s in sets.items():
        if len(s) == 0:
            continue
        X = s.positions
        wrap_periodic(mesh, X)
        where = locate_many(mesh, X)
        for row in np.nonzero(where != g)[0]:
            movers.append((int(s.ids[row]), g, int(where[row])))

    outgoing: List[List[Tuple[int, np.ndarray, float, int, int]]] = [[] for _ in range(ctx.size)]
    local_in: List[Tuple[int, np.ndarray, float, int, int]] = []
    for pid, g_old, g_new in sorted(movers):
        rec = sets[g_old].erase(pid)
        if g_new < 0:
            stats.exited += 1
            continue
        q = dist.owner(g_new)
        if q == rank:
            local_in.append((pid, rec[1], rec[2], rec[3], g_new))
        else:
            outgoing[q].append((pid, rec[1], rec[2], rec[3], g_new))
            stats.sent += 1
    for pid, X, dc, body, g_new in local_in:
        sets[g_new].insert(pid, X, dc, body)
        stats.moved_local += 1

    incoming = ctx.comm.alltoall(outgoing)
    arrivals = sorted((rec for q, recs in enumerate(incoming) if q != rank for rec in recs), key=lambda r: r[0])
    for pid, X, dc, body, g_new in arrivals:
        sets[g_new].insert(pid, X, dc, body)
        stats.received += 1

    if stats.exited:
        ctx.log.warning("migrate exited={} particles left the domain", stats.exited)
    return stats


def clustered_particles(
    mesh: BcmMesh, cube_ids: Sequence[int], per_cube: int, seed: int = 0, first_id: int = 0, body_id: int = 0
) -> Dict[str, np.ndarray]:
    """Synthetic cloud: ``per_cube`` random particles inside each listed cube"""
    rng = np.random.default_rng(seed)
    X, ids = [], []
    pid = first_id
    for g in sorted(cube_ids):
        c = mesh.cubes[g]
        pts = np.asarray(c.base_corner) + rng.random((per_cube, 3)) * c.edge_length * 0.999
        X.append(pts)
        ids.extend(range(pid, pid + per_cube))
        pid += per_cube
    Xa = np.concatenate(X) if X else np.empty((0, 3))
    dx = np.array([mesh.cubes[g].dx for g in sorted(cube_ids) for _ in range(per_cube)], dtype=np.float64)
    return {
        "ids": np.asarray(ids, dtype=np.int64),
        "X": Xa,
        "dc": dx ** 3,
        "body": np.full(len(ids), body_id, dtype=np.int64),
    }


def gather_particles(ctx: RankContext, sets: Mapping[int, ParticleSet]) -> Dict[str, np.ndarray]:
    """Every rank's particles as one array set sorted by id (collective)"""
    mine = [s.to_arrays() for _, s in sorted(sets.items()) if len(s)]
    parts = [p for chunk in ctx.comm.allgather(mine) for p in chunk]
    if not parts:
        return {"ids": np.empty(0, np.int64), "X": np.empty((0, 3)), "dc": np.empty(0), "body": np.empty(0, np.int64)}
    cat = {k: np.concatenate([p[k] for p in parts]) for k in ("ids", "X", "dc", "body")}
    order = np.argsort(cat["ids"], kind="stable")
    return {k: v[order] for k, v in cat.items()}
