"""
Multigrid Service - Per-cube geometric multigrid for the pressure Poisson equation

Every cube coarsens its own n³ grid by halving down to 2³ cells; level k of the hierarchy
is the set of all cubes at n/2^k cells per edge with spacing Δx·2^k. Halo exchanges at
each level use the same transfer recipes as the flow fields.

V-cycle:
    pre-smooth (damped Jacobi, one face exchange per sweep)
    residual → 8-cell average → coarse right-hand side
    recurse; coarsest level: conjugate gradients on −L, fixed iteration cap
    trilinear prolongation of the coarse correction (corner exchange first)
    post-smooth
Zero-gradient ghosts everywhere; the constant null space is removed by pinning the
volume-weighted mean to zero.
"""
from __future__ import annotations
import math
from itertools import product
from typing import List, Optional, Sequence

import numpy as np
from loguru import logger

from ..infra.workers import RankContext
from ..models.case import SolverConfig
from ..models.field import CubeField
from ..models.flow import PoissonStats, QID_MULTIGRID
from ..models.mesh import BcmMesh
from .boundary_service import BoundaryFiller
from .halo_service import HaloExchanger
from .operators import cube_sums, laplacian

_ORDERED_OCTANTS = list(product((0, 1), repeat=3))


def prolong_axis(e: np.ndarray, axis: int) -> np.ndarray:
    """
    Linear interpolation to the two children of every coarse cell along ``axis``.

    ``e`` carries one ghost cell per side on that axis; the result has 2·(len − 2) entries.
    """
    e = np.moveaxis(e, axis, -1)
    c, lo, hi = e[..., 1:-1], e[..., :-2], e[..., 2:]
    even = 0.75 * c + 0.25 * lo
    odd = 0.75 * c + 0.25 * hi
    fine = np.stack([even, odd], axis=-1).reshape(e.shape[:-1] + (2 * c.shape[-1],))
    return np.moveaxis(fine, -1, axis)


def restrict_average(r: np.ndarray) -> np.ndarray:
    """(R, nf, nf, nf) → (R, nf/2, nf/2, nf/2) by the ordered 8-child average"""
    R, nf = r.shape[0], r.shape[1]
    nc = nf // 2
    r6 = r.reshape(R, nc, 2, nc, 2, nc, 2)
    acc = r6[:, :, 0, :, 0, :, 0].copy()
    for ox, oy, oz in _ORDERED_OCTANTS[1:]:
        acc += r6[:, :, ox, :, oy, :, oz]
    return acc * 0.125


class _Level:
    def __init__(self, n: int, dx: np.ndarray):
        self.n = n
        self.dx = dx
        self.x: Optional[CubeField] = None
        self.b: Optional[CubeField] = None
        self.r: Optional[CubeField] = None
        self.d: Optional[CubeField] = None
        self.q: Optional[CubeField] = None


class MultigridSolver:
    """
    Geometric multigrid solver for L p = b on one rank's cubes (collective).

    Key features:
    - Per-cube coarsening to 2³ cells, level fields allocated once per distribution
    - Damped Jacobi smoothing with overlappable halo exchange per sweep
    - Deterministic norms and dot products (per-cube fsum partials, global fsum)
    - Warm start from the previous pressure

    Args:
        mesh: Shared mesh
        exchanger: The rank's HaloExchanger
        filler: Boundary ghost filler for the rank's cubes
        ctx: Rank context
        config: Tolerance, cycle cap, sweeps, ω, coarse CG cap
        n_cells: Cells per cube edge on the finest level
        overlap: Overlap smoothing with halo exchange
    """

    def __init__(
        self,
        mesh: BcmMesh,
        exchanger: HaloExchanger,
        filler: BoundaryFiller,
        ctx: RankContext,
        config: SolverConfig,
        n_cells: int,
        overlap: bool = True,
    ):
        self.mesh = mesh
        self.hx = exchanger
        self.filler = filler
        self.ctx = ctx
        self.config = config
        self.n_cells = n_cells
        self.overlap = overlap
        self.h = exchanger.h
        self.rebuild(exchanger.gids)

    def rebuild(self, gids: Sequence[int]) -> None:
        """Reallocate level fields for a new set of local cubes"""
        self.gids = list(gids)
        base_dx = np.array([self.mesh.cubes[g].dx for g in self.gids], dtype=np.float64)
        self.levels: List[_Level] = []
        n, k = self.n_cells, 0
        while True:
            lev = _Level(n, base_dx * (1 << k))
            qid = QID_MULTIGRID + 8 * k

            def alloc(name: str, offset: int) -> CubeField:
                return CubeField.allocate(f"mg{k}.{name}", qid + offset, self.gids, n, 1, "scratch", self.h)

            if k > 0:
                lev.x = alloc("x", 0)
                lev.b = alloc("b", 1)
            lev.r = alloc("r", 2)
            self.levels.append(lev)
            if n <= 2:
                lev.d = alloc("d", 3)
                lev.q = alloc("q", 4)
                break
            n //= 2
            k += 1

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    # -- reductions ------------------------------------------------------------

    def _interior(self, field: CubeField) -> np.ndarray:
        h, n = self.h, field.n_cells
        return field.data[:, 0, h:h + n, h:h + n, h:h + n]

    def _dot(self, lev: _Level, a: CubeField, b: CubeField) -> float:
        prod = self._interior(a) * self._interior(b)
        return self.ctx.comm.allreduce_fsum(cube_sums(prod, self.gids, lev.dx ** 3))

    def _norm(self, lev: _Level, a: CubeField) -> float:
        return math.sqrt(max(self._dot(lev, a, a), 0.0))

    def remove_mean(self, lev: _Level, field: CubeField) -> float:
        """Subtract the volume-weighted mean of the interior; returns the mean"""
        vol = lev.dx ** 3
        total = self.ctx.comm.allreduce_fsum(cube_sums(self._interior(field), self.gids, vol))
        volume = self.ctx.comm.allreduce_fsum({g: float(v) * lev.n ** 3 for g, v in zip(self.gids, vol)})
        mean = total / volume if volume > 0 else 0.0
        if mean != 0.0:
            self._interior(field)[...] -= mean
        return mean

    # -- level kernels -----------------------------------------------------------

    def _smooth(self, lev: _Level, sweeps: int) -> None:
        h, n = self.h, lev.n
        s = slice(h, h + n)
        w = self.config.jacobi_omega
        x, b = lev.x, lev.b

        def kernel(rows: np.ndarray) -> None:
            dx = lev.dx[rows]
            lap = laplacian(x.data[rows], dx, n, h)[:, 0]
            res = b.data[rows, 0, s, s, s] - lap
            x.data[rows, 0, s, s, s] -= (w / 6.0) * (dx ** 2).reshape(-1, 1, 1, 1) * res

        for _ in range(sweeps):
            self.hx.exchange_and_compute(x, kernel, self.filler.even, self.overlap)

    def _residual(self, lev: _Level) -> None:
        """r = b − L x (exchanges x)"""
        h, n = self.h, lev.n
        s = slice(h, h + n)
        x, b, r = lev.x, lev.b, lev.r

        def kernel(rows: np.ndarray) -> None:
            lap = laplacian(x.data[rows], lev.dx[rows], n, h)[:, 0]
            r.data[rows, 0, s, s, s] = b.data[rows, 0, s, s, s] - lap

        self.hx.exchange_and_compute(x, kernel, self.filler.even, self.overlap)

    def _restrict(self, fine: _Level, coarse: _Level) -> None:
        h = self.h
        sf, sc = slice(h, h + fine.n), slice(h, h + coarse.n)

        def kernel(rows: np.ndarray) -> None:
            coarse.b.data[rows, 0, sc, sc, sc] = restrict_average(fine.r.data[rows, 0, sf, sf, sf])

        self.ctx.map_rows(kernel, self.hx.all_rows)
        coarse.x.zero()

    def _prolong(self, coarse: _Level, fine: _Level) -> None:
        h = self.h
        nc = coarse.n
        sf = slice(h, h + fine.n)
        wide = slice(h - 1, h + nc + 1)
        self.hx.exchange(coarse.x, "corner", self.filler.even)

        def kernel(rows: np.ndarray) -> None:
            e = coarse.x.data[rows, 0, wide, wide, wide]
            for axis in (1, 2, 3):
                e = prolong_axis(e, axis)
            fine.x.data[rows, 0, sf, sf, sf] += e

        self.ctx.map_rows(kernel, self.hx.all_rows)

    def _coarse_solve(self, lev: _Level) -> None:
        """Conjugate gradients on A = −L, capped at ``coarse_cg_iterations``"""
        h, n = self.h, lev.n
        s = slice(h, h + n)
        self._residual(lev)
        r, d, q = lev.r, lev.d, lev.q
        self._interior(r)[...] *= -1.0
        self.remove_mean(lev, r)
        d.data[...] = 0.0
        self._interior(d)[...] = self._interior(r)
        rr = self._dot(lev, r, r)
        rr0 = rr

        def apply(rows: np.ndarray) -> None:
            q.data[rows, 0, s, s, s] = -laplacian(d.data[rows], lev.dx[rows], n, h)[:, 0]

        for _ in range(self.config.coarse_cg_iterations):
            if rr <= 1e-28 * rr0 or rr == 0.0:
                break
            self.hx.exchange_and_compute(d, apply, self.filler.even, self.overlap)
            dq = self._dot(lev, d, q)
            if dq <= 0.0:
                break
            alpha = rr / dq
            self._interior(lev.x)[...] += alpha * self._interior(d)
            self._interior(r)[...] -= alpha * self._interior(q)
            rr_new = self._dot(lev, r, r)
            beta = rr_new / rr
            rr = rr_new
            self._interior(d)[...] = self._interior(r) + beta * self._interior(d)
        self.remove_mean(lev, lev.x)

    def _vcycle(self, k: int) -> None:
        lev = self.levels[k]
        if k == len(self.levels) - 1:
            self._coarse_solve(lev)
            return
        nu = self.config.smoothing_sweeps
        self._smooth(lev, nu)
        self._residual(lev)
        coarse = self.levels[k + 1]
        self._restrict(lev, coarse)
        self._vcycle(k + 1)
        self._prolong(coarse, lev)
        self._smooth(lev, nu)

    # -- driver --------------------------------------------------------------------

    def solve(self, x: CubeField, b: CubeField, tol: Optional[float] = None) -> PoissonStats:
        """
        Solve L x = b with x as the warm start (collective).

        The volume-weighted mean of b is removed first; x is returned with zero mean.
        Reaching the V-cycle cap is reported in the stats, not raised.

        Args:
            x: Solution field, finest level, 1 component
            b: Right-hand side, same layout as x
            tol: Relative residual ‖r‖₂/‖b‖₂ target; defaults to the configured tolerance

        Returns:
            PoissonStats with cycles, final relative residual and per-cycle reduction factors
        """
        tol = self.config.poisson_tol if tol is None else tol
        top = self.levels[0]
        top.x, top.b = x, b
        self.remove_mean(top, b)
        bnorm = self._norm(top, b)
        if bnorm == 0.0:
            x.zero()
            return PoissonStats(cycles=0, residual=0.0, converged=True)

        self._residual(top)
        res = self._norm(top, top.r) / bnorm
        stats = PoissonStats(cycles=0, residual=res, converged=res <= tol)
        while not stats.converged and stats.cycles < self.config.max_vcycles:
            self._vcycle(0)
            self.remove_mean(top, x)
            self._residual(top)
            new = self._norm(top, top.r) / bnorm
            stats.factors.append(new / res if res > 0 else 0.0)
            res = new
            stats.cycles += 1
            stats.residual = res
            stats.converged = res <= tol
        if not stats.converged:
            self.remove_mean(top, x)
        logger.bind(rank=self.ctx.rank).debug(
            "poisson cycles={} residual={:.3e} converged={}", stats.cycles, stats.residual, stats.converged
        )
        return stats
