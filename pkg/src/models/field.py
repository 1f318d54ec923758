"""
Cell-centered cube fields

A CubeField holds one rank's share of a physical quantity: a dense array of shape
(n_local_cubes, n_components, m, m, m) with m = n + 2*halo_width. Interior cell (i, j, k)
of local row r lives at data[r, :, h+i, h+j, h+k]; halo indices run from −h to n+h−1.
"""
from __future__ import annotations
from typing import Dict, List, Literal, Sequence

import numpy as np
from pydantic import BaseModel, Field, PrivateAttr

from ..errors import HaloContractError

Quantity = Literal["velocity", "pressure", "force", "scratch"]

HALO_WIDTH = 2


class CubeField(BaseModel):
    """
    Per-rank stacked cube arrays of one quantity.

    Attributes:
        name: Human-readable field name ("u", "p", "mg2.x", ...)
        qid: Quantity id; identical on every rank, encoded into exchange tags
        quantity: velocity | pressure | force | scratch (selects boundary ghosts)
        n_components: 3 for vectors, 1 for scalars
        n_cells: Cells per cube edge
        halo_width: Ghost layers per side (>= 2)
        gids: Global cube ids of the local rows, ascending
        data: Array (len(gids), n_components, m, m, m)
    """
    name: str
    qid: int
    quantity: Quantity = "scratch"
    n_components: int = Field(ge=1)
    n_cells: int = Field(ge=2)
    halo_width: int = Field(default=HALO_WIDTH, ge=2)
    gids: List[int] = Field(default_factory=list)
    data: np.ndarray = Field(default=None)

    _row: Dict[int, int] = PrivateAttr(default_factory=dict)
    _epoch: int = PrivateAttr(default=0)
    _pending: bool = PrivateAttr(default=False)

    class Config:
        arbitrary_types_allowed = True

    def model_post_init(self, __context) -> None:
        m = self.n_cells + 2 * self.halo_width
        if self.data is None:
            self.data = np.zeros((len(self.gids), self.n_components, m, m, m), dtype=np.float64)
        self._row = {g: r for r, g in enumerate(self.gids)}

    @classmethod
    def allocate(
        cls,
        name: str,
        qid: int,
        gids: Sequence[int],
        n_cells: int,
        n_components: int = 1,
        quantity: Quantity = "scratch",
        halo_width: int = HALO_WIDTH,
    ) -> "CubeField":
        return cls(
            name=name, qid=qid, quantity=quantity, n_components=n_components,
            n_cells=n_cells, halo_width=halo_width, gids=sorted(int(g) for g in gids),
        )

    @property
    def m(self) -> int:
        return self.n_cells + 2 * self.halo_width

    @property
    def interior(self) -> tuple:
        """Index tuple selecting interior cells of every row and component"""
        s = slice(self.halo_width, self.halo_width + self.n_cells)
        return (slice(None), slice(None), s, s, s)

    def row(self, gid: int) -> int:
        return self._row[gid]

    def has(self, gid: int) -> bool:
        return gid in self._row

    def cube(self, gid: int) -> np.ndarray:
        """View of one cube's array (n_components, m, m, m)"""
        return self.data[self._row[gid]]

    def interior_of(self, gid: int) -> np.ndarray:
        h, n = self.halo_width, self.n_cells
        return self.data[self._row[gid], :, h:h + n, h:h + n, h:h + n]

    def zero(self) -> None:
        self.data.fill(0.0)

    def zero_halos(self) -> None:
        interior = self.data[self.interior].copy()
        self.data.fill(0.0)
        self.data[self.interior] = interior

    def like(self, name: str, qid: int, quantity: Quantity = "scratch", n_components: int = None) -> "CubeField":
        return CubeField.allocate(
            name, qid, self.gids, self.n_cells,
            n_components=self.n_components if n_components is None else n_components,
            quantity=quantity, halo_width=self.halo_width,
        )

    def replace_cubes(self, gids: Sequence[int], arrays: Dict[int, np.ndarray]) -> None:
        """Re-layout after redistribution: ``arrays`` supplies the (ncomp, m, m, m) block per gid"""
        self.gids = sorted(int(g) for g in gids)
        m = self.m
        data = np.zeros((len(self.gids), self.n_components, m, m, m), dtype=np.float64)
        for r, g in enumerate(self.gids):
            data[r] = arrays[g]
        self.data = data
        self._row = {g: r for r, g in enumerate(self.gids)}

    def begin_epoch(self) -> int:
        """Mark an exchange in flight; returns the epoch id"""
        if self._pending:
            raise HaloContractError(
                f"Field '{self.name}' exchange epoch {self._epoch} not finalized before a new exchange"
            )
        self._pending = True
        self._epoch += 1
        return self._epoch

    def end_epoch(self) -> None:
        self._pending = False

    @property
    def exchange_pending(self) -> bool:
        return self._pending
