"""
Cube-to-rank distribution models
"""
from __future__ import annotations
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, PrivateAttr


def linear_owner(g: int, n: int, p: int) -> int:
    """Closed-form owner of Z-order position g when n cubes are split over p ranks"""
    base, rem = divmod(n, p)
    cut = rem * (base + 1)
    if g < cut:
        return g // (base + 1)
    return rem + (g - cut) // base


class Distribution(BaseModel):
    """
    Assignment of cubes to ranks.

    In ``linear`` mode rank p owns the contiguous Z-order block
    [offsets[p], offsets[p] + counts[p]); in ``explicit`` mode ``owners[g]`` is the rank
    of cube g and the closed form no longer applies.
    """
    n_cubes: int = Field(ge=0)
    n_ranks: int = Field(ge=1)
    counts: List[int]
    offsets: List[int]
    mode: Literal["linear", "explicit"] = "linear"
    owners: Optional[List[int]] = None

    _local: Dict[int, List[int]] = PrivateAttr(default_factory=dict)

    def owner(self, gid: int) -> int:
        if self.mode == "explicit":
            return self.owners[gid]  # type: ignore[index]
        return linear_owner(gid, self.n_cubes, self.n_ranks)

    def local_gids(self, rank: int) -> List[int]:
        """Ascending global ids owned by ``rank``"""
        if rank not in self._local:
            if self.mode == "linear":
                self._local[rank] = list(range(self.offsets[rank], self.offsets[rank] + self.counts[rank]))
            else:
                self._local[rank] = [g for g, r in enumerate(self.owners) if r == rank]  # type: ignore[arg-type]
        return self._local[rank]

    def owner_list(self) -> List[int]:
        if self.mode == "explicit":
            return list(self.owners)  # type: ignore[arg-type]
        return [self.owner(g) for g in range(self.n_cubes)]


class IndexMap(BaseModel):
    """local→global per rank and global→(rank, local)"""
    local_to_global: List[List[int]]
    global_to_local: Dict[int, Tuple[int, int]]

    def lookup(self, gid: int) -> Tuple[int, int]:
        return self.global_to_local[gid]
