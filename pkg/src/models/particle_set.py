"""
Per-cube particle sets

Each cube owns an unordered set of particles keyed by global id. Members are stored
column-wise (ids, positions, weights, body ids) so kernels see contiguous arrays, and an
open-addressing integer hash table maps ids to rows. Removal swaps the last row into
the hole, so rows stay dense and insert/erase/lookup are amortized O(1).

Hashing:
    Fibonacci (multiplicative) hashing of the 64-bit id, linear probing, tombstones on
    erase, rebuild when live + tombstone slots exceed 70% of the table.

Iteration order is unspecified; kernels that sum over particles use ``ordered()``.
"""
from __future__ import annotations
from typing import Iterator, Optional, Tuple

import numpy as np

from .particle import Particle

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1
_EMPTY = -1
_TOMB = -2
_MAX_LOAD = 0.7


class ParticleSet:
    """Unordered set of the Lagrangian particles inside one cube"""

    def __init__(self, cube_id: int, capacity: int = 8):
        self.cube_id = int(cube_id)
        capacity = max(4, int(capacity))
        self.ids = np.empty(capacity, dtype=np.int64)
        self.X = np.empty((capacity, 3), dtype=np.float64)
        self.dc = np.empty(capacity, dtype=np.float64)
        self.body = np.empty(capacity, dtype=np.int64)
        self._size = 0
        self._bits = 4
        self._slots = np.full(1 << self._bits, _EMPTY, dtype=np.int64)
        self._used = 0  # live + tombstones
        self.probes = 0
        while (1 << self._bits) * _MAX_LOAD < capacity:
            self._grow_table()

    # -- hash table ----------------------------------------------------------

    def _hash(self, pid: int) -> int:
        return ((pid * _GOLDEN) & _MASK64) >> (64 - self._bits)

    def _find_slot(self, pid: int) -> Tuple[int, bool]:
        """(slot, found). When not found, slot is the first reusable slot on the probe path."""
        mask = (1 << self._bits) - 1
        i = self._hash(pid)
        first_free = -1
        slots = self._slots
        ids = self.ids
        while True:
            self.probes += 1
            row = int(slots[i])
            if row == _EMPTY:
                return (first_free if first_free >= 0 else i), False
            if row == _TOMB:
                if first_free < 0:
                    first_free = i
            elif int(ids[row]) == pid:
                return i, True
            i = (i + 1) & mask

    def _rebuild(self, bits: int) -> None:
        self._bits = bits
        self._slots = np.full(1 << bits, _EMPTY, dtype=np.int64)
        self._used = 0
        mask = (1 << bits) - 1
        for row in range(self._size):
            i = self._hash(int(self.ids[row]))
            while self._slots[i] != _EMPTY:
                i = (i + 1) & mask
            self._slots[i] = row
            self._used += 1

    def _grow_table(self) -> None:
        self._rebuild(self._bits + 1)

    def _reserve_rows(self, needed: int) -> None:
        cap = self.ids.shape[0]
        if needed <= cap:
            return
        new_cap = max(needed, 2 * cap)
        for name in ("ids", "dc", "body"):
            old = getattr(self, name)
            arr = np.empty(new_cap, dtype=old.dtype)
            arr[: self._size] = old[: self._size]
            setattr(self, name, arr)
        X = np.empty((new_cap, 3), dtype=np.float64)
        X[: self._size] = self.X[: self._size]
        self.X = X

    # -- set operations ----------------------------------------------------

    def __len__(self) -> int:
        return self._size

    def __contains__(self, pid: int) -> bool:
        return self._find_slot(int(pid))[1]

    def row_of(self, pid: int) -> Optional[int]:
        slot, found = self._find_slot(int(pid))
        return int(self._slots[slot]) if found else None

    def insert(self, pid: int, X, dc: float, body: int = 0) -> None:
        """Add a particle; raises KeyError on a duplicate id"""
        pid = int(pid)
        if (self._used + 1) > _MAX_LOAD * (1 << self._bits):
            # drop tombstones, and double when live entries alone are dense
            bits = self._bits + 1 if (self._size + 1) > 0.5 * _MAX_LOAD * (1 << self._bits) else self._bits
            self._rebuild(bits)
        slot, found = self._find_slot(pid)
        if found:
            raise KeyError(f"Particle {pid} already in set of cube {self.cube_id}")
        self._reserve_rows(self._size + 1)
        row = self._size
        self.ids[row] = pid
        self.X[row] = X
        self.dc[row] = dc
        self.body[row] = body
        self._size += 1
        if self._slots[slot] == _EMPTY:
            self._used += 1
        self._slots[slot] = row

    def erase(self, pid: int) -> Tuple[int, np.ndarray, float, int]:
        """Remove a particle and return (id, X, dc, body); raises KeyError if absent"""
        pid = int(pid)
        slot, found = self._find_slot(pid)
        if not found:
            raise KeyError(f"Particle {pid} not in set of cube {self.cube_id}")
        row = int(self._slots[slot])
        record = (pid, self.X[row].copy(), float(self.dc[row]), int(self.body[row]))
        self._slots[slot] = _TOMB
        last = self._size - 1
        if row != last:
            moved = int(self.ids[last])
            mslot, _ = self._find_slot(moved)
            self.ids[row] = self.ids[last]
            self.X[row] = self.X[last]
            self.dc[row] = self.dc[last]
            self.body[row] = self.body[last]
            self._slots[mslot] = row
        self._size -= 1
        return record

    def insert_particle(self, p: Particle) -> None:
        self.insert(p.global_id, p.X, p.dc_volume, p.body_id)

    # -- views -------------------------------------------------------------

    @property
    def positions(self) -> np.ndarray:
        """Live positions, row order (writable view)"""
        return self.X[: self._size]

    @property
    def live_ids(self) -> np.ndarray:
        return self.ids[: self._size]

    def ordered(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Copies of (ids, X, dc, body) sorted by id"""
        order = np.argsort(self.ids[: self._size], kind="stable")
        return (
            self.ids[: self._size][order].copy(),
            self.X[: self._size][order].copy(),
            self.dc[: self._size][order].copy(),
            self.body[: self._size][order].copy(),
        )

    def particles(self) -> Iterator[Particle]:
        ids, X, dc, body = self.ordered()
        for i in range(ids.shape[0]):
            yield Particle(global_id=int(ids[i]), X=tuple(X[i]), dc_volume=float(dc[i]), body_id=int(body[i]))

    def to_arrays(self) -> dict:
        ids, X, dc, body = self.ordered()
        return {"ids": ids, "X": X, "dc": dc, "body": body}

    @classmethod
    def from_arrays(cls, cube_id: int, arrays: dict) -> "ParticleSet":
        ids = arrays["ids"]
        s = cls(cube_id, capacity=max(8, 2 * len(ids)))
        for i in range(len(ids)):
            s.insert(int(ids[i]), arrays["X"][i], float(arrays["dc"][i]), int(arrays["body"][i]))
        return s

    def __repr__(self) -> str:
        return f"ParticleSet(cube={self.cube_id}, size={self._size})"
