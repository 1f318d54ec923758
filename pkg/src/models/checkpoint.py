"""
Checkpoint header models

The header is canonical JSON (sorted keys, no whitespace) between the fixed preamble and
the payload. Byte offsets are relative to the first payload byte.
"""
from __future__ import annotations
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field

MAGIC = b"CUBELET\0"
FORMAT_VERSION = 1


class FieldDescriptor(BaseModel):
    name: str
    qid: int
    quantity: str
    n_components: int
    mode: Literal["lossless", "lossy"] = "lossless"
    q: Optional[float] = None
    value_range: Optional[float] = None


class CubeRecord(BaseModel):
    """Location of one cube's data in the payload"""
    gid: int
    level: int
    lattice: Tuple[int, int, int]
    offset: int
    lengths: List[int]
    n_particles: int = 0
    particle_offset: int = 0


class CheckpointHeader(BaseModel):
    version: int = FORMAT_VERSION
    n_cubes: int
    n_cells_per_edge: int
    n_levels: int
    max_level: int
    halo_width: int
    origin: Tuple[float, float, float]
    root_edge: float
    root_dims: Tuple[int, int, int]
    periodic: Tuple[bool, bool, bool]
    fields: List[FieldDescriptor] = Field(default_factory=list)
    cubes: List[CubeRecord] = Field(default_factory=list)
    payload_length: int = 0
    t: float = 0.0
    step: int = 0
    extras: Dict[str, Any] = Field(default_factory=dict)
