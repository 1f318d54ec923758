"""
Lagrangian particle and rigid body models
"""
from __future__ import annotations
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

Vec3 = Tuple[float, float, float]


class Particle(BaseModel):
    """
    A material point on an immersed surface.

    Attributes:
        global_id: Unique across cubes and ranks
        X: Position
        dc_volume: Quadrature weight of the projection sum (fragment area × local Δx)
        body_id: Owning rigid body
    """
    global_id: int = Field(ge=0)
    X: Vec3
    dc_volume: float = Field(gt=0)
    body_id: int = 0


class MotionSpec(BaseModel):
    """
    Prescribed rigid motion.

    U_s(X, t) = U0 + r(t) · ω × (X − center(t)),   center(t) = center0 + U0·t
    r(t) = max(0, tanh(α (t − t0))) when ramp_alpha is set, else 1.
    """
    linear_velocity: Vec3 = (0.0, 0.0, 0.0)
    angular_velocity: Vec3 = (0.0, 0.0, 0.0)
    center: Vec3 = (0.0, 0.0, 0.0)
    ramp_alpha: Optional[float] = Field(default=None, gt=0)
    ramp_t0: float = 0.0

    def ramp(self, t: float) -> float:
        if self.ramp_alpha is None:
            return 1.0
        return max(0.0, float(np.tanh(self.ramp_alpha * (t - self.ramp_t0))))

    def center_at(self, t: float) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + t * np.asarray(self.linear_velocity, dtype=np.float64)


class RigidBody(BaseModel):
    """Triangulated surface plus its prescribed motion"""
    body_id: int = 0
    name: str = "body"
    vertices: np.ndarray
    triangles: np.ndarray
    motion: MotionSpec = Field(default_factory=MotionSpec)

    class Config:
        arbitrary_types_allowed = True

    @field_validator("vertices")
    @classmethod
    def _check_vertices(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must have shape (nv, 3), got {v.shape}")
        return v

    @field_validator("triangles")
    @classmethod
    def _check_triangles(cls, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.ndim != 2 or t.shape[1] != 3 or t.shape[0] == 0:
            raise ValueError("triangle list must be non-empty with shape (nt, 3)")
        return t

    @property
    def surface_area(self) -> float:
        p = self.vertices[self.triangles]
        return float(0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1).sum())
