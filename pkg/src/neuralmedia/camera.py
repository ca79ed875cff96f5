"""Pinhole camera producing world-space primary rays."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class Camera:
    """Camera looking down its local -z axis with +y up.

    ``to_world`` is a 4x4 camera-to-world matrix with an orthonormal rotation.
    Row 0 of the raster is the top of the image.
    """

    to_world: np.ndarray
    fov_y: float  # degrees
    width: int
    height: int

    def __post_init__(self):
        m = np.asarray(self.to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise DomainError("camera transform must be 4x4")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise DomainError("camera rotation must be orthonormal")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"camera resolution must be positive, got {self.width}x{self.height}")
        if not 0.0 < self.fov_y < 180.0:
            raise DomainError("field of view must lie in (0, 180) degrees")
        object.__setattr__(self, "to_world", m)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fov_y=40.0, width=64, height=64) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, (0.0, 1.0, 0.0))
        right /= np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        m = np.eye(4)
        m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, -fwd, eye
        return cls(m, fov_y, width, height)

    @property
    def origin(self) -> np.ndarray:
        return self.to_world[:3, 3]

    def pixel_rays(self, pixels: np.ndarray | None = None, jitter: np.ndarray | None = None):
        """Origins and unit directions for flat pixel indices (default: all).

        ``jitter`` in [0,1)^2 offsets the sample inside the pixel; centres otherwise.
        """
        if pixels is None:
            pixels = np.arange(self.width * self.height)
        pixels = np.asarray(pixels)
        row, col = np.divmod(pixels, self.width)
        off = np.full(pixels.shape + (2,), 0.5) if jitter is None else jitter
        tan_half = math.tan(math.radians(self.fov_y) * 0.5)
        aspect = self.width / self.height
        x = (2.0 * (col + off[..., 0]) / self.width - 1.0) * tan_half * aspect
        y = (1.0 - 2.0 * (row + off[..., 1]) / self.height) * tan_half
        d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
        d = d_cam @ self.to_world[:3, :3].T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.origin, d.shape).copy()
        return o, d

    def to_json(self):
        return {"to_world": self.to_world.tolist(), "fov_y": self.fov_y,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, obj) -> "Camera":
        return cls(np.asarray(obj["to_world"]), float(obj["fov_y"]), int(obj["width"]), int(obj["height"]))
