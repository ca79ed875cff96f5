"""Light conditions: a white point light plus an optional analytic sky."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .mathkit import sh_basis

# Two-band (l <= 1) sky: bright bluish zenith, dim nadir.
DEFAULT_SKY = np.array([
    [1.60, 1.80, 2.00],   # Y_0^0
    [0.00, 0.00, 0.00],   # Y_1^-1
    [0.75, 0.85, 0.95],   # Y_1^0
    [0.00, 0.00, 0.00],   # Y_1^1
])


@dataclass(frozen=True)
class EnvLight:
    """Environment radiance max(0, sum c_lm Y_lm(w)) with l <= 1."""

    coeffs: np.ndarray = field(default_factory=lambda: DEFAULT_SKY.copy())

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.shape != (4, 3):
            raise DomainError("environment light needs a (4, 3) coefficient block")
        object.__setattr__(self, "coeffs", c)

    def radiance(self, w) -> np.ndarray:
        return np.maximum(0.0, sh_basis(1, w) @ self.coeffs)

    def to_json(self):
        return {"sh": self.coeffs.tolist()}

    @classmethod
    def from_json(cls, obj) -> "EnvLight":
        return cls(np.asarray(obj["sh"], dtype=np.float64))


@dataclass(frozen=True)
class LightCondition:
    """Point light at ``position`` with white radiant intensity, env flag."""

    position: tuple[float, float, float]
    intensity: float
    env: bool = False

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not np.all(np.isfinite(pos)):
            raise DomainError("light position must be 3 finite numbers")
        if not (self.intensity >= 0.0) or not np.isfinite(self.intensity):
            raise DomainError("light intensity must be finite and >= 0")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "intensity", float(self.intensity))
        object.__setattr__(self, "env", bool(self.env))

    @property
    def pos(self) -> np.ndarray:
        return np.asarray(self.position)

    def to_json(self):
        return {"position": list(self.position), "intensity": self.intensity, "env": int(self.env)}

    @classmethod
    def from_json(cls, obj) -> "LightCondition":
        return cls(tuple(obj["position"]), float(obj["intensity"]), bool(obj.get("env", 0)))
