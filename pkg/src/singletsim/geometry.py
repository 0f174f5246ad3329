"""Unit vectors on the 2-sphere: construction, dot products, sign convention,
and uniform sampling.

Only the S2 operations the simulator needs live here; anything fancier is out
of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NORM_TOL = 1e-12


@dataclass(frozen=True)
class UnitVector:
    """A direction on the unit sphere; components must have norm 1 within 1e-12."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        n2 = self.x * self.x + self.y * self.y + self.z * self.z
        if not math.isfinite(n2) or abs(n2 - 1.0) > 8.0 * NORM_TOL:
            raise ValueError(f"not a unit vector: ({self.x}, {self.y}, {self.z})")

    @staticmethod
    def normalized(x: float, y: float, z: float) -> "UnitVector":
        n = math.sqrt(x * x + y * y + z * z)
        if n == 0.0 or not math.isfinite(n):
            raise ValueError("cannot normalize a zero or non-finite vector")
        return UnitVector(x / n, y / n, z / n)

    @staticmethod
    def from_array(a) -> "UnitVector":
        a = np.asarray(a, dtype=float)
        return UnitVector(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def __neg__(self) -> "UnitVector":
        return UnitVector(-self.x, -self.y, -self.z)


def dot(a: UnitVector, b: UnitVector) -> float:
    """Inner product of two unit vectors, clamped to [-1, 1].

    The clamp guards downstream arccos calls against 1 + epsilon rounding.
    Summation order is fixed (x, y, z) so dot(a, b) == dot(b, a) exactly.
    """
    d = a.x * b.x + a.y * b.y + a.z * b.z
    return min(1.0, max(-1.0, d))


def sign(x: float) -> int:
    """Sign with the boundary convention sign(0) = +1.

    The convention is load-bearing: deterministic responses and the mixed-model
    law evaluate it on measure-zero boundaries and must agree everywhere.
    """
    if not math.isfinite(x):
        raise ValueError(f"sign of non-finite value: {x}")
    return 1 if x >= 0.0 else -1


def from_angles(theta: float, phi: float) -> UnitVector:
    """Unit vector from polar angle theta in [0, pi] and azimuth phi in [0, 2*pi)."""
    if not 0.0 <= theta <= math.pi:
        raise ValueError(f"theta out of range [0, pi]: {theta}")
    if not 0.0 <= phi < 2.0 * math.pi:
        raise ValueError(f"phi out of range [0, 2*pi): {phi}")
    st = math.sin(theta)
    return UnitVector.normalized(st * math.cos(phi), st * math.sin(phi), math.cos(theta))


def sample_uniform_sphere(rng: np.random.Generator) -> UnitVector:
    """One draw from the uniform measure on S2 (azimuth uniform, cos(theta) uniform)."""
    phi = rng.uniform(0.0, 2.0 * math.pi)
    ct = rng.uniform(-1.0, 1.0)
    st = math.sqrt(max(0.0, 1.0 - ct * ct))
    return UnitVector.normalized(st * math.cos(phi), st * math.sin(phi), ct)


def sample_uniform_sphere_array(rng: np.random.Generator, n: int) -> np.ndarray:
    """n uniform points on S2 as an (n, 3) array; vectorized twin of
    sample_uniform_sphere."""
    phi = rng.uniform(0.0, 2.0 * math.pi, size=n)
    ct = rng.uniform(-1.0, 1.0, size=n)
    st = np.sqrt(np.clip(1.0 - ct * ct, 0.0, None))
    return np.column_stack([st * np.cos(phi), st * np.sin(phi), ct])


def sign_array(x: np.ndarray) -> np.ndarray:
    """Vectorized sign with the same sign(0) = +1 convention."""
    return np.where(np.asarray(x) >= 0.0, 1, -1)
