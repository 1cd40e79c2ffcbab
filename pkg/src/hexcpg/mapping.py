"""Oscillator state -> foot target in the hip frame.

Foot targets here are offsets in a body-aligned frame at the leg mount (x
forward, y left, z up); ``kinematics.nominal_foot`` adds the neutral lateral
stance before IK.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cpg import N_LEGS, OscillatorState

H_DEFAULT = 0.25
K2_DEFAULT = 0.02


@dataclass
class MapParams:
    d_step: float = 0.075
    h: float = H_DEFAULT
    k1: np.ndarray = field(default_factory=lambda: np.full(N_LEGS, 0.06))
    k2: float = K2_DEFAULT
    phi_dir: float = 0.0

    def __post_init__(self):
        self.k1 = np.broadcast_to(np.asarray(self.k1, dtype=float), (N_LEGS,)).copy()
        if self.d_step < 0 or self.h <= 0 or self.k2 < 0 or np.any(self.k1 < 0):
            raise ValueError("need d_step >= 0, h > 0, k2 >= 0 and k1 >= 0")


def map_feet(x, y, d_step, k1, phi_dir, h=H_DEFAULT, k2=K2_DEFAULT) -> np.ndarray:
    """Batched mapping.

    ``x``, ``y`` and ``k1`` have shape (..., 6); ``d_step`` and ``phi_dir``
    broadcast against the leading dims. Returns (..., 6, 3).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = np.asarray(d_step, dtype=float)[..., None]
    phi = np.asarray(phi_dir, dtype=float)[..., None]
    fx = -d * x * np.cos(phi)
    fy = -d * x * np.sin(phi)
    fz = np.where(y > 0, -h + k1 * y, -h + k2 * y)
    fx, fy, fz = np.broadcast_arrays(fx, fy, fz)
    return np.stack([fx, fy, fz], axis=-1)


def map_foot_position(s: OscillatorState, mp: MapParams, leg: int) -> np.ndarray:
    x, y = s
    return np.array([
        -mp.d_step * x * np.cos(mp.phi_dir),
        -mp.d_step * x * np.sin(mp.phi_dir),
        -mp.h + mp.k1[leg] * y if y > 0 else -mp.h + mp.k2 * y,
    ])


def swing_clearance(mp: MapParams, mu: float, leg: int) -> float:
    """Peak swing height above nominal ground, k1 * mu."""
    return float(mp.k1[leg] * mu)
