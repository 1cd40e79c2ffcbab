"""Six coupled Hopf oscillators, one per leg.

State arrays carry the leg axis last, so ``x`` and ``y`` may have any leading
batch shape ``(..., 6)``. Leg order is fixed: LF, RF, LM, RM, LB, RB.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

LEGS = ("LF", "RF", "LM", "RM", "LB", "RB")
N_LEGS = len(LEGS)
LF, RF, LM, RM, LB, RB = range(N_LEGS)

EPS_RADIUS = 1e-6
COUPLING_MODES = ("additive", "rotation")


class DegenerateOscillator(ValueError):
    """An oscillator sits inside the degeneracy ball around the origin."""


class OscillatorState(NamedTuple):
    x: float
    y: float


class NetworkState(NamedTuple):
    x: np.ndarray  # (..., 6)
    y: np.ndarray  # (..., 6)


def tripod_phases(group_a=(LF, RM, LB)) -> np.ndarray:
    """Leg phases for a tripod gait: ``group_a`` at 0, the rest at pi."""
    phases = np.full(N_LEGS, np.pi)
    phases[list(group_a)] = 0.0
    return phases


def phase_matrix(phases) -> np.ndarray:
    """theta[i, j] = phase[i] - phase[j]."""
    phases = np.asarray(phases, dtype=float)
    return phases[:, None] - phases[None, :]


def tripod_phase_matrix(group_a=(LF, RM, LB)) -> np.ndarray:
    return phase_matrix(tripod_phases(group_a))


@dataclass
class CpgParams:
    alpha: float = 100.0
    beta: float = 100.0
    mu: float = 1.0
    omega: float = 3 * np.pi
    k: float = 5.0
    theta: np.ndarray = field(default_factory=tripod_phase_matrix)
    coupling: str = "additive"

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.validate()

    def validate(self):
        if not (self.alpha > 0 and self.beta > 0 and self.mu > 0 and self.omega > 0):
            raise ValueError("alpha, beta, mu and omega must be positive")
        if self.k < 0:
            raise ValueError("coupling strength k must be non-negative")
        if self.theta.shape != (N_LEGS, N_LEGS):
            raise ValueError(f"theta must be {N_LEGS}x{N_LEGS}, got {self.theta.shape}")
        if self.coupling not in COUPLING_MODES:
            raise ValueError(f"coupling must be one of {COUPLING_MODES}")
        if not np.allclose(np.sin(np.diag(self.theta)), 0.0) or not np.allclose(
            np.cos(np.diag(self.theta)), 1.0
        ):
            raise ValueError("theta diagonal must be zero")
        skew = self.theta + self.theta.T
        if not (np.allclose(np.sin(skew), 0, atol=1e-9) and np.allclose(np.cos(skew), 1, atol=1e-9)):
            raise ValueError("theta must be antisymmetric modulo 2*pi")


def hopf_derivative(x, y, p: CpgParams):
    """Uncoupled Hopf vector field. Works elementwise on arrays."""
    r2 = x * x + y * y
    dx = p.alpha * (p.mu**2 - r2) * x - p.omega * y
    dy = p.beta * (p.mu**2 - r2) * y + p.omega * x
    return dx, dy


def _check_radius(r):
    if np.any(r < EPS_RADIUS):
        raise DegenerateOscillator(f"oscillator radius below {EPS_RADIUS}")


def coupling_term(state: NetworkState, p: CpgParams, i: int, j: int):
    """Pairwise coupling (dx, dy) contributed by oscillator j to oscillator i.

    In ``additive`` mode this is the -sin/cos weighting of (x_j + y_j)/r_j; in
    ``rotation`` mode the unit vector of j rotated by theta_ij.
    """
    xj = np.asarray(state.x)[..., j]
    yj = np.asarray(state.y)[..., j]
    r = np.sqrt(xj * xj + yj * yj)
    _check_radius(r)
    th = p.theta[i, j]
    if p.coupling == "additive":
        s = (xj + yj) / r
        return -np.sin(th) * s, np.cos(th) * s
    ux, uy = xj / r, yj / r
    return np.cos(th) * ux - np.sin(th) * uy, np.sin(th) * ux + np.cos(th) * uy


def _coupling_matrices(p: CpgParams):
    s = np.sin(p.theta)
    c = np.cos(p.theta)
    np.fill_diagonal(s, 0.0)
    np.fill_diagonal(c, 0.0)
    return s, c


def network_derivative(x: np.ndarray, y: np.ndarray, p: CpgParams):
    """Full coupled vector field; the sum runs over j != i."""
    r = np.sqrt(x * x + y * y)
    _check_radius(r)
    dx, dy = hopf_derivative(x, y, p)
    if p.k == 0.0:
        return dx, dy
    s, c = _coupling_matrices(p)
    if p.coupling == "additive":
        u = (x + y) / r
        # -k * sum(Delta_x) with Delta_x = -sin(theta) * u
        return dx + p.k * (u @ s.T), dy + p.k * (u @ c.T)
    ux, uy = x / r, y / r
    return (
        dx + p.k * (ux @ c.T - uy @ s.T),
        dy + p.k * (ux @ s.T + uy @ c.T),
    )


def step_network(state: NetworkState, p: CpgParams, dt: float = 1e-3, method: str = "euler") -> NetworkState:
    """Advance the network by one integration step of length ``dt``."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    x = np.asarray(state.x, dtype=float)
    y = np.asarray(state.y, dtype=float)
    if dt == 0:
        return NetworkState(x.copy(), y.copy())
    if method == "euler":
        dx, dy = network_derivative(x, y, p)
        return NetworkState(x + dt * dx, y + dt * dy)
    if method == "rk4":
        k1x, k1y = network_derivative(x, y, p)
        k2x, k2y = network_derivative(x + 0.5 * dt * k1x, y + 0.5 * dt * k1y, p)
        k3x, k3y = network_derivative(x + 0.5 * dt * k2x, y + 0.5 * dt * k2y, p)
        k4x, k4y = network_derivative(x + dt * k3x, y + dt * k3y, p)
        return NetworkState(
            x + dt / 6 * (k1x + 2 * k2x + 2 * k3x + k4x),
            y + dt / 6 * (k1y + 2 * k2y + 2 * k3y + k4y),
        )
    raise ValueError(f"unknown integration method {method!r}")


def simulate(state: NetworkState, p: CpgParams, duration: float, dt: float = 1e-3, method: str = "euler") -> NetworkState:
    for _ in range(int(round(duration / dt))):
        state = step_network(state, p, dt, method)
    return state


def phase_of(x, y):
    """atan2 phase in (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_radius(np.sqrt(x * x + y * y))
    ph = np.arctan2(y, x)
    # atan2 returns -pi for (negative x, -0.0 y); fold onto +pi
    return np.where(ph <= -np.pi, np.pi, ph)


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def phase_errors(state: NetworkState, theta: np.ndarray) -> np.ndarray:
    """Deviation of every measured pairwise phase difference from theta, shape (..., 6, 6)."""
    ph = phase_of(state.x, state.y)
    diff = ph[..., :, None] - ph[..., None, :]
    return wrap_angle(diff - theta)


def initial_state(
    rng: np.random.Generator,
    phases=None,
    radius: float = 0.1,
    noise: float = 0.3,
    batch: tuple = (),
) -> NetworkState:
    """Oscillators at ``radius`` with the target gait phases plus uniform noise."""
    if phases is None:
        phases = tripod_phases()
    ph = np.asarray(phases) + rng.uniform(-noise, noise, size=batch + (N_LEGS,))
    return NetworkState(radius * np.cos(ph), radius * np.sin(ph))
