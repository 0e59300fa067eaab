"""Unicycle with turn-rate actuation noise.

States advance by x_{t+1} = x_t + dt*v*[cos(psi_t), sin(psi_t)] and
psi_{t+1} = psi_t + dt*(omega + w_t); one noise entry per step. The emitted
channels are the position plus distances to an obstacle and to a goal, so
affine predicates can express avoid/reach properties.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .protocol import SimManifest

CHANNELS = ("px", "py", "dist_obstacle", "dist_goal")


@dataclass(frozen=True)
class UnicycleParams:
    steps: int
    dt: float = 0.1
    speed: float = 1.0
    omega: float = 0.5
    x0: float = 0.0
    y0: float = 0.0
    psi0: float = 0.0
    obstacle: tuple[float, float] = (1.0, 1.0)
    goal: tuple[float, float] = (2.0, 0.0)


def manifest(params: UnicycleParams) -> SimManifest:
    return SimManifest(l=params.steps, channels=CHANNELS, horizon=params.steps)


def trajectory(w: np.ndarray, params: UnicycleParams) -> np.ndarray:
    """Signal rows for t = 1..steps; ``w`` may be batched as (..., steps)."""
    w = np.asarray(w, dtype=float)
    batch = w.shape[:-1]
    if w.shape[-1] != params.steps:
        raise ValueError(f"expected {params.steps} noise entries, got {w.shape[-1]}")
    px = np.full(batch, params.x0, dtype=float)
    py = np.full(batch, params.y0, dtype=float)
    psi = np.full(batch, params.psi0, dtype=float)
    out = np.empty(batch + (params.steps, len(CHANNELS)))
    ox, oy = params.obstacle
    gx, gy = params.goal
    for t in range(params.steps):
        px = px + params.dt * params.speed * np.cos(psi)
        py = py + params.dt * params.speed * np.sin(psi)
        psi = psi + params.dt * (params.omega + w[..., t])
        out[..., t, 0] = px
        out[..., t, 1] = py
        out[..., t, 2] = np.hypot(px - ox, py - oy)
        out[..., t, 3] = np.hypot(px - gx, py - gy)
    return out


def nominal_arc(params: UnicycleParams) -> np.ndarray:
    """Closed form of the zero-noise positions: a constant-rate turn gives a
    Dirichlet-kernel sum of the heading cosines/sines."""
    t = np.arange(1, params.steps + 1)
    c = params.dt * params.omega
    if abs(c) < 1e-12:
        sx = t * np.cos(params.psi0)
        sy = t * np.sin(params.psi0)
    else:
        # sum_{k=0}^{t-1} cos(psi0 + c k) = cos(psi0 + c (t-1)/2) sin(c t / 2) / sin(c / 2)
        kernel = np.sin(c * t / 2.0) / np.sin(c / 2.0)
        sx = np.cos(params.psi0 + c * (t - 1) / 2.0) * kernel
        sy = np.sin(params.psi0 + c * (t - 1) / 2.0) * kernel
    px = params.x0 + params.dt * params.speed * sx
    py = params.y0 + params.dt * params.speed * sy
    return np.stack([px, py], axis=1)
