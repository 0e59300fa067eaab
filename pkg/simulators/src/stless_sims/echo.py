"""Identity simulator: the uncertainty vector reshaped into the signal."""
from __future__ import annotations

import numpy as np

from .protocol import SimManifest


def manifest(steps: int, channels: int) -> SimManifest:
    names = tuple(f"y{i + 1}" for i in range(channels))
    return SimManifest(l=steps * channels, channels=names, horizon=steps)


def run(w: np.ndarray, steps: int, channels: int) -> np.ndarray:
    return np.asarray(w, dtype=float).reshape(steps, channels)
