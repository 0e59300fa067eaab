"""Bijective transforms of a standard normal base, and warping weights.

The sampler geometry always lives in base space x ~ N(0, I); a bijector maps
base points to uncertainty vectors w at simulation time. Conditional
probabilities are estimated with per-sample weights; for a bijector that is
the exact transport of the target distribution those weights are unity, and
a nontrivial correction applies only when an explicit target density that
differs from the push-forward is declared (see ``pullback_weight``).
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq
from scipy.special import log_ndtr, ndtr, ndtri

__all__ = [
    "Bijector",
    "Affine",
    "ComponentwiseInverseCdf",
    "MonotoneSpline",
    "CoordinateSlice",
    "Composition",
    "UniformTarget",
    "ExponentialTarget",
    "TruncatedNormalTarget",
    "WeightedSample",
    "identity",
    "compose",
    "weighted_conditional",
    "pullback_weight",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _std_normal_logpdf(x: np.ndarray) -> np.ndarray:
    return -0.5 * np.square(x) - _LOG_SQRT_2PI


class Bijector(ABC):
    """Differentiable bijection R^l -> R^l applied coordinatewise or affinely.

    All methods accept arrays shaped (..., l) and act on the last axis.
    """

    @abstractmethod
    def forward(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def inverse(self, w: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def log_det_jacobian(self, x: np.ndarray) -> np.ndarray:
        """log |det dw/dx| at x, summed over coordinates (shape (...,))."""

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


class Affine(Bijector):
    """w = scale * x + offset with elementwise nonzero scale."""

    def __init__(self, scale, offset):
        self.scale = np.atleast_1d(np.asarray(scale, dtype=float))
        self.offset = np.atleast_1d(np.asarray(offset, dtype=float))
        if np.any(self.scale == 0.0):
            raise ValueError("affine scale entries must be nonzero")

    def forward(self, x):
        return np.asarray(x, dtype=float) * self.scale + self.offset

    def inverse(self, w):
        return (np.asarray(w, dtype=float) - self.offset) / self.scale

    def log_det_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        ld = float(np.sum(np.log(np.abs(self.scale)) * np.ones(x.shape[-1])))
        return np.full(x.shape[:-1], ld)


def identity() -> Affine:
    return Affine(1.0, 0.0)


@dataclass(frozen=True)
class UniformTarget:
    a: float
    b: float

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError("uniform target needs a < b")

    def quantile(self, x):
        return self.a + (self.b - self.a) * ndtr(x)

    def x_from_w(self, w):
        return ndtri((w - self.a) / (self.b - self.a))

    def log_pdf(self, w):
        return np.full_like(np.asarray(w, dtype=float), -math.log(self.b - self.a))


@dataclass(frozen=True)
class ExponentialTarget:
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("exponential rate must be positive")

    def quantile(self, x):
        # w = -log(1 - Phi(x)) / rate, via the log survival function for
        # accuracy deep in the tail.
        return -log_ndtr(-np.asarray(x, dtype=float)) / self.rate

    def x_from_w(self, w):
        return -ndtri(np.exp(-self.rate * np.asarray(w, dtype=float)))

    def log_pdf(self, w):
        return math.log(self.rate) - self.rate * np.asarray(w, dtype=float)


@dataclass(frozen=True)
class TruncatedNormalTarget:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("truncated normal target needs lo < hi")

    def _mass(self):
        return ndtr(self.hi) - ndtr(self.lo)

    def quantile(self, x):
        u = ndtr(np.asarray(x, dtype=float))
        return ndtri(ndtr(self.lo) + u * self._mass())

    def x_from_w(self, w):
        u = (ndtr(np.asarray(w, dtype=float)) - ndtr(self.lo)) / self._mass()
        return ndtri(np.clip(u, 0.0, 1.0))

    def log_pdf(self, w):
        return _std_normal_logpdf(np.asarray(w, dtype=float)) - math.log(self._mass())


class ComponentwiseInverseCdf(Bijector):
    """Coordinate i maps through w_i = F_i^{-1}(Phi(x_i)) for a 1-D target."""

    def __init__(self, targets: Sequence):
        if not targets:
            raise ValueError("need at least one coordinate target")
        self.targets = tuple(targets)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for i, target in enumerate(self.targets):
            out[..., i] = target.quantile(x[..., i])
        return out

    def inverse(self, w):
        w = np.asarray(w, dtype=float)
        out = np.empty_like(w)
        for i, target in enumerate(self.targets):
            out[..., i] = target.x_from_w(w[..., i])
        return out

    def log_det_jacobian(self, x):
        # dw/dx = phi(x) / f_target(w), per coordinate.
        x = np.asarray(x, dtype=float)
        w = self.forward(x)
        total = np.zeros(x.shape[:-1])
        for i, target in enumerate(self.targets):
            total = total + _std_normal_logpdf(x[..., i]) - target.log_pdf(w[..., i])
        return total


class MonotoneSpline(Bijector):
    """Tabulated monotone map per coordinate (PCHIP through the knots,
    linear continuation beyond them), emulating an externally trained flow."""

    def __init__(self, knots: Sequence[tuple[Sequence[float], Sequence[float]]]):
        self._interps = []
        self._bounds = []
        for xs, ws in knots:
            xs = np.asarray(xs, dtype=float)
            ws = np.asarray(ws, dtype=float)
            if len(xs) < 2 or np.any(np.diff(xs) <= 0) or np.any(np.diff(ws) <= 0):
                raise ValueError("spline knots must be strictly increasing in x and w")
            interp = PchipInterpolator(xs, ws, extrapolate=False)
            deriv = interp.derivative()
            slope_lo = max(float(deriv(xs[0])), 1e-8)
            slope_hi = max(float(deriv(xs[-1])), 1e-8)
            self._interps.append((interp, deriv))
            self._bounds.append((xs[0], xs[-1], ws[0], ws[-1], slope_lo, slope_hi))

    def _fwd1(self, i, x):
        interp, _ = self._interps[i]
        x_lo, x_hi, w_lo, w_hi, s_lo, s_hi = self._bounds[i]
        x = np.asarray(x, dtype=float)
        out = np.where(
            x < x_lo, w_lo + s_lo * (x - x_lo),
            np.where(x > x_hi, w_hi + s_hi * (x - x_hi), 0.0),
        )
        inside = (x >= x_lo) & (x <= x_hi)
        if np.any(inside):
            out = np.where(inside, interp(np.clip(x, x_lo, x_hi)), out)
        return out

    def _deriv1(self, i, x):
        _, deriv = self._interps[i]
        x_lo, x_hi, _, _, s_lo, s_hi = self._bounds[i]
        x = np.asarray(x, dtype=float)
        out = np.where(x < x_lo, s_lo, np.where(x > x_hi, s_hi, 0.0))
        inside = (x >= x_lo) & (x <= x_hi)
        if np.any(inside):
            out = np.where(inside, np.maximum(deriv(np.clip(x, x_lo, x_hi)), 1e-300), out)
        return out

    def _inv1(self, i, w):
        x_lo, x_hi, w_lo, w_hi, s_lo, s_hi = self._bounds[i]
        if w <= w_lo:
            return x_lo + (w - w_lo) / s_lo
        if w >= w_hi:
            return x_hi + (w - w_hi) / s_hi
        return brentq(lambda x: self._fwd1(i, x) - w, x_lo, x_hi, xtol=1e-13)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for i in range(len(self._interps)):
            out[..., i] = self._fwd1(i, x[..., i])
        return out

    def inverse(self, w):
        w = np.asarray(w, dtype=float)
        out = np.empty_like(w)
        flat = w.reshape(-1, w.shape[-1])
        flat_out = out.reshape(-1, w.shape[-1])
        for row in range(flat.shape[0]):
            for i in range(len(self._interps)):
                flat_out[row, i] = self._inv1(i, flat[row, i])
        return out

    def log_det_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        total = np.zeros(x.shape[:-1])
        for i in range(len(self._interps)):
            total = total + np.log(self._deriv1(i, x[..., i]))
        return total


class CoordinateSlice(Bijector):
    """Apply an inner bijector to a contiguous coordinate range, identity
    elsewhere (the config block's per-range entries build on this)."""

    def __init__(self, inner: Bijector, start: int, stop: int):
        if stop <= start or start < 0:
            raise ValueError("coordinate range must satisfy 0 <= start < stop")
        self.inner = inner
        self.start = int(start)
        self.stop = int(stop)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        out = x.copy()
        out[..., self.start : self.stop] = self.inner.forward(x[..., self.start : self.stop])
        return out

    def inverse(self, w):
        w = np.asarray(w, dtype=float)
        out = w.copy()
        out[..., self.start : self.stop] = self.inner.inverse(w[..., self.start : self.stop])
        return out

    def log_det_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        return self.inner.log_det_jacobian(x[..., self.start : self.stop])


class Composition(Bijector):
    """Apply parts in order; log-determinants add along the chain."""

    def __init__(self, parts: Sequence[Bijector]):
        if not parts:
            raise ValueError("composition needs at least one part")
        self.parts = tuple(parts)

    def forward(self, x):
        out = np.asarray(x, dtype=float)
        for part in self.parts:
            out = part.forward(out)
        return out

    def inverse(self, w):
        out = np.asarray(w, dtype=float)
        for part in reversed(self.parts):
            out = part.inverse(out)
        return out

    def log_det_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        total = np.zeros(x.shape[:-1])
        for part in self.parts:
            total = total + part.log_det_jacobian(x)
            x = part.forward(x)
        return total


def compose(parts: Sequence[Bijector]) -> Bijector:
    return parts[0] if len(parts) == 1 else Composition(parts)


@dataclass(frozen=True)
class WeightedSample:
    """Base-space point, its image, and the Jacobian determinant there."""

    x: np.ndarray
    w: np.ndarray
    weight: float

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError("warping weight must be positive")

    @staticmethod
    def from_base(bijector: Bijector, x: np.ndarray) -> "WeightedSample":
        x = np.asarray(x, dtype=float)
        return WeightedSample(
            x=x, w=bijector.forward(x),
            weight=float(np.exp(bijector.log_det_jacobian(x))),
        )


def weighted_conditional(weights, in_level_k, in_level_prev) -> float:
    """Weighted conditional probability: sum(a*1_k) / sum(a*1_{k-1})."""
    weights = np.asarray(weights, dtype=float)
    num = float(np.sum(weights * np.asarray(in_level_k, dtype=bool)))
    den = float(np.sum(weights * np.asarray(in_level_prev, dtype=bool)))
    if den == 0.0:
        raise ZeroDivisionError("weighted conditional has zero denominator")
    return num / den


def pullback_weight(
    bijector: Bijector,
    x: np.ndarray,
    target_log_density: Callable[[np.ndarray], float] | None = None,
) -> float:
    """Importance weight of a base-space sample against the declared target.

    The weight is the ratio between the target density at w = forward(x) and
    the density the sampler actually realizes there, which by the change of
    variables is exp(log target(w) + log|det dw/dx| - log N(x; 0, I)). When
    the target IS the bijector's own push-forward (the default), the ratio
    is identically one.
    """
    if target_log_density is None:
        return 1.0
    x = np.asarray(x, dtype=float)
    w = bijector.forward(x)
    log_num = float(target_log_density(w)) + float(bijector.log_det_jacobian(x))
    log_den = float(np.sum(_std_normal_logpdf(x)))
    return float(np.exp(log_num - log_den))
