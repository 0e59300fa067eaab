"""Rejection-free elliptical slice sampling on robustness superlevel sets.

Each step draws one auxiliary Gaussian point, intersects the resulting
ellipse with every lifted predicate hyperplane in closed form (shifted by
both +rho and -rho, which may add spurious boundaries but never loses a
root), classifies the arcs between consecutive intersections by the
robustness at their midpoints, and samples one uniform angle from the
active arcs. No candidate is ever discarded.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .lingauss import TrajectoryGaussian, lift_predicates
from .stl import StlFormula, negate, robustness_batch

__all__ = [
    "AngularDomain",
    "Ellipse",
    "AnchorInfeasibleError",
    "hyperplane_roots",
    "active_segments",
    "ess_step",
    "chain",
    "LinearStlSampler",
]

TWO_PI = 2.0 * np.pi
_MERGE_TOL = 1e-12
_SLIVER = 1e-14


class AnchorInfeasibleError(RuntimeError):
    """The current chain point does not satisfy the threshold it must anchor."""


@dataclass(frozen=True)
class Ellipse:
    """Centered ellipse: point(theta) = mean + anchor*cos(theta) + auxiliary*sin(theta)."""

    anchor: np.ndarray
    auxiliary: np.ndarray
    mean: np.ndarray

    def point(self, theta: float) -> np.ndarray:
        return self.mean + self.anchor * np.cos(theta) + self.auxiliary * np.sin(theta)

    def points(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.asarray(thetas, dtype=float)
        return (
            self.mean[None, :]
            + np.outer(np.cos(thetas), self.anchor)
            + np.outer(np.sin(thetas), self.auxiliary)
        )


@dataclass(frozen=True)
class AngularDomain:
    """Disjoint arcs of the circle, stored as (start, length) with support for
    arcs that wrap through zero; normalized (sorted, merged, non-empty)."""

    arcs: tuple[tuple[float, float], ...]

    @staticmethod
    def full() -> "AngularDomain":
        return AngularDomain(((0.0, TWO_PI),))

    @staticmethod
    def empty() -> "AngularDomain":
        return AngularDomain(())

    @staticmethod
    def from_intervals(intervals) -> "AngularDomain":
        """Normalize raw (start, length) pairs: wrap, merge, drop slivers."""
        segments = []
        for start, length in intervals:
            if length <= _SLIVER:
                continue
            if length >= TWO_PI:
                return AngularDomain.full()
            start = float(start) % TWO_PI
            end = start + float(length)
            if end <= TWO_PI:
                segments.append((start, end))
            else:
                segments.append((start, TWO_PI))
                segments.append((0.0, end - TWO_PI))
        if not segments:
            return AngularDomain.empty()
        segments.sort()
        merged = [list(segments[0])]
        for a, b in segments[1:]:
            if a <= merged[-1][1] + _SLIVER:
                merged[-1][1] = max(merged[-1][1], b)
            else:
                merged.append([a, b])
        if len(merged) > 1 and merged[0][0] <= _SLIVER and merged[-1][1] >= TWO_PI - _SLIVER:
            first = merged.pop(0)
            merged[-1][1] = TWO_PI + first[1]
        arcs = tuple(
            (a % TWO_PI, b - a) for a, b in merged if b - a > _SLIVER
        )
        total = sum(length for _, length in arcs)
        if total >= TWO_PI - _SLIVER:
            return AngularDomain.full()
        return AngularDomain(arcs)

    @property
    def measure(self) -> float:
        return sum(length for _, length in self.arcs)

    @property
    def is_empty(self) -> bool:
        return not self.arcs

    def contains(self, theta: float, tol: float = 0.0) -> bool:
        theta = theta % TWO_PI
        for start, length in self.arcs:
            offset = (theta - start) % TWO_PI
            if -tol <= offset < length + tol:
                return True
        return False

    def sample(self, rng: np.random.Generator) -> float:
        """One uniform draw from the union of arcs (single rng call)."""
        if not self.arcs:
            raise ValueError("cannot sample from an empty angular domain")
        u = rng.uniform(0.0, self.measure)
        for start, length in self.arcs:
            if u < length:
                return (start + u) % TWO_PI
            u -= length
        return (self.arcs[-1][0] + self.arcs[-1][1] * (1 - 1e-16)) % TWO_PI

    def subtract(self, center: float, radius: float) -> "AngularDomain":
        """Remove the closed interval [center - radius, center + radius]."""
        if radius <= 0.0:
            return self
        if radius >= np.pi:
            return AngularDomain.empty()
        lo = (center - radius) % TWO_PI
        hi = lo + 2.0 * radius
        cut = [(lo, min(hi, TWO_PI))]
        if hi > TWO_PI:
            cut.append((0.0, hi - TWO_PI))
        segments = []
        for start, length in self.arcs:
            end = start + length
            pieces = [(start, min(end, TWO_PI))]
            if end > TWO_PI:
                pieces.append((0.0, end - TWO_PI))
            for a, b in pieces:
                keep = [(a, b)]
                for clo, chi in cut:
                    next_keep = []
                    for ka, kb in keep:
                        if chi <= ka or clo >= kb:
                            next_keep.append((ka, kb))
                            continue
                        if ka < clo:
                            next_keep.append((ka, clo))
                        if chi < kb:
                            next_keep.append((chi, kb))
                    keep = next_keep
                segments.extend((a2, b2 - a2) for a2, b2 in keep)
        return AngularDomain.from_intervals(segments)


def hyperplane_roots(ellipse: Ellipse, a: np.ndarray, c: float) -> np.ndarray:
    """Angles where a . point(theta) + c = 0 (0, 1 or 2 of them)."""
    a = np.asarray(a, dtype=float)
    p = float(a @ ellipse.anchor)
    s = float(a @ ellipse.auxiliary)
    d = float(a @ ellipse.mean) + float(c)
    return _roots_from_ps(np.array([p]), np.array([s]), np.array([d]))


def _roots_from_ps(p: np.ndarray, s: np.ndarray, d: np.ndarray) -> np.ndarray:
    radius = np.hypot(p, s)
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(d) & (radius > 0.0) & (np.abs(d) <= radius)
    if not ok.any():
        return np.empty(0)
    base = np.arctan2(s[ok], p[ok])
    delta = np.arccos(np.clip(-d[ok] / radius[ok], -1.0, 1.0))
    roots = np.concatenate([base + delta, base - delta]) % TWO_PI
    return np.unique(roots)


def _merge_close(roots: np.ndarray, tol: float = _MERGE_TOL) -> np.ndarray:
    """Collapse roots within tol of each other (cyclically) to single points."""
    if roots.size == 0:
        return roots
    roots = np.sort(roots % TWO_PI)
    keep = [roots[0]]
    for r in roots[1:]:
        if r - keep[-1] > tol:
            keep.append(r)
    if len(keep) > 1 and (keep[0] + TWO_PI) - keep[-1] <= tol:
        keep.pop()
    return np.asarray(keep)


def active_segments(
    ellipse: Ellipse,
    rho_fn: Callable[[np.ndarray], np.ndarray],
    varrho: float,
    planes_a: np.ndarray,
    planes_c: np.ndarray,
    anchor_rho: float | None = None,
) -> AngularDomain:
    """Arcs of the ellipse where the robustness is >= varrho.

    ``rho_fn`` maps a (B, dim) batch of points to (B,) robustness values.
    Roots of every hyperplane shifted by both +varrho and -varrho are
    collected; arcs between consecutive roots are classified at midpoints.
    """
    if anchor_rho is None:
        anchor_rho = float(rho_fn(ellipse.point(0.0)[None, :])[0])
    if not (anchor_rho >= varrho):
        raise AnchorInfeasibleError(
            f"anchor robustness {anchor_rho} below threshold {varrho}"
        )
    planes_a = np.atleast_2d(np.asarray(planes_a, dtype=float))
    planes_c = np.atleast_1d(np.asarray(planes_c, dtype=float))
    if planes_a.shape[0] == 0 or not np.isfinite(varrho):
        roots = np.empty(0)
    else:
        p = planes_a @ ellipse.anchor
        s = planes_a @ ellipse.auxiliary
        d = planes_a @ ellipse.mean + planes_c
        roots = np.concatenate(
            [_roots_from_ps(p, s, d - varrho), _roots_from_ps(p, s, d + varrho)]
        )
        roots = _merge_close(roots)
    if roots.size == 0:
        return AngularDomain.full()

    bounds = np.concatenate([roots, [roots[0] + TWO_PI]])
    midpoints = (bounds[:-1] + bounds[1:]) / 2.0 % TWO_PI
    rho_mid = rho_fn(ellipse.points(midpoints))
    active = rho_mid >= varrho

    # The arc holding theta=0 must stay active: the anchor is feasible.
    zero_arc = int(np.searchsorted(roots, 0.0, side="right") - 1) % roots.size
    active[zero_arc] = True

    intervals = [
        (bounds[i], bounds[i + 1] - bounds[i]) for i in range(roots.size) if active[i]
    ]
    return AngularDomain.from_intervals(intervals)


def ess_step(
    current: np.ndarray,
    current_rho: float,
    mean: np.ndarray,
    cov_factor: np.ndarray,
    rho_fn: Callable[[np.ndarray], np.ndarray],
    varrho: float,
    planes_a: np.ndarray,
    planes_c: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """One rejection-free ESS transition from ``current`` (robustness known)."""
    nu0 = current - mean
    nu1 = cov_factor @ rng.standard_normal(cov_factor.shape[1])
    ellipse = Ellipse(anchor=nu0, auxiliary=nu1, mean=mean)
    domain = active_segments(ellipse, rho_fn, varrho, planes_a, planes_c, anchor_rho=current_rho)
    for _ in range(8):
        theta = domain.sample(rng)
        candidate = ellipse.point(theta)
        rho = float(rho_fn(candidate[None, :])[0])
        if rho >= varrho:
            return candidate, rho
        # Numerically possible only when theta lands within float noise of an
        # arc boundary; redraw from the same domain.
    raise AnchorInfeasibleError("exhausted redraws for a feasible angle")


def chain(
    x0: np.ndarray,
    rho0: float,
    step_fn: Callable[[np.ndarray, float, np.random.Generator], tuple[np.ndarray, float]],
    n_keep: int,
    n_skip: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Run a chain retaining ``n_keep`` samples, discarding ``n_skip`` between
    consecutive retentions (n_keep * (n_skip + 1) steps in total)."""
    x, rho = np.asarray(x0, dtype=float), float(rho0)
    kept = np.empty((n_keep, x.shape[0]))
    rhos = np.empty(n_keep)
    for i in range(n_keep):
        for _ in range(n_skip + 1):
            x, rho = step_fn(x, rho, rng)
        kept[i] = x
        rhos[i] = rho
    return kept, rhos


class LinearStlSampler:
    """Chain sampler over trajectory space: exact Gaussian geometry plus
    closed-form ellipse/hyperplane intersections for the lifted predicates.

    Works internally with the negated specification so that failure is the
    superlevel set rho >= 0 and nesting thresholds rise toward zero.
    """

    def __init__(self, gaussian: TrajectoryGaussian, phi: StlFormula, negate_spec: bool = True):
        self.gaussian = gaussian
        self.psi = negate(phi) if negate_spec else phi
        planes = lift_predicates(self.psi, gaussian)
        self.planes_a = np.array([a for a, _, _, _ in planes])
        self.planes_c = np.array([c for _, c, _, _ in planes])
        self._sims = 0

    @property
    def dim(self) -> int:
        return self.gaussian.dim

    @property
    def simulations(self) -> int:
        """Trajectory draws consumed (initial draws plus one per chain step)."""
        return self._sims

    def rho_batch(self, x: np.ndarray) -> np.ndarray:
        signals = self.gaussian.to_signal_batch(x)
        return robustness_batch(signals, self.psi)

    def initial(self, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        x = self.gaussian.draw(rng)
        self._sims += 1
        return x, float(self.rho_batch(x[None, :])[0])

    def step(
        self, x: np.ndarray, rho: float, threshold: float, rng: np.random.Generator
    ) -> tuple[np.ndarray, float]:
        self._sims += 1
        return ess_step(
            x, rho, self.gaussian.mean, self.gaussian.cov_factor,
            self.rho_batch, threshold, self.planes_a, self.planes_c, rng,
        )

    def weight(self, x: np.ndarray) -> float:
        return 1.0

    def mc_rhos(self, rng: np.random.Generator, count: int, batch: int = 100_000) -> np.ndarray:
        """Robustness values of ``count`` independent draws (for MC baselines)."""
        out = np.empty(count)
        done = 0
        factor = self.gaussian.cov_factor
        while done < count:
            b = min(batch, count - done)
            z = rng.standard_normal((b, factor.shape[1]))
            x = self.gaussian.mean[None, :] + z @ factor.T
            out[done : done + b] = self.rho_batch(x)
            done += b
        self._sims += count
        return out
