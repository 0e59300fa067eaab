"""Multilevel nesting ladder over any chain sampler.

The failure probability is factored into a product of conditional
probabilities over nested robustness-superlevel domains. Thresholds are
placed adaptively at the empirical median of the current retained samples
(so each conditional is close to one half) and rise toward zero, where the
domain is the failure set itself. Also provides the estimator variance, a
multiplicative error bound with its inversion for sample-count selection,
and a plain Monte-Carlo baseline.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.stats import beta as beta_dist

from .rng import substream
from .warp import weighted_conditional

__all__ = [
    "ChainSampler",
    "NestingRecord",
    "NestingLadder",
    "VerificationResult",
    "VerifyConfig",
    "LadderError",
    "LadderStallError",
    "SeedSearchError",
    "next_threshold",
    "variance",
    "error_bound",
    "required_samples",
    "mc_estimate",
    "McResult",
    "verify",
]


class ChainSampler(Protocol):
    """What the ladder needs from a sampler: base draws, one-step transitions
    at a threshold, per-sample weights, and a simulation counter."""

    @property
    def dim(self) -> int: ...

    @property
    def simulations(self) -> int: ...

    def initial(self, rng: np.random.Generator) -> tuple[np.ndarray, float]: ...

    def step(
        self, x: np.ndarray, rho: float, threshold: float, rng: np.random.Generator
    ) -> tuple[np.ndarray, float]: ...

    def weight(self, x: np.ndarray) -> float: ...


class LadderError(RuntimeError):
    def __init__(self, message: str, ladder: "NestingLadder | None" = None):
        super().__init__(message)
        self.ladder = ladder


class LadderStallError(LadderError):
    pass


class SeedSearchError(LadderError):
    pass


@dataclass
class NestingRecord:
    threshold: float
    conditional: float
    samples: np.ndarray
    rhos: np.ndarray
    weights: np.ndarray


@dataclass
class NestingLadder:
    records: list[NestingRecord] = field(default_factory=list)

    @property
    def thresholds(self) -> list[float]:
        return [r.threshold for r in self.records]

    @property
    def conditionals(self) -> list[float]:
        return [r.conditional for r in self.records]

    @property
    def n_nestings(self) -> int:
        """Nestings beyond the unconstrained base level."""
        return max(len(self.records) - 1, 0)

    @property
    def p_estimate(self) -> float:
        return float(np.prod([r.conditional for r in self.records]))


@dataclass
class VerificationResult:
    p_estimate: float
    ladder: NestingLadder
    variance: float
    simulations_used: int
    failure_samples: np.ndarray
    failure_rhos: np.ndarray
    config: dict


@dataclass(frozen=True)
class VerifyConfig:
    n_ess: int = 250
    n_skip: int = 5
    seed: int = 0
    max_nestings: int = 64
    retry_budget: int = 3
    threads: int = 1

    def to_dict(self) -> dict:
        return {
            "n_ess": self.n_ess,
            "n_skip": self.n_skip,
            "seed": self.seed,
            "max_nestings": self.max_nestings,
            "retry_budget": self.retry_budget,
            "threads": self.threads,
        }


def next_threshold(rhos) -> float:
    """Next nesting threshold: the empirical median, capped at zero.

    A median at or above zero means at least half the samples already fail,
    so the ladder terminates with the final threshold at zero.
    """
    rhos = np.asarray(rhos, dtype=float)
    if rhos.size < 2:
        raise ValueError("need at least two robustness values")
    med = float(np.median(rhos))
    return 0.0 if med >= 0.0 else med


def variance(conditionals, n_ess: int) -> float:
    """Plug-in variance of the product of conditionals.

    Var = prod(Var_k + p_k^2) - prod(p_k^2) with Var_k = p_k (1 - p_k)/N.
    """
    if isinstance(conditionals, NestingLadder):
        conditionals = conditionals.conditionals
    p = np.asarray(conditionals, dtype=float)
    var_k = p * (1.0 - p) / float(n_ess)
    return float(np.prod(var_k + p**2) - np.prod(p**2))


def error_bound(lam: float, delta: float, n_ess: int, k: int) -> float:
    """P(estimate >= lam * true) <= exp(-2 delta^2 log(lam)^2 N / K)."""
    if not lam > 1.0:
        raise ValueError("lambda must be > 1")
    if not (0.0 < delta <= 1.0):
        raise ValueError("delta must be in (0, 1]")
    if n_ess < 1 or k < 1:
        raise ValueError("n_ess and k must be positive")
    return math.exp(-2.0 * delta**2 * math.log(lam) ** 2 * n_ess / k)


def required_samples(lam: float, delta: float, k: int, eps: float) -> int:
    """Smallest per-nesting sample count whose error bound is <= eps."""
    if not (0.0 < eps <= 1.0):
        raise ValueError("eps must be in (0, 1]")
    if not lam > 1.0:
        raise ValueError("lambda must be > 1")
    if not (0.0 < delta <= 1.0):
        raise ValueError("delta must be in (0, 1]")
    if k < 1:
        raise ValueError("k must be positive")
    if eps == 1.0:
        return 1
    n = k * math.log(1.0 / eps) / (2.0 * delta**2 * math.log(lam) ** 2)
    return max(1, math.ceil(n - 1e-12))


@dataclass(frozen=True)
class McResult:
    p_hat: float
    ci_low: float
    ci_high: float
    failures: int
    n_sim: int


def mc_estimate(
    rho_sampler: Callable[[np.random.Generator, int], np.ndarray],
    n_sim: int,
    rng: np.random.Generator,
) -> McResult:
    """Plain Monte-Carlo baseline with a 95% confidence interval.

    Normal approximation in general; exact Clopper-Pearson when fewer than
    five failures are observed.
    """
    if n_sim < 1:
        raise ValueError("n_sim must be >= 1")
    rhos = np.asarray(rho_sampler(rng, n_sim), dtype=float)
    failures = int(np.count_nonzero(rhos >= 0.0))
    p_hat = failures / n_sim
    alpha = 0.05
    if failures < 5:
        low = 0.0 if failures == 0 else float(beta_dist.ppf(alpha / 2, failures, n_sim - failures + 1))
        high = 1.0 if failures == n_sim else float(beta_dist.ppf(1 - alpha / 2, failures + 1, n_sim - failures))
    else:
        half = 1.96 * math.sqrt(p_hat * (1.0 - p_hat) / n_sim)
        low, high = max(0.0, p_hat - half), min(1.0, p_hat + half)
    return McResult(p_hat=p_hat, ci_low=low, ci_high=high, failures=failures, n_sim=n_sim)


def _topup(
    sampler: ChainSampler,
    survivors: np.ndarray,
    survivor_rhos: np.ndarray,
    threshold: float,
    target: int,
    config: VerifyConfig,
    seed_path: tuple,
) -> tuple[np.ndarray, np.ndarray]:
    """Extend the survivor pool to ``target`` retained samples with short
    chains at ``threshold`` (one seed drawn uniformly per chain, n_skip
    discarded steps before each retention). Deterministic per (seed, path,
    chain index), so any thread count yields identical output."""
    need = target - survivors.shape[0]
    if need <= 0:
        return survivors[:target].copy(), survivor_rhos[:target].copy()

    def one_chain(j: int) -> tuple[np.ndarray, float]:
        rng = substream(config.seed, *seed_path, "chain", j)
        idx = int(rng.integers(survivors.shape[0]))
        x, rho = survivors[idx], float(survivor_rhos[idx])
        for _ in range(config.n_skip + 1):
            x, rho = sampler.step(x, rho, threshold, rng)
        return x, rho

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(one_chain, range(need)))
    else:
        results = [one_chain(j) for j in range(need)]

    new_samples = np.vstack([survivors] + [r[0][None, :] for r in results])
    new_rhos = np.concatenate([survivor_rhos, [r[1] for r in results]])
    return new_samples, new_rhos


def verify(sampler: ChainSampler, config: VerifyConfig) -> VerificationResult:
    """Build the nesting ladder adaptively until the threshold reaches zero.

    The sampler is expected to score the *negated* specification, so failure
    is the superlevel set rho >= 0. Samples of each nesting are the previous
    survivors plus chain top-ups; the final nesting retains at least n_ess
    genuine failure samples.
    """
    n = config.n_ess
    init_rng = substream(config.seed, "ladder", "init")

    def draw_initial(count: int) -> tuple[np.ndarray, np.ndarray]:
        xs = np.empty((count, sampler.dim))
        rs = np.empty(count)
        for i in range(count):
            xs[i], rs[i] = sampler.initial(init_rng)
        return xs, rs

    samples, rhos = draw_initial(n)
    weights = np.array([sampler.weight(x) for x in samples])
    ladder = NestingLadder(records=[NestingRecord(-math.inf, 1.0, samples, rhos, weights)])

    # Inputs that produced the current level, kept for the doubled-N retry.
    rerun: Callable[[int], tuple[np.ndarray, np.ndarray]] = draw_initial
    prev_threshold = -math.inf

    for k in range(1, config.max_nestings + 1):
        attempts = 0
        while True:
            threshold = next_threshold(rhos)
            if threshold <= prev_threshold:
                raise LadderStallError(
                    f"threshold stalled at {threshold} after nesting {k - 1}", ladder
                )
            p_k = weighted_conditional(weights, rhos >= threshold, np.ones_like(rhos, dtype=bool))
            mask = rhos >= threshold
            if mask.any():
                break
            attempts += 1
            if attempts > config.retry_budget:
                raise SeedSearchError(
                    f"no feasible seed for nesting {k} after {attempts - 1} retries", ladder
                )
            samples, rhos = rerun(n * 2**attempts)
            weights = np.array([sampler.weight(x) for x in samples])
            prev = ladder.records[-1]
            ladder.records[-1] = NestingRecord(prev.threshold, prev.conditional, samples, rhos, weights)

        survivors, survivor_rhos = samples[mask], rhos[mask]

        def rerun_level(count: int, _s=survivors, _r=survivor_rhos, _t=threshold, _k=k):
            return _topup(
                sampler, _s, _r, _t, count, config, seed_path=("nest", _k, "grow")
            )

        samples, rhos = _topup(
            sampler, survivors, survivor_rhos, threshold, n, config, seed_path=("nest", k)
        )
        weights = np.array([sampler.weight(x) for x in samples])
        ladder.records.append(NestingRecord(threshold, p_k, samples, rhos, weights))
        rerun = rerun_level
        prev_threshold = threshold
        if threshold == 0.0:
            break
    else:
        raise LadderStallError(
            f"ladder did not reach threshold 0 within {config.max_nestings} nestings", ladder
        )

    final = ladder.records[-1]
    return VerificationResult(
        p_estimate=ladder.p_estimate,
        ladder=ladder,
        variance=variance(ladder.conditionals[1:], n),
        simulations_used=sampler.simulations,
        failure_samples=final.samples,
        failure_rhos=final.rhos,
        config=config.to_dict(),
    )
