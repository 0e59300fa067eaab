"""Score-function gradients of the failure probability and gradient descent.

Failure-set samples from the final nesting give the conditional expectation
of the Gaussian log-density gradient (the score direction); chain rule
through the trajectory sensitivities converts it to any system parameter.
The descent step applies the probability-normalized gradient, so a constant
learning rate works across probability scales.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .ess import LinearStlSampler
from .hdr import LadderError, VerificationResult, VerifyConfig, verify
from .lingauss import LtvSystem, TrajectoryGaussian, sensitivities, unroll
from .rng import substream
from .stl import StlFormula

__all__ = [
    "grad_mu",
    "grad_sigma",
    "grad_parameter",
    "SynthesisProblem",
    "IterationRecord",
    "SynthesisTrace",
    "synthesize",
    "fresh_failure_samples",
    "find_satisfying_controls",
]


def _solve_cov(cov: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(cov, rhs)
    except np.linalg.LinAlgError:
        warnings.warn("covariance is singular; using pseudo-inverse", RuntimeWarning)
        return np.linalg.pinv(cov) @ rhs


def grad_mu(samples: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Conditional expectation of d log N(x; mu, Sigma)/d mu over the samples:
    the sample mean of Sigma^{-1} (x - mu)."""
    diffs = np.atleast_2d(samples) - mean[None, :]
    return _solve_cov(cov, diffs.mean(axis=0))


def grad_sigma(samples: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Sample mean of 0.5 (Sigma^{-1}(x-mu)(x-mu)' Sigma^{-1} - Sigma^{-1}),
    symmetrized."""
    diffs = np.atleast_2d(samples) - mean[None, :]
    u = _solve_cov(cov, diffs.T).T  # rows are Sigma^{-1}(x - mu)
    inner = (u.T @ u) / diffs.shape[0]
    inv = _solve_cov(cov, np.eye(cov.shape[0]))
    g = 0.5 * (inner - inv)
    return (g + g.T) / 2.0


def grad_parameter(
    sys: LtvSystem,
    gaussian: TrajectoryGaussian,
    parameter: str,
    g_mu: np.ndarray,
    g_sigma: np.ndarray | None = None,
) -> np.ndarray:
    """Chain-rule contraction of the score direction onto a system parameter.

    parameter: "mu0" (initial-state mean), "r" (reference, returned with
    shape (N, m)), or "K" (shared gain entries, returned with K's shape).
    """
    if parameter == "mu0":
        return gaussian.Phi0.T @ g_mu
    if parameter == "r":
        return (gaussian.Phir.T @ g_mu).reshape(sys.N, sys.m)
    if parameter == "K":
        if sys.feedback == "open_loop":
            raise ValueError("open_loop system has no gain K")
        if not sys.K_shared:
            raise ValueError("gradient over a per-step gain is not supported; share K")
        if g_sigma is None:
            raise ValueError("gain gradient needs the covariance score g_sigma")
        out = np.zeros_like(sys.K[0])
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                dmean, dcov = sensitivities(sys, ("K", i, j))
                out[i, j] = float(dmean @ g_mu) + float(np.sum(dcov * g_sigma))
        return out
    raise ValueError(f"unsupported parameter selector {parameter!r}")


def fresh_failure_samples(
    sampler: LinearStlSampler,
    result: VerificationResult,
    count: int,
    n_skip: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` new failure-set samples by continuing chains at
    threshold zero from the final nesting (never reusing verification
    samples for the gradient)."""
    pool = result.failure_samples
    pool_rhos = result.failure_rhos
    out = np.empty((count, pool.shape[1]))
    rhos = np.empty(count)
    for i in range(count):
        idx = int(rng.integers(pool.shape[0]))
        x, rho = pool[idx], float(pool_rhos[idx])
        for _ in range(n_skip + 1):
            x, rho = sampler.step(x, rho, 0.0, rng)
        out[i] = x
        rhos[i] = rho
    return out, rhos


@dataclass(frozen=True)
class SynthesisProblem:
    system: LtvSystem
    phi: StlFormula
    parameter: str = "mu0"
    v_dir: int = -1
    alpha: float = 0.1
    n_samples: int = 500
    max_iters: int = 100
    target_p: float | None = None
    grad_floor: float = 1e-12
    verify_config: VerifyConfig = field(default_factory=VerifyConfig)

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("learning rate alpha must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.v_dir not in (-1, 1):
            raise ValueError("v_dir must be +1 or -1")


@dataclass
class IterationRecord:
    iteration: int
    gamma: np.ndarray
    p: float
    grad: np.ndarray
    grad_norm: float
    step: np.ndarray
    simulations: int

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "gamma": np.asarray(self.gamma).ravel().tolist(),
            "p": self.p,
            "grad_norm": self.grad_norm,
            "simulations": self.simulations,
        }


@dataclass
class SynthesisTrace:
    records: list[IterationRecord] = field(default_factory=list)
    status: str = "running"

    @property
    def final_gamma(self) -> np.ndarray:
        return self.records[-1].gamma


def _get_parameter(sys: LtvSystem, parameter: str) -> np.ndarray:
    if parameter == "mu0":
        return sys.mu0.copy()
    if parameter == "r":
        return sys.r.copy()
    if parameter == "K":
        return sys.K[0].copy()
    raise ValueError(f"unsupported parameter selector {parameter!r}")


def _with_parameter(sys: LtvSystem, parameter: str, value: np.ndarray) -> LtvSystem:
    if parameter == "mu0":
        return replace(sys, mu0=value)
    if parameter == "r":
        return replace(sys, r=value)
    if parameter == "K":
        return replace(sys, K=value, K_shared=True)
    raise ValueError(f"unsupported parameter selector {parameter!r}")


def synthesize(problem: SynthesisProblem, seed: int = 0) -> SynthesisTrace:
    """Probability-normalized gradient descent on the chosen parameter.

    Each iteration verifies the current system, draws fresh failure samples
    for the score direction, and applies
    gamma <- gamma + v_dir * alpha * (dp/dgamma) / p
    (the score direction itself), shrinking naturally near an optimum where
    the failure mass becomes symmetric.
    """
    sys = problem.system
    trace = SynthesisTrace()
    total_sims = 0
    for it in range(problem.max_iters):
        gaussian = unroll(sys)
        sampler = LinearStlSampler(gaussian, problem.phi)
        iter_seed = int(substream(seed, "iter", it).integers(2**62))
        config = replace(problem.verify_config, seed=iter_seed)
        try:
            result = verify(sampler, config)
        except LadderError:
            trace.status = "no-failure-sample"
            return trace
        sample_rng = substream(seed, "gradient", it)
        samples, _ = fresh_failure_samples(
            sampler, result, problem.n_samples, problem.verify_config.n_skip, sample_rng
        )
        g_mu = grad_mu(samples, gaussian.mean, gaussian.cov)
        g_sigma = grad_sigma(samples, gaussian.mean, gaussian.cov) if problem.parameter == "K" else None
        grad = grad_parameter(sys, gaussian, problem.parameter, g_mu, g_sigma)
        step = problem.v_dir * problem.alpha * grad
        total_sims += sampler.simulations

        gamma = _get_parameter(sys, problem.parameter)
        trace.records.append(
            IterationRecord(
                iteration=it,
                gamma=gamma,
                p=result.p_estimate,
                grad=grad,
                grad_norm=float(np.linalg.norm(grad)),
                step=step,
                simulations=total_sims,
            )
        )
        if problem.target_p is not None and result.p_estimate <= problem.target_p:
            trace.status = "target-reached"
            return trace
        if float(np.linalg.norm(grad)) * result.p_estimate < problem.grad_floor:
            trace.status = "gradient-vanished"
            return trace
        sys = _with_parameter(sys, problem.parameter, gamma + step)
    trace.status = "max-iterations"
    return trace


def find_satisfying_controls(
    sys: LtvSystem,
    phi: StlFormula,
    sigma_u: np.ndarray,
    n_ess: int = 100,
    n_skip: int = 2,
    seed: int = 0,
    max_nestings: int = 64,
) -> tuple[np.ndarray, float]:
    """Search for one specification-satisfying open-loop control sequence by
    treating the controls as the uncertainty: u ~ N(r, Sigma_u per step) and
    the ladder runs on phi itself (not its negation) until a sample
    satisfies it.

    Returns the control sequence shaped (N, m) and its robustness.
    """
    if sys.feedback != "open_loop":
        raise ValueError("control search expects an open-loop system")
    base = replace(sys, w_cov=np.zeros((sys.n, sys.n)), v_cov=np.zeros((sys.q, sys.q)),
                   Sigma0=np.zeros((sys.n, sys.n)))
    gaussian = unroll(base)
    sigma_u = np.asarray(sigma_u, dtype=float).reshape(sys.m, sys.m)
    factor_u = np.linalg.cholesky(sigma_u + 1e-18 * np.eye(sys.m))
    big_factor = np.kron(np.eye(sys.N), factor_u)
    # Trajectory as an affine map of the stacked controls u = r + eta.
    u_mean = sys.r.reshape(-1)
    traj_base = gaussian.mean - gaussian.Phir @ u_mean

    control_gaussian = TrajectoryGaussian(
        mean=u_mean,
        cov=big_factor @ big_factor.T,
        cov_factor=big_factor,
        Phi0=np.zeros((u_mean.size, sys.n)),
        Phir=np.eye(u_mean.size),
        Phiv=np.zeros((u_mean.size, sys.q * sys.N)),
        Phiw=np.zeros((u_mean.size, sys.n * sys.N)),
        n=sys.m,
        N=sys.N,
    )

    class ControlSampler(LinearStlSampler):
        def __init__(self):
            self.gaussian = control_gaussian
            self.psi = phi  # satisfaction search: no negation
            from .lingauss import lift_predicates

            planes = lift_predicates(phi, unroll(sys))
            self.planes_a = np.array([a @ gaussian.Phir for a, _, _, _ in planes])
            self.planes_c = np.array(
                [float(a @ traj_base) + c for a, c, _, _ in planes]
            )
            self._sims = 0

        def rho_batch(self, u: np.ndarray) -> np.ndarray:
            traj = traj_base[None, :] + np.atleast_2d(u) @ gaussian.Phir.T
            signals = traj.reshape(-1, sys.N, sys.n)
            from .stl import robustness_batch

            return robustness_batch(signals, phi)

    sampler = ControlSampler()
    rng = substream(seed, "control-search")
    samples = np.empty((n_ess, sys.m * sys.N))
    rhos = np.empty(n_ess)
    for i in range(n_ess):
        samples[i], rhos[i] = sampler.initial(rng)
    threshold = -np.inf
    for _ in range(max_nestings):
        best = int(np.argmax(rhos))
        if rhos[best] >= 0.0:
            return samples[best].reshape(sys.N, sys.m), float(rhos[best])
        new_threshold = float(np.median(rhos))
        if not new_threshold > threshold:
            raise LadderError("control search stalled below satisfaction")
        threshold = new_threshold
        mask = rhos >= threshold
        survivors, survivor_rhos = samples[mask], rhos[mask]
        for i in range(n_ess):
            idx = int(rng.integers(survivors.shape[0]))
            x, rho = survivors[idx], float(survivor_rhos[idx])
            for _ in range(n_skip + 1):
                x, rho = sampler.step(x, rho, threshold, rng)
            samples[i], rhos[i] = x, rho
    raise LadderError("control search exhausted its nesting budget")
