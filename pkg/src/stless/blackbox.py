"""Chain sampling for nonlinear and black-box systems.

The robustness along an ESS ellipse is only available through the run
function, so the active angular set is found either by Lipschitz-based
elimination (candidate angles that fall short exclude an interval sized by
the deficit over the current slope bound) or by a Gaussian-process surrogate
driven by an acquisition function. Uncertainty enters in base space
x ~ N(0, I); a bijector maps base points to simulator inputs.
"""
from __future__ import annotations

import json
import subprocess
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .ess import AngularDomain, AnchorInfeasibleError, TWO_PI
from .hdr import VerificationResult, VerifyConfig, verify
from .stl import StlFormula, negate, robustness
from .warp import Bijector, identity, pullback_weight

__all__ = [
    "SimulatorError",
    "SimulationBudgetExceeded",
    "CallableRunFunction",
    "SubprocessRunFunction",
    "EllipseObjective",
    "robustness_on_ellipse",
    "LipschitzState",
    "lipschitz_sample",
    "GpModel",
    "BoConfig",
    "bo_sample",
    "BlackboxSampler",
    "blackbox_verify",
]


class SimulatorError(RuntimeError):
    """The run function failed or broke the wire protocol."""


class SimulationBudgetExceeded(RuntimeError):
    pass


class _CountedRun:
    """Invocation counting and budget enforcement shared by run functions."""

    def __init__(self, budget: int | None):
        self._budget = budget
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return self._calls

    def _charge(self):
        with self._lock:
            if self._budget is not None and self._calls >= self._budget:
                raise SimulationBudgetExceeded(
                    f"simulation budget of {self._budget} exhausted"
                )
            self._calls += 1


class CallableRunFunction(_CountedRun):
    """In-process run function: a deterministic callable w -> (T, q) signal."""

    def __init__(
        self,
        fn: Callable[[np.ndarray], np.ndarray],
        l: int,
        channels: Sequence[str],
        horizon: int,
        budget: int | None = 1_000_000,
    ):
        super().__init__(budget)
        self.fn = fn
        self.l = int(l)
        self.channels = tuple(channels)
        self.horizon = int(horizon)
        self.serial = False

    def __call__(self, w: np.ndarray) -> np.ndarray:
        self._charge()
        w = np.asarray(w, dtype=float)
        if w.shape != (self.l,):
            raise SimulatorError(f"run function expects w of length {self.l}, got {w.shape}")
        y = np.asarray(self.fn(w), dtype=float)
        if y.ndim != 2 or y.shape != (self.horizon, len(self.channels)):
            raise SimulatorError(
                f"run function must return a ({self.horizon}, {len(self.channels)}) signal, got {y.shape}"
            )
        return y

    def close(self):
        pass


class SubprocessRunFunction(_CountedRun):
    """Out-of-process run function speaking newline-delimited JSON over the
    child's stdin/stdout.

    Handshake: the child first emits
    ``{"type":"hello","l":..,"channels":[..],"horizon":..,"serial":..}``;
    requests are ``{"type":"run","id":..,"w":[..]}`` answered by
    ``{"type":"signal","id":..,"y":[[..]xT]}`` or
    ``{"type":"error","id":..,"message":".."}``.
    """

    def __init__(self, cmd: Sequence[str], budget: int | None = 1_000_000):
        super().__init__(budget)
        self.cmd = list(cmd)
        try:
            self._proc = subprocess.Popen(
                self.cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
            )
        except OSError as exc:
            raise SimulatorError(f"failed to launch simulator {self.cmd!r}: {exc}") from exc
        hello = self._read_message()
        if hello.get("type") != "hello":
            raise SimulatorError(f"expected hello handshake, got {hello!r}")
        try:
            self.l = int(hello["l"])
            self.channels = tuple(str(c) for c in hello["channels"])
            self.horizon = int(hello["horizon"])
            self.serial = bool(hello.get("serial", True))
        except (KeyError, TypeError, ValueError) as exc:
            raise SimulatorError(f"malformed hello message: {hello!r}") from exc
        self._next_id = 0
        self._io_lock = threading.Lock()

    def _read_message(self) -> dict:
        line = self._proc.stdout.readline()
        if not line:
            raise SimulatorError("simulator closed its output stream")
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SimulatorError(f"simulator emitted invalid JSON: {line!r}") from exc
        if not isinstance(msg, dict):
            raise SimulatorError(f"simulator emitted a non-object message: {msg!r}")
        return msg

    def __call__(self, w: np.ndarray) -> np.ndarray:
        self._charge()
        w = np.asarray(w, dtype=float)
        if w.shape != (self.l,):
            raise SimulatorError(f"simulator expects w of length {self.l}, got {w.shape}")
        with self._io_lock:
            req_id = self._next_id
            self._next_id += 1
            request = {"type": "run", "id": req_id, "w": [float(v) for v in w]}
            try:
                self._proc.stdin.write(json.dumps(request) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise SimulatorError("simulator process is gone") from exc
            msg = self._read_message()
        if msg.get("id") != req_id:
            raise SimulatorError(f"response id {msg.get('id')} does not match request {req_id}")
        if msg.get("type") == "error":
            raise SimulatorError(f"simulator error: {msg.get('message')}")
        if msg.get("type") != "signal":
            raise SimulatorError(f"unexpected message type {msg.get('type')!r}")
        y = np.asarray(msg.get("y"), dtype=float)
        if y.ndim != 2 or y.shape != (self.horizon, len(self.channels)):
            raise SimulatorError(f"signal shape {y.shape} does not match handshake")
        return y

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class EllipseObjective:
    """Robustness along one ellipse in base space, cached by exact angle.

    Each distinct angle costs exactly one simulation; theta is wrapped to
    [0, 2pi) before keying so 0 and 2pi share one evaluation.
    """

    def __init__(
        self,
        run,
        psi: StlFormula,
        x0: np.ndarray,
        x1: np.ndarray,
        bijector: Bijector | None = None,
    ):
        self.run = run
        self.psi = psi
        self.x0 = np.asarray(x0, dtype=float)
        self.x1 = np.asarray(x1, dtype=float)
        self.bijector = bijector
        self._cache: dict[float, float] = {}

    def point(self, theta: float) -> np.ndarray:
        theta = float(theta) % TWO_PI
        return self.x0 * np.cos(theta) + self.x1 * np.sin(theta)

    def seed(self, theta: float, rho: float):
        self._cache[float(theta) % TWO_PI] = float(rho)

    def __call__(self, theta: float) -> float:
        key = float(theta) % TWO_PI
        if key in self._cache:
            return self._cache[key]
        x = self.point(key)
        w = x if self.bijector is None else self.bijector.forward(x)
        rho = robustness(self.run(w), self.psi)
        self._cache[key] = rho
        return rho


def robustness_on_ellipse(
    run, phi: StlFormula, w0: np.ndarray, w1: np.ndarray, bijector: Bijector | None = None
) -> EllipseObjective:
    """theta -> robustness of run(w0 cos(theta) + w1 sin(theta)) under phi."""
    return EllipseObjective(run, phi, w0, w1, bijector)


@dataclass
class LipschitzState:
    """Slope bound for the robustness-over-angle map.

    M persists across ESS steps within a nesting; a new nesting re-probes it
    on its first ellipse (the relevant slope scale drifts as the chain moves
    into the tail). Whenever two evaluations witness a steeper slope than M,
    the bound is raised immediately, because an undervalued M silently
    excludes feasible angles and biases the chain. When elimination empties
    the candidate domain, M is inflated by (1 + eps) and the domain rebuilt
    from the evaluation history at no simulation cost.
    """

    M: float | None = None
    eps_inflate: float = 0.5
    m_floor: float = 1e-3
    probe_pairs: int = 8
    _last_threshold: float | None = None

    def ensure_initialized(self, objective: EllipseObjective, threshold: float | None = None):
        fresh_nesting = (
            threshold is not None
            and self._last_threshold is not None
            and threshold != self._last_threshold
        )
        if threshold is not None:
            self._last_threshold = threshold
        if self.M is not None and not fresh_nesting:
            return
        delta = TWO_PI / 64.0
        slopes = []
        for i in range(self.probe_pairs):
            theta = i * TWO_PI / self.probe_pairs
            slopes.append(abs(objective(theta + delta) - objective(theta)) / delta)
        self.M = max(2.0 * max(slopes), self.m_floor)

    def witness(self, theta_a: float, rho_a: float, theta_b: float, rho_b: float) -> bool:
        """Raise M if the pair certifies a slope above it; True when raised."""
        d = abs(theta_a - theta_b) % TWO_PI
        d = min(d, TWO_PI - d)
        if d <= 1e-9:
            return False
        slope = abs(rho_a - rho_b) / d
        if slope > self.M:
            self.M = 2.0 * slope
            return True
        return False


def lipschitz_sample(
    objective: EllipseObjective,
    rho_threshold: float,
    state: LipschitzState,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Uniform draw from the survivor domain of Lipschitz elimination.

    Candidates are drawn uniformly from the current candidate set; an
    infeasible candidate with deficit d removes the interval of half-width
    d / M around it, which cannot contain any feasible angle while M is a
    valid slope bound.
    """
    rho0 = objective(0.0)
    if not (rho0 >= rho_threshold):
        raise AnchorInfeasibleError(f"anchor robustness {rho0} below threshold {rho_threshold}")
    state.ensure_initialized(objective, rho_threshold)
    domain = AngularDomain.full()
    hist: list[tuple[float, float]] = []
    evals: list[tuple[float, float]] = [(0.0, rho0)]

    def rebuild() -> AngularDomain:
        d = AngularDomain.full()
        for theta_j, rho_j in hist:
            d = d.subtract(theta_j, (rho_threshold - rho_j) / state.M)
        return d

    while True:
        while domain.is_empty:
            state.M = state.M * (1.0 + state.eps_inflate)
            domain = rebuild()
        theta = domain.sample(rng)
        rho = objective(theta)
        raised = False
        for theta_j, rho_j in evals:
            raised = state.witness(theta, rho, theta_j, rho_j) or raised
        evals.append((theta, rho))
        if rho >= rho_threshold:
            return theta, rho
        hist.append((theta, rho))
        domain = rebuild() if raised else domain.subtract(theta, (rho_threshold - rho) / state.M)


class GpModel:
    """GP over angle with a squared-exponential kernel of circular distance.

    Hyperparameters follow the data: length-scale is the median pairwise
    circular distance of the registered angles, signal variance the variance
    of the registered values, jitter a fixed fraction of it.
    """

    def __init__(self):
        self.thetas: list[float] = []
        self.rhos: list[float] = []

    def register(self, theta: float, rho: float):
        self.thetas.append(float(theta))
        self.rhos.append(float(rho))

    @property
    def best(self) -> float:
        return max(self.rhos)

    @staticmethod
    def _circ_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        # Chordal distance: agrees with the arc length for small separations
        # but, unlike the geodesic, keeps the squared-exponential kernel
        # positive definite on the circle.
        return 2.0 * np.abs(np.sin((a[:, None] - b[None, :]) / 2.0))

    def posterior(self, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        from scipy.linalg import cho_solve, solve_triangular

        t = np.asarray(self.thetas)
        y = np.asarray(self.rhos)
        d_tt = self._circ_dist(t, t)
        upper = d_tt[np.triu_indices(len(t), k=1)]
        ell = max(float(np.median(upper)) if upper.size else 1.0, 1e-3)
        sf2 = max(float(np.var(y)), 1e-12)
        sn2 = 1e-6 * sf2
        k_tt = sf2 * np.exp(-0.5 * (d_tt / ell) ** 2)
        k_gt = sf2 * np.exp(-0.5 * (self._circ_dist(np.asarray(grid), t) / ell) ** 2)
        jitter = sn2
        for _ in range(6):
            try:
                chol = np.linalg.cholesky(k_tt + jitter * np.eye(len(t)))
                break
            except np.linalg.LinAlgError:
                jitter *= 100.0
        else:
            raise np.linalg.LinAlgError("GP kernel matrix is not factorizable")
        alpha = cho_solve((chol, True), y - y.mean())
        mean = y.mean() + k_gt @ alpha
        v = solve_triangular(chol, k_gt.T, lower=True)
        var = np.clip(sf2 - np.sum(v**2, axis=0), 0.0, None)
        return mean, np.sqrt(var)


@dataclass(frozen=True)
class BoConfig:
    n_bo: int = 8
    kappa: float = 2.576
    xi: float = 0.0
    acquisition: str = "UCB"
    sigma_max: float | None = None
    grid_size: int = 361
    # After this many unproductive rounds the posterior is accepted as-is;
    # the truth re-check still guarantees any returned sample is feasible,
    # so this only bounds surrogate growth when the anchor sits close to
    # the threshold and the validity bound is unreachable.
    max_rounds: int = 2
    # Candidate arcs come from the optimistic surface mean + arc_inflation*std:
    # a superset of the active set (up to surrogate calibration), so that the
    # re-check rejection leaves the accepted angle uniform on the active set.
    arc_inflation: float = 2.0
    # Hard cap on surrogate size per step; beyond it the posterior freezes
    # and the step degrades to plain rejection sampling, which terminates
    # almost surely because the anchor's neighborhood stays in the domain.
    max_points: int = 120

    def __post_init__(self):
        if self.n_bo < 1:
            raise ValueError("n_bo must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.acquisition not in ("UCB", "EI", "POI"):
            raise ValueError("acquisition must be one of UCB, EI, POI")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.arc_inflation < 0:
            raise ValueError("arc_inflation must be >= 0")
        if self.max_points < 16:
            raise ValueError("max_points must be >= 16")


def _acquisition(kind: str, mean, std, best, kappa, xi):
    if kind == "UCB":
        return mean + kappa * std
    safe_std = np.maximum(std, 1e-12)
    z = (mean - best - xi) / safe_std
    if kind == "POI":
        return ndtr(z)
    pdf = np.exp(-0.5 * z**2) / np.sqrt(2.0 * np.pi)
    return (mean - best - xi) * ndtr(z) + safe_std * pdf


def _mask_to_domain(grid: np.ndarray, mask: np.ndarray) -> AngularDomain:
    """Contiguous True runs of a mask over a closed [0, 2pi] grid, as arcs.

    The first and last grid nodes are the same circle point; runs touching
    both ends wrap through zero.
    """
    half = (grid[1] - grid[0]) / 2.0
    intervals = []
    idx = 0
    m = mask[:-1]  # drop the duplicated endpoint
    size = m.size
    while idx < size:
        if not m[idx]:
            idx += 1
            continue
        start = idx
        while idx < size and m[idx]:
            idx += 1
        lo = max(grid[start] - half, 0.0) if start > 0 else 0.0
        hi = min(grid[idx - 1] + half, TWO_PI) if idx < size else TWO_PI
        intervals.append((lo, hi - lo))
    return AngularDomain.from_intervals(intervals)


def bo_sample(
    objective: EllipseObjective,
    rho_threshold: float,
    config: BoConfig,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Surrogate-driven draw from the estimated active set.

    Registers the anchor at both 0 and 2pi, grows the surrogate with
    acquisition-chosen samples, and on a confident posterior samples a
    uniform angle from the predicted active set; the draw is returned only
    if truly feasible (one re-check simulation), otherwise registered and
    the loop continues. After an unproductive round the acquisition switches
    to exploitation.
    """
    rho0 = objective(0.0)
    if not (rho0 >= rho_threshold):
        raise AnchorInfeasibleError(f"anchor robustness {rho0} below threshold {rho_threshold}")
    gp = GpModel()
    gp.register(0.0, rho0)
    gp.register(TWO_PI, objective(TWO_PI))  # same circle point, cached value
    grid = np.linspace(0.0, TWO_PI, config.grid_size)
    kappa, xi = config.kappa, config.xi
    sigma_max = (
        config.sigma_max
        if config.sigma_max is not None
        else 0.1 * (rho0 - rho_threshold + 1e-9)
    )
    rounds = 0
    frozen_domain: AngularDomain | None = None
    frozen_misses = 0
    while True:
        if frozen_domain is not None:
            # Surrogate capped: plain rejection sampling, eventually from the
            # whole circle; the anchor's arc keeps the hit probability positive.
            domain = frozen_domain if frozen_misses < 50 else AngularDomain.full()
            theta = domain.sample(rng)
            rho = objective(theta)
            if rho >= rho_threshold:
                return theta, rho
            frozen_misses += 1
            continue
        if len(gp.thetas) < config.max_points:
            for _ in range(config.n_bo + 1):
                mean, std = gp.posterior(grid)
                acq = _acquisition(config.acquisition, mean, std, gp.best, kappa, xi)
                order = np.argsort(acq)[::-1]
                registered = np.asarray(gp.thetas)
                for idx in order:
                    if np.abs(registered - grid[idx]).min() > 1e-9:
                        theta_next = float(grid[idx])
                        break
                else:
                    theta_next = float(rng.uniform(0.0, TWO_PI))
                gp.register(theta_next, objective(theta_next))
        rounds += 1
        mean, std = gp.posterior(grid)
        active = (mean + config.arc_inflation * std) >= rho_threshold
        confident = active.any() and float(std[active].max()) <= sigma_max
        capped = len(gp.thetas) >= config.max_points
        if confident or rounds >= config.max_rounds or capped:
            domain = _mask_to_domain(grid, active) if active.any() else AngularDomain.full()
            if domain.is_empty:
                domain = AngularDomain.full()
            if capped:
                frozen_domain = domain
                continue
            theta = domain.sample(rng)
            rho = objective(theta)
            if rho >= rho_threshold:
                return theta, rho
            gp.register(theta, rho)  # infeasible re-check is free information
        kappa, xi = 1.0, 0.0  # gear toward exploitation


class BlackboxSampler:
    """Chain sampler in uncertainty space driven by a run function.

    Geometry lives in base space x ~ N(0, I); the bijector (identity by
    default) produces the simulator input. ``method`` selects Lipschitz
    elimination (default) or the BO surrogate for the active-set search.
    """

    def __init__(
        self,
        run,
        phi: StlFormula,
        bijector: Bijector | None = None,
        method: str = "lipschitz",
        bo_config: BoConfig | None = None,
        lipschitz_state: LipschitzState | None = None,
        negate_spec: bool = True,
        target_log_density: Callable[[np.ndarray], float] | None = None,
    ):
        if method not in ("lipschitz", "bo"):
            raise ValueError("method must be 'lipschitz' or 'bo'")
        self.run = run
        self.psi = negate(phi) if negate_spec else phi
        from .stl import horizon as _horizon

        if run.horizon < _horizon(self.psi):
            raise ValueError(
                f"run function horizon {run.horizon} is shorter than the "
                f"specification horizon {_horizon(self.psi)}"
            )
        self.bijector = bijector if bijector is not None else identity()
        self.method = method
        self.bo_config = bo_config if bo_config is not None else BoConfig()
        self.lipschitz_state = lipschitz_state if lipschitz_state is not None else LipschitzState()
        self.target_log_density = target_log_density

    @property
    def dim(self) -> int:
        return self.run.l

    @property
    def simulations(self) -> int:
        return self.run.calls

    def _rho_of_x(self, x: np.ndarray) -> float:
        w = self.bijector.forward(x)
        return robustness(self.run(w), self.psi)

    def initial(self, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        x = rng.standard_normal(self.dim)
        return x, self._rho_of_x(x)

    def step(
        self, x: np.ndarray, rho: float, threshold: float, rng: np.random.Generator
    ) -> tuple[np.ndarray, float]:
        x1 = rng.standard_normal(self.dim)
        objective = EllipseObjective(self.run, self.psi, x, x1, bijector=self.bijector)
        objective.seed(0.0, rho)
        if self.method == "lipschitz":
            theta, rho_new = lipschitz_sample(objective, threshold, self.lipschitz_state, rng)
        else:
            theta, rho_new = bo_sample(objective, threshold, self.bo_config, rng)
        return objective.point(theta), rho_new

    def weight(self, x: np.ndarray) -> float:
        return pullback_weight(self.bijector, x, self.target_log_density)

    def mc_rhos(self, rng: np.random.Generator, count: int) -> np.ndarray:
        out = np.empty(count)
        for i in range(count):
            out[i] = self._rho_of_x(rng.standard_normal(self.dim))
        return out


def blackbox_verify(
    run,
    phi: StlFormula,
    config: VerifyConfig,
    bijector: Bijector | None = None,
    method: str = "lipschitz",
    bo_config: BoConfig | None = None,
    target_log_density: Callable[[np.ndarray], float] | None = None,
) -> VerificationResult:
    """HDR/ESS verification of a run function against an STL specification."""
    sampler = BlackboxSampler(
        run, phi, bijector=bijector, method=method, bo_config=bo_config,
        target_log_density=target_log_density,
    )
    return verify(sampler, config)
