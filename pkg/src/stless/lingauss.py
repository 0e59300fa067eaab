"""Exact trajectory-space Gaussians for linear time-variant systems.

A system x_{t+1} = A_t x_t + B_t u_t + w_t with measurement y_t = C_t x_t + v_t,
optional observer and feedback, pushes its jointly Gaussian sources
(x_0, w, v) forward into a Gaussian over the stacked trajectory
[x_0; ...; x_{N-1}]. The push-forward is computed exactly, along with the
linear sensitivity blocks that tie the reference, the noises and the initial
state to the trajectory.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .stl import StlFormula, collect_predicates, horizon

__all__ = [
    "LtvSystem",
    "TrajectoryGaussian",
    "unroll",
    "lift_predicates",
    "sensitivities",
]


def _as_steps(value, steps: int, shape: tuple[int, ...], name: str) -> np.ndarray:
    """Normalize a per-step array or a single broadcast entry to (steps, *shape)."""
    arr = np.asarray(value, dtype=float)
    if arr.shape == shape:
        return np.broadcast_to(arr, (steps, *shape)).copy()
    if arr.shape == (steps, *shape):
        return arr.copy()
    raise ValueError(f"{name} must have shape {shape} or {(steps, *shape)}, got {arr.shape}")


def _check_cov(cov: np.ndarray, name: str):
    if not np.allclose(cov, cov.T, atol=1e-10 * (1.0 + np.abs(cov).max(initial=0.0))):
        raise ValueError(f"{name} must be symmetric")
    if cov.size:
        eigs = np.linalg.eigvalsh((cov + cov.T) / 2.0)
        if eigs.min(initial=0.0) < -1e-9 * max(1.0, abs(eigs).max(initial=0.0)):
            raise ValueError(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class LtvSystem:
    """Discrete LTV system with Gaussian process/measurement noise.

    Transition-time matrices (A, B, C, K, L) are used at t = 0..N-2; noise
    means/covariances and the reference are stacked over t = 0..N-1 (the
    final entries cannot influence the trajectory but keep the stacked
    source vectors full length).
    """

    n: int
    m: int
    q: int
    N: int
    mu0: np.ndarray
    Sigma0: np.ndarray
    A: np.ndarray = None
    B: np.ndarray = None
    C: np.ndarray = None
    w_mean: np.ndarray = None
    w_cov: np.ndarray = None
    v_mean: np.ndarray = None
    v_cov: np.ndarray = None
    r: np.ndarray = None
    feedback: str = "open_loop"
    K: np.ndarray = None
    L: np.ndarray = None
    K_shared: bool = True
    xhat0: np.ndarray = None
    state_names: tuple[str, ...] = ()

    def __post_init__(self):
        n, m, q, N = self.n, self.m, self.q, self.N
        if N < 1:
            raise ValueError("horizon N must be >= 1")
        steps = max(N - 1, 0)
        set_ = object.__setattr__

        mu0 = np.asarray(self.mu0, dtype=float).reshape(n)
        Sigma0 = np.asarray(self.Sigma0, dtype=float).reshape(n, n)
        _check_cov(Sigma0, "Sigma0")
        set_(self, "mu0", mu0)
        set_(self, "Sigma0", Sigma0)

        set_(self, "A", _as_steps(self.A if self.A is not None else np.eye(n), steps, (n, n), "A"))
        set_(self, "B", _as_steps(self.B if self.B is not None else np.zeros((n, m)), steps, (n, m), "B"))
        set_(self, "C", _as_steps(self.C if self.C is not None else np.zeros((q, n)), steps, (q, n), "C"))

        set_(self, "w_mean", _as_steps(self.w_mean if self.w_mean is not None else np.zeros(n), N, (n,), "w_mean"))
        set_(self, "w_cov", _as_steps(self.w_cov if self.w_cov is not None else np.zeros((n, n)), N, (n, n), "w_cov"))
        set_(self, "v_mean", _as_steps(self.v_mean if self.v_mean is not None else np.zeros(q), N, (q,), "v_mean"))
        set_(self, "v_cov", _as_steps(self.v_cov if self.v_cov is not None else np.zeros((q, q)), N, (q, q), "v_cov"))
        for t in range(N):
            _check_cov(self.w_cov[t], f"w_cov[{t}]")
            _check_cov(self.v_cov[t], f"v_cov[{t}]")
        set_(self, "r", _as_steps(self.r if self.r is not None else np.zeros(m), N, (m,), "r"))

        if self.feedback not in ("open_loop", "state_estimate", "measurement"):
            raise ValueError(f"unknown feedback mode {self.feedback!r}")
        if self.feedback != "open_loop":
            k_cols = n if self.feedback == "state_estimate" else q
            if self.K is None:
                raise ValueError("feedback mode requires gain K")
            set_(self, "K", _as_steps(self.K, steps, (m, k_cols), "K"))
        if self.feedback == "state_estimate":
            if self.L is None:
                raise ValueError("state_estimate mode requires observer gain L")
            set_(self, "L", _as_steps(self.L, steps, (n, q), "L"))
        xhat0 = np.zeros(n) if self.xhat0 is None else np.asarray(self.xhat0, dtype=float).reshape(n)
        set_(self, "xhat0", xhat0)

        names = tuple(self.state_names) if self.state_names else tuple(f"x{i + 1}" for i in range(n))
        if len(names) != n or len(set(names)) != n:
            raise ValueError("state_names must be n unique identifiers")
        set_(self, "state_names", names)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Factor F with F F' = cov; Cholesky when PD, clipped eigh otherwise."""
    cov = (cov + cov.T) / 2.0
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        scale = max(1.0, abs(vals).max(initial=0.0))
        if vals.min(initial=0.0) < -1e-9 * scale:
            raise ValueError("covariance is not positive semidefinite") from None
        vals = np.clip(vals, 0.0, None)
        return vecs * np.sqrt(vals)


@dataclass(frozen=True)
class TrajectoryGaussian:
    """Gaussian over the stacked trajectory plus its sensitivity blocks."""

    mean: np.ndarray
    cov: np.ndarray
    cov_factor: np.ndarray
    Phi0: np.ndarray
    Phir: np.ndarray
    Phiv: np.ndarray
    Phiw: np.ndarray
    n: int
    N: int

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        if not np.allclose(cov, cov.T, atol=1e-9 * (1.0 + np.abs(cov).max(initial=0.0))):
            raise ValueError("trajectory covariance must be symmetric")
        recon = self.cov_factor @ self.cov_factor.T
        scale = max(1.0, np.abs(cov).max(initial=0.0))
        if not np.allclose(recon, cov, atol=1e-8 * scale):
            raise ValueError("cov_factor does not reproduce the covariance")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.cov_factor.shape[1])
        return self.mean + self.cov_factor @ z

    def to_signal_batch(self, x: np.ndarray) -> np.ndarray:
        """Reshape stacked trajectory vectors (B, n*N) to signals (B, N, n)."""
        x = np.atleast_2d(x)
        return x.reshape(x.shape[0], self.N, self.n)


def _step_matrices(sys: LtvSystem, t: int):
    """One-step propagation of the (possibly augmented) state z_t."""
    n, m, q = sys.n, sys.m, sys.q
    A, B, C = sys.A[t], sys.B[t], sys.C[t]
    if sys.feedback == "open_loop":
        return A, B, np.eye(n), np.zeros((n, q))
    if sys.feedback == "measurement":
        K = sys.K[t]
        return A - B @ K @ C, B, np.eye(n), -B @ K
    K, L = sys.K[t], sys.L[t]
    F = np.block([[A, -B @ K], [L @ C, A - B @ K - L @ C]])
    Gr = np.vstack([B, B])
    Gw = np.vstack([np.eye(n), np.zeros((n, n))])
    Gv = np.vstack([np.zeros((n, q)), L])
    return F, Gr, Gw, Gv


def _dstep_matrices(sys: LtvSystem, t: int, i: int, j: int):
    """Derivative of the step matrices w.r.t. the gain entry K[i, j]."""
    n, m, q = sys.n, sys.m, sys.q
    B, C = sys.B[t], sys.C[t]
    if sys.feedback == "measurement":
        E = np.zeros((m, q))
        E[i, j] = 1.0
        return -B @ E @ C, np.zeros((n, m)), np.zeros((n, n)), -B @ E
    if sys.feedback == "state_estimate":
        E = np.zeros((m, n))
        E[i, j] = 1.0
        BE = B @ E
        dF = np.block([[np.zeros((n, n)), -BE], [np.zeros((n, n)), -BE]])
        return dF, np.zeros((2 * n, m)), np.zeros((2 * n, n)), np.zeros((2 * n, q))
    raise ValueError("open_loop system has no gain K")


def _accumulate(sys: LtvSystem, dstep=None):
    """Forward accumulation of the trajectory maps (and optionally their
    derivative w.r.t. one gain entry)."""
    n, m, q, N = sys.n, sys.m, sys.q, sys.N
    augmented = sys.feedback == "state_estimate"
    d = 2 * n if augmented else n
    sel = np.hstack([np.eye(n), np.zeros((n, n))]) if augmented else np.eye(n)

    M0 = np.vstack([np.eye(n), np.zeros((n, n))]) if augmented else np.eye(n)
    Mr = np.zeros((d, m * N))
    Mv = np.zeros((d, q * N))
    Mw = np.zeros((d, n * N))
    mc = np.concatenate([np.zeros(n), sys.xhat0]) if augmented else np.zeros(n)

    Phi0 = np.zeros((n * N, n))
    Phir = np.zeros((n * N, m * N))
    Phiv = np.zeros((n * N, q * N))
    Phiw = np.zeros((n * N, n * N))
    const = np.zeros(n * N)

    track = dstep is not None
    if track:
        dM0 = np.zeros_like(M0)
        dMr = np.zeros_like(Mr)
        dMv = np.zeros_like(Mv)
        dMw = np.zeros_like(Mw)
        dmc = np.zeros_like(mc)
        dPhi0 = np.zeros_like(Phi0)
        dPhir = np.zeros_like(Phir)
        dPhiv = np.zeros_like(Phiv)
        dPhiw = np.zeros_like(Phiw)
        dconst = np.zeros_like(const)

    def write_row(t):
        rows = slice(t * n, (t + 1) * n)
        Phi0[rows] = sel @ M0
        Phir[rows] = sel @ Mr
        Phiv[rows] = sel @ Mv
        Phiw[rows] = sel @ Mw
        const[rows] = sel @ mc
        if track:
            dPhi0[rows] = sel @ dM0
            dPhir[rows] = sel @ dMr
            dPhiv[rows] = sel @ dMv
            dPhiw[rows] = sel @ dMw
            dconst[rows] = sel @ dmc

    write_row(0)
    for t in range(N - 1):
        F, Gr, Gw, Gv = _step_matrices(sys, t)
        if track:
            dF, dGr, dGw, dGv = dstep(t)
            dM0 = dF @ M0 + F @ dM0
            dMr_new = dF @ Mr + F @ dMr
            dMr_new[:, t * m : (t + 1) * m] += dGr
            dMr = dMr_new
            dMv_new = dF @ Mv + F @ dMv
            dMv_new[:, t * q : (t + 1) * q] += dGv
            dMv = dMv_new
            dMw_new = dF @ Mw + F @ dMw
            dMw_new[:, t * n : (t + 1) * n] += dGw
            dMw = dMw_new
            dmc = dF @ mc + F @ dmc
        M0 = F @ M0
        Mr_new = F @ Mr
        Mr_new[:, t * m : (t + 1) * m] += Gr
        Mr = Mr_new
        Mv_new = F @ Mv
        Mv_new[:, t * q : (t + 1) * q] += Gv
        Mv = Mv_new
        Mw_new = F @ Mw
        Mw_new[:, t * n : (t + 1) * n] += Gw
        Mw = Mw_new
        mc = F @ mc
        write_row(t + 1)

    if track:
        return (Phi0, Phir, Phiv, Phiw, const), (dPhi0, dPhir, dPhiv, dPhiw, dconst)
    return (Phi0, Phir, Phiv, Phiw, const), None


def _stacked_noise(sys: LtvSystem):
    n, q, N = sys.n, sys.q, sys.N
    Mw = sys.w_mean.reshape(n * N)
    Mv = sys.v_mean.reshape(q * N)
    Sw = np.zeros((n * N, n * N))
    Sv = np.zeros((q * N, q * N))
    for t in range(N):
        Sw[t * n : (t + 1) * n, t * n : (t + 1) * n] = sys.w_cov[t]
        Sv[t * q : (t + 1) * q, t * q : (t + 1) * q] = sys.v_cov[t]
    return Mw, Sw, Mv, Sv


def unroll(sys: LtvSystem) -> TrajectoryGaussian:
    """Exact push-forward of the system's Gaussian sources to trajectory space."""
    (Phi0, Phir, Phiv, Phiw, const), _ = _accumulate(sys)
    Mw, Sw, Mv, Sv = _stacked_noise(sys)
    rvec = sys.r.reshape(sys.m * sys.N)
    mean = Phi0 @ sys.mu0 + Phir @ rvec + Phiv @ Mv + Phiw @ Mw + const
    cov = Phi0 @ sys.Sigma0 @ Phi0.T + Phiv @ Sv @ Phiv.T + Phiw @ Sw @ Phiw.T
    cov = (cov + cov.T) / 2.0
    factor = _psd_factor(cov)
    return TrajectoryGaussian(
        mean=mean, cov=cov, cov_factor=factor,
        Phi0=Phi0, Phir=Phir, Phiv=Phiv, Phiw=Phiw,
        n=sys.n, N=sys.N,
    )


def lift_predicates(phi: StlFormula, sys: LtvSystem) -> list[tuple[np.ndarray, float, int, str]]:
    """Trajectory-space hyperplanes (a, c, time index, label) for every
    predicate leaf at every admissible absolute time.

    The formula's channels must be state coordinates (parse it with the
    system's state_names), so predicates lift by coordinate placement.
    """
    n, N = sys.n, sys.N
    if horizon(phi) > N:
        raise ValueError(f"formula horizon {horizon(phi)} exceeds system horizon {N}")
    planes = []
    for pred, window in collect_predicates(phi):
        if len(pred.coeffs) != n:
            raise ValueError(
                f"predicate over {len(pred.coeffs)} channels cannot lift into {n} state coordinates"
            )
        for t in sorted(window):
            if t >= N:
                raise ValueError(f"predicate window reaches t={t} beyond horizon {N}")
            a = np.zeros(n * N)
            a[t * n : (t + 1) * n] = pred.coeffs
            planes.append((a, pred.offset, t, pred.label))
    return planes


def sensitivities(sys: LtvSystem, selector: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Exact (dmean, dcov) of unroll w.r.t. one scalar parameter.

    Selectors: ("mu0", i), ("r", t, i), ("w_mean", t, i), ("v_mean", t, i),
    ("K", i, j) for a shared gain, ("K", t, i, j) for a per-step gain.
    """
    n, m, q, N = sys.n, sys.m, sys.q, sys.N
    dim = n * N
    kind = selector[0]
    if kind in ("mu0", "r", "w_mean", "v_mean"):
        (Phi0, Phir, Phiv, Phiw, _), _ = _accumulate(sys)
        dcov = np.zeros((dim, dim))
        if kind == "mu0":
            (i,) = selector[1:]
            return Phi0[:, i].copy(), dcov
        t, i = selector[1:]
        if kind == "r":
            return Phir[:, t * m + i].copy(), dcov
        if kind == "w_mean":
            return Phiw[:, t * n + i].copy(), dcov
        return Phiv[:, t * q + i].copy(), dcov

    if kind != "K":
        raise ValueError(f"unsupported parameter selector {selector!r}")
    if sys.feedback == "open_loop":
        raise ValueError("open_loop system has no gain K")
    if len(selector) == 3:
        if not sys.K_shared:
            raise ValueError("per-step gain needs selector ('K', t, i, j)")
        _, i, j = selector
        step_set = None
    else:
        _, tsel, i, j = selector
        step_set = {tsel}

    def dstep(t):
        if step_set is None or t in step_set:
            return _dstep_matrices(sys, t, i, j)
        d = 2 * n if sys.feedback == "state_estimate" else n
        return (np.zeros((d, d)), np.zeros((d, m)), np.zeros((d, n)), np.zeros((d, q)))

    (Phi0, Phir, Phiv, Phiw, _), (dPhi0, dPhir, dPhiv, dPhiw, dconst) = _accumulate(sys, dstep)
    Mw, Sw, Mv, Sv = _stacked_noise(sys)
    rvec = sys.r.reshape(m * N)
    dmean = dPhi0 @ sys.mu0 + dPhir @ rvec + dPhiv @ Mv + dPhiw @ Mw + dconst
    dcov = (
        dPhi0 @ sys.Sigma0 @ Phi0.T + Phi0 @ sys.Sigma0 @ dPhi0.T
        + dPhiv @ Sv @ Phiv.T + Phiv @ Sv @ dPhiv.T
        + dPhiw @ Sw @ Phiw.T + Phiw @ Sw @ dPhiw.T
    )
    return dmean, (dcov + dcov.T) / 2.0
