"""Independent reference implementations used to check the library.

Everything here is deliberately written as plain recursive/loop code with no
shared machinery from the package, so the tests compare two routes.
"""
from __future__ import annotations

import numpy as np

from stless.stl import (
    Always,
    And,
    Eventually,
    LinearPredicate,
    Not,
    Or,
    Pred,
    Until,
)


def brute_robustness(values: np.ndarray, node, t: int) -> float:
    """Direct recursion over the robustness definition, one time point at a time."""
    values = np.asarray(values, dtype=float)
    if isinstance(node, Pred):
        return float(np.dot(values[t], node.pred.coeffs) + node.pred.offset)
    if isinstance(node, Not):
        return -brute_robustness(values, node.child, t)
    if isinstance(node, And):
        return min(brute_robustness(values, c, t) for c in node.children)
    if isinstance(node, Or):
        return max(brute_robustness(values, c, t) for c in node.children)
    if isinstance(node, Always):
        return min(
            brute_robustness(values, node.child, tau)
            for tau in range(t + node.t1, t + node.t2 + 1)
        )
    if isinstance(node, Eventually):
        return max(
            brute_robustness(values, node.child, tau)
            for tau in range(t + node.t1, t + node.t2 + 1)
        )
    if isinstance(node, Until):
        best = -np.inf
        for tau in range(t + node.t1, t + node.t2 + 1):
            left_min = min(
                brute_robustness(values, node.left, tp) for tp in range(t, tau + 1)
            )
            best = max(best, min(brute_robustness(values, node.right, tau), left_min))
        return best
    raise TypeError(node)


def boolean_satisfaction(values: np.ndarray, node, t: int) -> bool:
    """Classic Boolean semantics, independent of the quantitative evaluator."""
    values = np.asarray(values, dtype=float)
    if isinstance(node, Pred):
        return float(np.dot(values[t], node.pred.coeffs) + node.pred.offset) >= 0.0
    if isinstance(node, Not):
        return not boolean_satisfaction(values, node.child, t)
    if isinstance(node, And):
        return all(boolean_satisfaction(values, c, t) for c in node.children)
    if isinstance(node, Or):
        return any(boolean_satisfaction(values, c, t) for c in node.children)
    if isinstance(node, Always):
        return all(
            boolean_satisfaction(values, node.child, tau)
            for tau in range(t + node.t1, t + node.t2 + 1)
        )
    if isinstance(node, Eventually):
        return any(
            boolean_satisfaction(values, node.child, tau)
            for tau in range(t + node.t1, t + node.t2 + 1)
        )
    if isinstance(node, Until):
        for tau in range(t + node.t1, t + node.t2 + 1):
            if boolean_satisfaction(values, node.right, tau) and all(
                boolean_satisfaction(values, node.left, tp) for tp in range(t, tau + 1)
            ):
                return True
        return False
    raise TypeError(node)


def random_formula(rng: np.random.Generator, q: int, depth: int = 3, max_bound: int = 4):
    """Random formula tree of bounded depth over q channels."""

    def pred():
        coeffs = np.zeros(q)
        while not coeffs.any():
            coeffs = np.round(rng.standard_normal(q), 3)
        return Pred(LinearPredicate(tuple(coeffs), float(np.round(rng.standard_normal(), 3))))

    def interval():
        t1 = int(rng.integers(0, max_bound + 1))
        t2 = int(rng.integers(t1, max_bound + 1))
        return t1, t2

    def build(d):
        if d == 0:
            return pred()
        kind = rng.integers(0, 7)
        if kind == 0:
            return pred()
        if kind == 1:
            return Not(build(d - 1))
        if kind == 2:
            return And(tuple(build(d - 1) for _ in range(int(rng.integers(2, 4)))))
        if kind == 3:
            return Or(tuple(build(d - 1) for _ in range(int(rng.integers(2, 4)))))
        if kind == 4:
            return Always(*interval(), build(d - 1))
        if kind == 5:
            return Eventually(*interval(), build(d - 1))
        return Until(*interval(), build(d - 1), build(d - 1))

    return build(depth)


def simulate_system(sys, rng: np.random.Generator, count: int) -> np.ndarray:
    """Direct batched simulation of the closed-loop recursion; returns
    stacked trajectories shaped (count, n*N)."""
    n, m, q, N = sys.n, sys.m, sys.q, sys.N
    chol0 = np.linalg.cholesky(sys.Sigma0 + 1e-15 * np.eye(n))
    x = sys.mu0[None, :] + rng.standard_normal((count, n)) @ chol0.T
    xhat = np.broadcast_to(sys.xhat0, (count, n)).copy()
    out = np.empty((count, N, n))
    out[:, 0] = x
    for t in range(N - 1):
        w = sys.w_mean[t][None, :] + rng.standard_normal((count, n)) @ np.linalg.cholesky(
            sys.w_cov[t] + 1e-15 * np.eye(n)
        ).T
        if q:
            v = sys.v_mean[t][None, :] + rng.standard_normal((count, q)) @ np.linalg.cholesky(
                sys.v_cov[t] + 1e-15 * np.eye(q)
            ).T
            y = x @ sys.C[t].T + v
        if sys.feedback == "open_loop":
            u = np.broadcast_to(sys.r[t], (count, m))
        elif sys.feedback == "measurement":
            u = sys.r[t][None, :] - y @ sys.K[t].T
        else:
            u = sys.r[t][None, :] - xhat @ sys.K[t].T
            xhat = xhat @ sys.A[t].T + u @ sys.B[t].T + (y - xhat @ sys.C[t].T) @ sys.L[t].T
        x = x @ sys.A[t].T + u @ sys.B[t].T + w
        out[:, t + 1] = x
    return out.reshape(count, n * N)
