"""Exact dynamic programming on binomial Brownian trees.

The Brownian increment over each step is replaced by +/- sqrt(dt) with equal
probability (matching the first two moments), which makes the one-step
minimization an exact linear-quadratic problem per node:

    Ahat(s) = I + A dt + C s,   Bhat(s) = B dt + D s,   s = +/- sqrt(dt)
    K_k = Q dt + E[Ahat' K_{k+1} Ahat] - S H^{-1} S'
          with  H = N dt + E[Bhat' K_{k+1} Bhat],  S = E[Ahat' K_{k+1} Bhat]

solved backward from K_S(node) = M(node). Recombining mode indexes nodes by
the number of up moves (coefficients are read at w = (2j - k) sqrt(dt));
path-dependent mode indexes nodes by the bitmask of increment signs and
accepts callbacks for genuinely history-dependent coefficients. This module
is the independent brute-force oracle the continuous solvers are checked
against, so every node is solved exactly (linear solves, no iteration).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .csvio import write_csv_atomic
from .errors import BlowUpError, ConfigurationError
from .model import ProblemSpec
from .riccati_core import sym

MAX_PATH_STEPS = 16
HESSIAN_EIG_FLOOR = 1e-14


class TreeMode(Enum):
    RECOMBINING = "recombining"
    PATH_DEPENDENT = "path-dependent"


@dataclass(frozen=True)
class TreeValue:
    """Node-indexed quadratic value coefficients K_k with V_k(node, x) = <K x, x>."""

    mode: TreeMode
    steps: int
    dt: float
    node_values: tuple[np.ndarray, ...]  # slice k: (count_k, n, n)
    gains: tuple[np.ndarray, ...]        # slice k < S: (count_k, m, n), u = -gain x

    @property
    def root(self) -> np.ndarray:
        return self.node_values[0][0]

    def root_value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.root @ x)

    def node_count(self, k: int) -> int:
        return self.node_values[k].shape[0]

    def to_csv(self, path):
        """Per-slice summary plus the root matrix entries on the k=0 row."""
        n = self.root.shape[0]
        header = ["k", "t", "nodes", "min_eigenvalue", "max_trace", "mean_trace"]
        header += [f"root_K{i + 1}{j + 1}" for i in range(n) for j in range(n)]

        def rows():
            for k, block in enumerate(self.node_values):
                eigs = np.linalg.eigvalsh(block)
                traces = np.trace(block, axis1=-2, axis2=-1)
                row = [k, k * self.dt, block.shape[0],
                       float(eigs.min()), float(traces.max()), float(traces.mean())]
                row += list(self.root.ravel()) if k == 0 else [""] * (n * n)
                yield row

        return write_csv_atomic(path, header, rows())


def _node_w(mode: TreeMode, k: int, index: int, sqdt: float) -> float:
    if mode is TreeMode.RECOMBINING:
        return (2 * index - k) * sqdt
    return (2 * int(index).bit_count() - k) * sqdt


def _slice_size(mode: TreeMode, k: int) -> int:
    return k + 1 if mode is TreeMode.RECOMBINING else 1 << k


def _successors(mode: TreeMode, index: int, k: int) -> tuple[int, int]:
    """(up, down) node indices in slice k+1."""
    if mode is TreeMode.RECOMBINING:
        return index + 1, index
    return index | (1 << k), index


def _check_tree_args(spec: ProblemSpec, steps: int, mode: TreeMode):
    if spec.dims.d != 1:
        raise ConfigurationError("tree oracle requires a scalar Brownian driver (d = 1)")
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    if mode is TreeMode.PATH_DEPENDENT and steps > MAX_PATH_STEPS:
        raise ConfigurationError(
            f"path-dependent mode is limited to {MAX_PATH_STEPS} steps (2^S nodes), got {steps}"
        )


def _default_coeff_fn(spec: ProblemSpec, mode: TreeMode, sqdt: float):
    def fn(t, k, index):
        return spec.snapshot(t, _node_w(mode, k, index, sqdt))

    return fn


def _default_terminal_fn(spec: ProblemSpec, mode: TreeMode, steps: int, sqdt: float):
    def fn(index):
        return spec.M(spec.T, _node_w(mode, steps, index, sqdt))

    return fn


def solve_tree(spec: ProblemSpec, steps: int, mode: TreeMode = TreeMode.RECOMBINING,
               node_order: str = "forward", coeff_fn=None, terminal_fn=None) -> TreeValue:
    """Backward induction with exact per-node minimization.

    ``coeff_fn(t, k, index)`` and ``terminal_fn(index)`` override the default
    evaluation of the spec's coefficients at the node's Brownian value; in
    path-dependent mode ``index`` is the bitmask of up moves, which is what
    makes fully history-dependent coefficients expressible.

    ``node_order`` ("forward" or "reverse") fixes the sweep direction within
    each time slice; the per-node solves are independent, so both orders
    must produce bit-identical trees (checked by the uniqueness tests).
    """
    mode = TreeMode(mode)
    _check_tree_args(spec, steps, mode)
    if node_order not in ("forward", "reverse"):
        raise ConfigurationError(f"node_order must be 'forward' or 'reverse', got {node_order!r}")
    n, m = spec.dims.n, spec.dims.m
    dt = spec.T / steps
    sqdt = math.sqrt(dt)
    coeff_fn = coeff_fn or _default_coeff_fn(spec, mode, sqdt)
    terminal_fn = terminal_fn or _default_terminal_fn(spec, mode, steps, sqdt)

    values: list[np.ndarray] = [None] * (steps + 1)
    gains: list[np.ndarray] = [None] * steps

    last = np.empty((_slice_size(mode, steps), n, n))
    for idx in range(last.shape[0]):
        last[idx] = sym(np.asarray(terminal_fn(idx), dtype=float))
    values[steps] = last

    eye = np.eye(n)
    for k in range(steps - 1, -1, -1):
        count = _slice_size(mode, k)
        K_slice = np.empty((count, n, n))
        G_slice = np.empty((count, m, n))
        K_next = values[k + 1]
        t = k * dt
        sweep = range(count) if node_order == "forward" else range(count - 1, -1, -1)
        for idx in sweep:
            up, dn = _successors(mode, idx, k)
            snap = coeff_fn(t, k, idx)
            K_slice[idx], G_slice[idx] = _node_update(
                snap, K_next[up], K_next[dn], dt, sqdt, eye
            )
        values[k] = K_slice
        gains[k] = G_slice
    return TreeValue(mode=mode, steps=steps, dt=dt,
                     node_values=tuple(values), gains=tuple(gains))


def _node_update(snap, K_up, K_dn, dt, sqdt, eye):
    A, B = snap.A, snap.B
    C, D = snap.C[0], snap.D[0]
    Ap = eye + A * dt + C * sqdt
    Am = eye + A * dt - C * sqdt
    Bp = B * dt + D * sqdt
    Bm = B * dt - D * sqdt
    H = snap.N * dt + 0.5 * (Bp.T @ K_up @ Bp + Bm.T @ K_dn @ Bm)
    H = sym(H)
    lo = float(np.linalg.eigvalsh(H).min())
    if lo <= HESSIAN_EIG_FLOOR:
        raise BlowUpError(f"per-node control Hessian singular (min eigenvalue {lo:.3e})")
    S = 0.5 * (Ap.T @ K_up @ Bp + Am.T @ K_dn @ Bm)
    EA = 0.5 * (Ap.T @ K_up @ Ap + Am.T @ K_dn @ Am)
    theta = np.linalg.solve(H, S.T)
    K = sym(snap.Q * dt + EA - S @ theta)
    return K, theta


def tree_policy_value(spec: ProblemSpec, steps: int, policy,
                      mode: TreeMode = TreeMode.RECOMBINING,
                      coeff_fn=None, terminal_fn=None) -> np.ndarray:
    """Exact value matrix of an arbitrary node-indexed feedback policy.

    ``policy(k, index)`` returns the m x n gain applied at that node
    (u = -gain x); passing the gains stored in a solved TreeValue reproduces
    its root. Returns the root matrix K^pi_0; by DP optimality it dominates
    the optimal root in the positive semidefinite order.
    """
    mode = TreeMode(mode)
    _check_tree_args(spec, steps, mode)
    n = spec.dims.n
    dt = spec.T / steps
    sqdt = math.sqrt(dt)
    coeff_fn = coeff_fn or _default_coeff_fn(spec, mode, sqdt)
    terminal_fn = terminal_fn or _default_terminal_fn(spec, mode, steps, sqdt)

    eye = np.eye(n)
    K_next = np.empty((_slice_size(mode, steps), n, n))
    for idx in range(K_next.shape[0]):
        K_next[idx] = sym(np.asarray(terminal_fn(idx), dtype=float))
    for k in range(steps - 1, -1, -1):
        count = _slice_size(mode, k)
        K_slice = np.empty((count, n, n))
        t = k * dt
        for idx in range(count):
            up, dn = _successors(mode, idx, k)
            snap = coeff_fn(t, k, idx)
            theta = np.asarray(policy(k, idx), dtype=float)
            A, B = snap.A, snap.B
            C, D = snap.C[0], snap.D[0]
            Fp = (eye + A * dt + C * sqdt) - (B * dt + D * sqdt) @ theta
            Fm = (eye + A * dt - C * sqdt) - (B * dt - D * sqdt) @ theta
            K_slice[idx] = sym(
                snap.Q * dt + theta.T @ snap.N @ theta * dt
                + 0.5 * (Fp.T @ K_next[up] @ Fp + Fm.T @ K_next[dn] @ Fm)
            )
        K_next = K_slice
    return K_next[0]


def replay_policy(tree: TreeValue):
    """Policy callback that replays a solved tree's optimal gains."""

    def policy(k, index):
        return tree.gains[k][index]

    return policy
