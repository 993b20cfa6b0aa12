"""Seeded Euler-Maruyama simulation of the controlled state and the flows.

The state follows

    X_{k+1} = X_k + (A X_k + B u_k) dt + sum_i (C^i X_k + D^i u_k) dW^i_k

with the control supplied by a policy object (zero, open loop, or linear
feedback from a Riccati solution; the feedback uses the left-endpoint gain,
so controls are predictable). Brownian increments come from counter-based
per-path substreams derived from (master seed, path index), which makes
every batch bit-reproducible regardless of chunking or execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from types import SimpleNamespace

import numba
import numpy as np

from .bsre_pde import RiccatiField, sample_batch
from .csvio import write_csv_atomic
from .errors import BlowUpError, ConfigurationError, DimensionError
from .model import CoefficientMode, ProblemSpec
from .riccati_core import SINGULARITY_EIG, sym
from .riccati_ode import RiccatiPath, interpolate

DEFAULT_CHUNK = 8192  # fixed so that reduction order never depends on resources


@dataclass(frozen=True)
class SimConfig:
    steps: int
    paths: int
    seed: int
    x0: np.ndarray

    def __post_init__(self):
        if self.steps < 1 or self.paths < 1:
            raise ConfigurationError("steps and paths must be >= 1")
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))


@dataclass(frozen=True)
class TrajectoryBatch:
    """One simulated ensemble: driving noise, states, controls, cost increments.

    ``running_cost[p, k]`` is the k-th quadrature increment of
    <Q X, X> + <N u, u>: trapezoidal in the state part, left-endpoint in the
    control part (controls are piecewise constant on the grid).
    """

    times: np.ndarray         # (S+1,)
    W: np.ndarray             # (P, S+1, d) Brownian values, W[:, 0] = 0
    X: np.ndarray             # (P, S+1, n)
    U: np.ndarray             # (P, S, m)
    running_cost: np.ndarray  # (P, S)

    @property
    def paths(self) -> int:
        return self.X.shape[0]

    @property
    def steps(self) -> int:
        return self.X.shape[1] - 1

    def to_csv(self, path):
        """Long format: one row per (path, step)."""
        d = self.W.shape[2]
        n = self.X.shape[2]
        m = self.U.shape[2]
        header = (["path", "k", "t"]
                  + [f"W{i + 1}" for i in range(d)]
                  + [f"X{i + 1}" for i in range(n)]
                  + [f"u{i + 1}" for i in range(m)]
                  + ["cost_increment"])

        def rows():
            for p in range(self.paths):
                for k in range(self.steps + 1):
                    u = self.U[p, k] if k < self.steps else np.full(m, np.nan)
                    dc = self.running_cost[p, k] if k < self.steps else np.nan
                    yield [p, k, self.times[k], *self.W[p, k], *self.X[p, k], *u, dc]

        return write_csv_atomic(path, header, rows())

    def summary_csv(self, path):
        """Per-time-step ensemble statistics."""
        n = self.X.shape[2]
        header = (["k", "t"]
                  + [f"X{i + 1}_mean" for i in range(n)]
                  + [f"X{i + 1}_std" for i in range(n)]
                  + ["cost_increment_mean"])

        def rows():
            for k in range(self.steps + 1):
                mean = self.X[:, k].mean(axis=0)
                std = self.X[:, k].std(axis=0)
                dc = self.running_cost[:, k].mean() if k < self.steps else np.nan
                yield [k, self.times[k], *mean, *std, dc]

        return write_csv_atomic(path, header, rows())


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based substream for one path: Philox keyed by (seed, path).

    Distinct keys give statistically independent streams by construction,
    so the ensemble is identical however paths are partitioned into chunks.
    """
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def brownian_increments(seed: int, path_slice: range, steps: int, d: int, dt: float) -> np.ndarray:
    """Increments for the given global path indices, shape (len, steps, d).

    Reuses one Philox engine and swaps its (seed, path) key per path; the
    streams are identical to constructing ``path_rng(seed, p)`` afresh.
    """
    out = np.empty((len(path_slice), steps, d))
    sqdt = math.sqrt(dt)
    engine = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
    gen = np.random.Generator(engine)
    counter0 = np.zeros(4, dtype=np.uint64)
    buffer0 = np.zeros(4, dtype=np.uint64)
    seed64 = int(seed) & 0xFFFFFFFFFFFFFFFF
    for row, p in enumerate(path_slice):
        engine.state = {
            "bit_generator": "Philox",
            "state": {"counter": counter0, "key": np.array([seed64, p], dtype=np.uint64)},
            "buffer": buffer0, "buffer_pos": 4, "has_uint32": 0, "uinteger": 0,
        }
        gen.standard_normal(out=out[row])
        out[row] *= sqdt
    return out


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

class ZeroPolicy:
    """u = 0."""

    def prepare(self, spec: ProblemSpec, times: np.ndarray):
        m = spec.dims.m

        def step(k, t, X, w):
            return np.zeros((X.shape[0], m))

        return step

    def affine_schedule(self, spec: ProblemSpec, times: np.ndarray):
        S = len(times) - 1
        return np.zeros((S, spec.dims.m, spec.dims.n)), np.zeros((S, spec.dims.m))


class OpenLoopPolicy:
    """Deterministic control grid u_k shared by all paths, shape (S, m)."""

    def __init__(self, u_grid: np.ndarray):
        self.u_grid = np.atleast_2d(np.asarray(u_grid, dtype=float))

    @staticmethod
    def constant(v, steps: int) -> "OpenLoopPolicy":
        v = np.atleast_1d(np.asarray(v, dtype=float))
        return OpenLoopPolicy(np.tile(v, (steps, 1)))

    def prepare(self, spec: ProblemSpec, times: np.ndarray):
        steps = len(times) - 1
        if self.u_grid.shape != (steps, spec.dims.m):
            raise DimensionError(
                f"open-loop grid has shape {self.u_grid.shape}, expected ({steps}, {spec.dims.m})"
            )
        grid = self.u_grid

        def step(k, t, X, w):
            return np.broadcast_to(grid[k], (X.shape[0], grid.shape[1]))

        return step

    def affine_schedule(self, spec: ProblemSpec, times: np.ndarray):
        S = len(times) - 1
        if self.u_grid.shape != (S, spec.dims.m):
            raise DimensionError(
                f"open-loop grid has shape {self.u_grid.shape}, expected ({S}, {spec.dims.m})"
            )
        return np.zeros((S, spec.dims.m, spec.dims.n)), self.u_grid.copy()


class FeedbackPolicy:
    """u_k = -scale * gain(t_k, w_k) X_k with the gain from a Riccati solution.

    ``scale`` != 1 gives the deliberately suboptimal variants used by the
    dominance tests (2x gain, half gain, sign-flipped gain).
    """

    def __init__(self, solution, scale: float = 1.0):
        self.solution = solution
        self.scale = float(scale)

    def prepare(self, spec: ProblemSpec, times: np.ndarray):
        scale = self.scale
        if isinstance(self.solution, RiccatiPath):
            gains = gain_schedule(spec, self.solution, times[:-1])

            def step(k, t, X, w):
                return -scale * X @ gains[k].T

            return step
        if isinstance(self.solution, RiccatiField):
            field = self.solution

            def step(k, t, X, w):
                gains = _field_gains(spec, field, t, w)
                return -scale * np.einsum("pij,pj->pi", gains, X)

            return step
        raise ConfigurationError(f"unsupported Riccati solution type {type(self.solution)!r}")

    def affine_schedule(self, spec: ProblemSpec, times: np.ndarray):
        if not isinstance(self.solution, RiccatiPath):
            return None  # field gains depend on the path's w
        return -self.scale * gain_schedule(spec, self.solution, times[:-1]), \
            np.zeros((len(times) - 1, spec.dims.m))


def gain_schedule(spec: ProblemSpec, path: RiccatiPath, times: np.ndarray) -> np.ndarray:
    """Feedback gains at the given times from an ODE solution (L = 0)."""
    from .riccati_core import feedback_gain

    out = np.empty((len(times), spec.dims.m, spec.dims.n))
    for k, t in enumerate(times):
        out[k] = feedback_gain(spec.snapshot(float(t)), interpolate(path, float(t)))
    return out


def _field_gains(spec: ProblemSpec, field: RiccatiField, t: float, w: np.ndarray) -> np.ndarray:
    """Per-path gains weight(K)^{-1} mixing(K, L)' at (t, w_p), shape (P, m, n)."""
    K, L, _ = sample_batch(field, t, w)
    B = spec.B.eval_batch(t, w)
    C = spec.C[0].eval_batch(t, w)
    D = spec.D[0].eval_batch(t, w)
    N = spec.N.eval_batch(t, w)
    Ct = np.swapaxes(C, -1, -2)
    Dt = np.swapaxes(D, -1, -2)
    weight = sym(N + Dt @ K @ D)
    eigmin = float(np.linalg.eigvalsh(weight).min())
    if eigmin <= SINGULARITY_EIG:
        from .errors import SingularWeightError

        raise SingularWeightError(eigmin)
    mixing = K @ B + Ct @ K @ D + L @ D
    return np.linalg.solve(weight, np.swapaxes(mixing, -1, -2))


# ---------------------------------------------------------------------------
# coefficient providers (shared vs per-path evaluation)
# ---------------------------------------------------------------------------

class _SharedCoeffs:
    """Deterministic coefficients: one matrix per time step, shared by paths."""

    per_path = False

    def __init__(self, spec: ProblemSpec, times: np.ndarray):
        self.snaps = [spec.snapshot(float(t)) for t in times]

    def at(self, k, w):
        return self.snaps[k]


class _PathCoeffs:
    """Brownian-functional coefficients evaluated at each path's w."""

    per_path = True

    def __init__(self, spec: ProblemSpec, times: np.ndarray):
        self.spec = spec
        self.times = times

    def at(self, k, w):
        spec = self.spec
        t = float(self.times[k])
        return SimpleNamespace(
            A=spec.A.eval_batch(t, w),
            B=spec.B.eval_batch(t, w),
            C=(spec.C[0].eval_batch(t, w),),
            D=(spec.D[0].eval_batch(t, w),),
            Q=spec.Q.eval_batch(t, w),
            N=spec.N.eval_batch(t, w),
        )


def _coeff_provider(spec: ProblemSpec, times: np.ndarray):
    return _PathCoeffs(spec, times) if spec.has_random_coefficients else _SharedCoeffs(spec, times)


def _apply(mat, vec, per_path):
    """mat @ vec per path; mat is (r, c) shared or (P, r, c) stacked."""
    if per_path:
        return np.einsum("pij,pj->pi", mat, vec)
    return vec @ mat.T


# ---------------------------------------------------------------------------
# simulation drivers
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _euler_affine_kernel(dW, Pm, pv, Rm, rv, E, f, Qs, Ns, x0,
                         X, U, state_quad, ctrl_quad):  # pragma: no cover - jitted
    """Closed-loop Euler recursion with in-line control and cost quadratics.

    x_{k+1} = Pm_k x_k + pv_k + sum_i (Rm_ki x_k + rv_ki) dW_ki, with the
    applied control u_k = E_k x_k + f_k and the quadratics <Q_k x, x>,
    <N_k u, u> recorded along the way.
    """
    Pc, S, d = dW.shape
    n = x0.shape[0]
    m = f.shape[1]
    x = np.empty(n)
    xn = np.empty(n)
    u = np.empty(m)
    for p in range(Pc):
        for j in range(n):
            x[j] = x0[j]
            X[p, 0, j] = x0[j]
        for k in range(S):
            sq = 0.0
            for j in range(n):
                for l in range(n):
                    sq += Qs[k, j, l] * x[j] * x[l]
            state_quad[p, k] = sq
            for j in range(m):
                acc = f[k, j]
                for l in range(n):
                    acc += E[k, j, l] * x[l]
                u[j] = acc
                U[p, k, j] = acc
            cq = 0.0
            for j in range(m):
                for l in range(m):
                    cq += Ns[k, j, l] * u[j] * u[l]
            ctrl_quad[p, k] = cq
            for j in range(n):
                acc = pv[k, j]
                for l in range(n):
                    acc += Pm[k, j, l] * x[l]
                xn[j] = acc
            for i in range(d):
                dw = dW[p, k, i]
                for j in range(n):
                    acc = rv[k, i, j]
                    for l in range(n):
                        acc += Rm[k, i, j, l] * x[l]
                    xn[j] = xn[j] + acc * dw
            for j in range(n):
                x[j] = xn[j]
                X[p, k + 1, j] = xn[j]
        sq = 0.0
        for j in range(n):
            for l in range(n):
                sq += Qs[S, j, l] * x[j] * x[l]
        state_quad[p, S] = sq


def _affine_stacks(spec: ProblemSpec, coeffs, times: np.ndarray, E: np.ndarray,
                   f: np.ndarray, dt: float):
    """Per-step closed-loop and cost matrices for the control u_k = E_k x + f_k."""
    n, m, d = spec.dims.n, spec.dims.m, spec.dims.d
    S = len(times) - 1
    Pm = np.empty((S, n, n))
    pv = np.empty((S, n))
    Rm = np.empty((S, d, n, n))
    rv = np.empty((S, d, n))
    Qs = np.empty((S + 1, n, n))
    Ns = np.empty((S, m, m))
    eye = np.eye(n)
    for k in range(S):
        snap = coeffs.at(k, None)
        Pm[k] = eye + (snap.A + snap.B @ E[k]) * dt
        pv[k] = (snap.B @ f[k]) * dt
        Qs[k] = snap.Q
        Ns[k] = snap.N
        for i in range(d):
            Rm[k, i] = snap.C[i] + snap.D[i] @ E[k]
            rv[k, i] = snap.D[i] @ f[k]
    Qs[S] = coeffs.at(S, None).Q
    return Pm, pv, Rm, rv, Qs, Ns


def _prepare(spec: ProblemSpec, times: np.ndarray, policy):
    """Coefficient provider plus either an affine fast path or a generic step fn."""
    coeffs = _coeff_provider(spec, times)
    schedule = getattr(policy, "affine_schedule", None)
    if schedule is not None and not coeffs.per_path:
        affine = schedule(spec, times)
        if affine is not None:
            E, f = affine
            dt = float(times[1] - times[0])
            return coeffs, None, (E, f, _affine_stacks(spec, coeffs, times, E, f, dt))
    return coeffs, policy.prepare(spec, times), None


def iter_path_chunks(spec: ProblemSpec, config: SimConfig, policy,
                     chunk: int = DEFAULT_CHUNK):
    """Yield TrajectoryBatch objects covering paths [0, P) in fixed chunks.

    Results are identical to one big batch split at the same offsets; the
    per-path RNG substreams make the union independent of chunk size.
    """
    times = np.linspace(0.0, spec.T, config.steps + 1)
    prepared = _prepare(spec, times, policy)
    for start in range(0, config.paths, chunk):
        stop = min(start + chunk, config.paths)
        yield _simulate_range(spec, config, policy, range(start, stop), prepared)


def simulate(spec: ProblemSpec, config: SimConfig, policy) -> TrajectoryBatch:
    """Simulate the controlled state; fully reproducible from config.seed."""
    return _simulate_range(spec, config, policy, range(config.paths))


def _simulate_range(spec: ProblemSpec, config: SimConfig, policy,
                    path_range: range, prepared=None) -> TrajectoryBatch:
    n, m, d = spec.dims.n, spec.dims.m, spec.dims.d
    S = config.steps
    P = len(path_range)
    if config.x0.shape != (n,):
        raise DimensionError(f"x0 has shape {config.x0.shape}, expected ({n},)")
    dt = spec.T / S
    times = np.linspace(0.0, spec.T, S + 1)
    dW = brownian_increments(config.seed, path_range, S, d, dt)

    if prepared is None:
        prepared = _prepare(spec, times, policy)
    coeffs, step_fn, affine = prepared

    W = np.zeros((P, S + 1, d))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    X = np.empty((P, S + 1, n))
    U = np.empty((P, S, m))

    if affine is not None:
        E, f, (Pm, pv, Rm, rv, Qs, Ns) = affine
        state_quad = np.empty((P, S + 1))
        ctrl_quad = np.empty((P, S))
        _euler_affine_kernel(dW, Pm, pv, Rm, rv, E, f, Qs, Ns, config.x0,
                             X, U, state_quad, ctrl_quad)
        running = (0.5 * (state_quad[:, :-1] + state_quad[:, 1:]) + ctrl_quad) * dt
    else:
        X[:, 0] = config.x0
        pp = coeffs.per_path
        x = X[:, 0].copy()
        for k in range(S):
            w = W[:, k, 0] if d == 1 else W[:, k]
            snap = coeffs.at(k, w)
            u = np.asarray(step_fn(k, times[k], x, w))
            U[:, k] = u
            x_next = x + (_apply(snap.A, x, pp) + _apply(snap.B, u, pp)) * dt
            for i in range(d):
                diff = _apply(snap.C[i], x, pp) + _apply(snap.D[i], u, pp)
                x_next = x_next + diff * dW[:, k, i][:, None]
            x = x_next
            X[:, k + 1] = x
        running = _running_increments(spec, coeffs, times, W, X, U, dt)

    if not np.all(np.isfinite(X)):
        bad = np.argwhere(~np.isfinite(X))
        p_local, step, comp = (int(v) for v in bad[0])
        raise BlowUpError(
            f"state diverged: path {path_range.start + p_local}, step {step}, component {comp}"
        )

    return TrajectoryBatch(times=times, W=W, X=X, U=U, running_cost=running)


def _running_increments(spec, coeffs, times, W, X, U, dt) -> np.ndarray:
    """Quadrature increments of <QX,X> + <Nu,u>: trapezoid in X, left point in u."""
    S = U.shape[1]
    d = W.shape[2]
    P = X.shape[0]
    if not coeffs.per_path:
        Q_stack = np.stack([coeffs.at(k, None).Q for k in range(S + 1)])
        N_stack = np.stack([coeffs.at(k, None).N for k in range(S)])
        state_quad = np.einsum("pki,kij,pkj->pk", X, Q_stack, X, optimize=True)
        ctrl_quad = np.einsum("pki,kij,pkj->pk", U, N_stack, U, optimize=True)
    else:
        state_quad = np.empty((P, S + 1))
        ctrl_quad = np.empty((P, S))
        for k in range(S + 1):
            w = W[:, k, 0] if d == 1 else W[:, k]
            snap = coeffs.at(k, w)
            state_quad[:, k] = np.einsum("pi,pij,pj->p", X[:, k], snap.Q, X[:, k])
            if k < S:
                ctrl_quad[:, k] = np.einsum("pi,pij,pj->p", U[:, k], snap.N, U[:, k])
    return (0.5 * (state_quad[:, :-1] + state_quad[:, 1:]) + ctrl_quad) * dt


def terminal_cost(spec: ProblemSpec, batch: TrajectoryBatch) -> np.ndarray:
    """<M X_T, X_T> per path (M evaluated at the terminal Brownian value)."""
    XT = batch.X[:, -1]
    if spec.M.mode is CoefficientMode.BROWNIAN:
        M = spec.M.eval_batch(spec.T, batch.W[:, -1, 0])
        return np.einsum("pi,pij,pj->p", XT, M, XT)
    M = spec.terminal_weight()
    return np.einsum("pi,ij,pj->p", XT, M, XT)


def simulate_flows(spec: ProblemSpec, config: SimConfig):
    """Euler paths of the fundamental flow and its inverse on shared noise.

    dPhi = A Phi dt + sum_i C^i Phi dW^i,                    Phi_0 = I
    dPsi = Psi (-A + sum_i C^i C^i) dt - sum_i Psi C^i dW^i, Psi_0 = I

    Returns (Phi, Psi) with shape (P, S+1, n, n) each.
    """
    n, d = spec.dims.n, spec.dims.d
    S, P = config.steps, config.paths
    dt = spec.T / S
    times = np.linspace(0.0, spec.T, S + 1)
    dW = brownian_increments(config.seed, range(P), S, d, dt)
    coeffs = _coeff_provider(spec, times)

    Phi = np.empty((P, S + 1, n, n))
    Psi = np.empty((P, S + 1, n, n))
    Phi[:, 0] = np.eye(n)
    Psi[:, 0] = np.eye(n)
    phi = Phi[:, 0].copy()
    psi = Psi[:, 0].copy()
    W_running = np.zeros(P) if d == 1 else np.zeros((P, d))
    for k in range(S):
        snap = coeffs.at(k, W_running)
        pp = coeffs.per_path
        A = snap.A
        CC = sum(Ci @ Ci for Ci in snap.C) if not pp \
            else sum(np.einsum("pij,pjk->pik", Ci, Ci) for Ci in snap.C)
        if pp:
            phi_n = phi + np.einsum("pij,pjk->pik", A, phi) * dt
            psi_n = psi + np.einsum("pij,pjk->pik", psi, -A + CC) * dt
            for i in range(d):
                Ci = snap.C[i]
                inc = dW[:, k, i][:, None, None]
                phi_n = phi_n + np.einsum("pij,pjk->pik", Ci, phi) * inc
                psi_n = psi_n - np.einsum("pij,pjk->pik", psi, Ci) * inc
        else:
            phi_n = phi + np.einsum("ij,pjk->pik", A, phi) * dt
            psi_n = psi + np.einsum("pij,jk->pik", psi, -A + CC) * dt
            for i in range(d):
                Ci = snap.C[i]
                inc = dW[:, k, i][:, None, None]
                phi_n = phi_n + np.einsum("ij,pjk->pik", Ci, phi) * inc
                psi_n = psi_n - np.einsum("pij,jk->pik", psi, Ci) * inc
        if not (np.all(np.isfinite(phi_n)) and np.all(np.isfinite(psi_n))):
            raise BlowUpError(f"flow diverged at step {k + 1}")
        phi, psi = phi_n, psi_n
        Phi[:, k + 1] = phi
        Psi[:, k + 1] = psi
        W_running = W_running + (dW[:, k, 0] if d == 1 else dW[:, k])
    return Phi, Psi
