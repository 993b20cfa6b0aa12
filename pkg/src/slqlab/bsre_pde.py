"""Backward Riccati solver for Brownian-functional coefficients (d = 1).

Writing the solution as a field of the current Brownian value, K_t = k(t, W_t),
turns the backward stochastic equation into the parabolic system

    k_t + 1/2 k_ww + G(t, k, k_w) = 0,     k(T, w) = M(w),

with the martingale density identified as the spatial gradient L = k_w.
The solver marches backward with an explicit stencil on a uniform w grid,
zero-gradient (Neumann) closure at |w| = w_max, and the same symmetrize +
eigenvalue-clamp treatment per slice as the ODE solver. Stability of the
explicit scheme requires dt <= dw^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .csvio import write_csv_atomic
from .errors import BlowUpError, ConfigurationError, DomainError, SingularWeightError
from .model import ProblemSpec
from .riccati_core import SINGULARITY_EIG, RiccatiPoint, sym

FIELD_PSD_TOL = 1e-6
DEFAULT_SPACE_NODES = 201
DEFAULT_WMAX_STDS = 5.0
STABILITY_SAFETY = 0.9


@dataclass(frozen=True)
class RiccatiField:
    """Riccati solution on a (t, w) grid with its spatial gradient field."""

    t_grid: np.ndarray    # (S+1,)
    w_grid: np.ndarray    # (J,) uniform on [-w_max, w_max]
    K_field: np.ndarray   # (S+1, J, n, n)
    L_field: np.ndarray   # (S+1, J, n, n): central difference in w, one-sided at edges

    @property
    def n(self) -> int:
        return self.K_field.shape[-1]

    @property
    def w_max(self) -> float:
        return float(self.w_grid[-1])

    def K00(self) -> np.ndarray:
        """K at (t=0, w=0); the w grid always contains 0 for odd node counts."""
        j = int(np.argmin(np.abs(self.w_grid)))
        return self.K_field[0, j]

    def to_csv(self, path):
        """Columns: t, w, vec(K) row-major, vec(L) row-major."""
        n = self.n
        header = ["t", "w"]
        header += [f"K{i + 1}{j + 1}" for i in range(n) for j in range(n)]
        header += [f"L{i + 1}{j + 1}" for i in range(n) for j in range(n)]

        def rows():
            for it, t in enumerate(self.t_grid):
                for jw, w in enumerate(self.w_grid):
                    yield [t, w, *self.K_field[it, jw].ravel(), *self.L_field[it, jw].ravel()]

        return write_csv_atomic(path, header, rows())


def stability_steps(T: float, space_nodes: int, w_max: float,
                    safety: float = STABILITY_SAFETY) -> int:
    """Smallest step count satisfying dt <= safety * dw^2."""
    dw = 2.0 * w_max / (space_nodes - 1)
    return max(2, math.ceil(T / (safety * dw * dw)))


def default_w_max(T: float) -> float:
    return DEFAULT_WMAX_STDS * math.sqrt(T)


def _gradient(K: np.ndarray, dw: float, neumann: bool) -> np.ndarray:
    """d/dw of a (J, n, n) slice; central interior, edges per ``neumann``."""
    out = np.empty_like(K)
    out[1:-1] = (K[2:] - K[:-2]) / (2.0 * dw)
    if neumann:
        out[0] = 0.0
        out[-1] = 0.0
    else:
        out[0] = (K[1] - K[0]) / dw
        out[-1] = (K[-1] - K[-2]) / dw
    return out


def _second_diff(K: np.ndarray, dw: float) -> np.ndarray:
    """d2/dw2 with mirrored ghost nodes (zero-gradient closure)."""
    out = np.empty_like(K)
    out[1:-1] = (K[2:] - 2.0 * K[1:-1] + K[:-2]) / (dw * dw)
    out[0] = 2.0 * (K[1] - K[0]) / (dw * dw)
    out[-1] = 2.0 * (K[-2] - K[-1]) / (dw * dw)
    return out


def _eval_G_slice(spec: ProblemSpec, t: float, w: np.ndarray,
                  K: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Generator G(t, K, L) stacked over the w grid (d = 1)."""
    A = spec.A.eval_batch(t, w)
    B = spec.B.eval_batch(t, w)
    C = spec.C[0].eval_batch(t, w)
    D = spec.D[0].eval_batch(t, w)
    Q = spec.Q.eval_batch(t, w)
    N = spec.N.eval_batch(t, w)
    At = np.swapaxes(A, -1, -2)
    Ct = np.swapaxes(C, -1, -2)
    Dt = np.swapaxes(D, -1, -2)
    weight = N + Dt @ K @ D
    eigmin = float(np.linalg.eigvalsh(sym(weight)).min())
    if eigmin <= SINGULARITY_EIG:
        raise SingularWeightError(eigmin)
    mixing = K @ B + Ct @ K @ D + L @ D
    G = At @ K + K @ A + Q + Ct @ K @ C + Ct @ L + L @ C
    G = G - mixing @ np.linalg.solve(sym(weight), np.swapaxes(mixing, -1, -2))
    return sym(G)


def _clamp_slice(K: np.ndarray, where: str) -> np.ndarray:
    K = sym(K)
    eigvals, eigvecs = np.linalg.eigh(K)
    lo = float(eigvals.min())
    if lo < -FIELD_PSD_TOL:
        raise BlowUpError(f"{where}: field lost positive semidefiniteness (min eigenvalue {lo:.3e})")
    if lo < 0.0:
        eigvals = np.clip(eigvals, 0.0, None)
        K = sym(eigvecs @ (eigvals[..., None] * np.swapaxes(eigvecs, -1, -2)))
    return K


def solve_field(spec: ProblemSpec, steps: int, space_nodes: int = DEFAULT_SPACE_NODES,
                w_max: float | None = None) -> RiccatiField:
    """March the lifted system backward from k(T, w) = M(w).

    Requires d = 1 (any coefficient mode; constant specs produce a field
    that is independent of w). ``steps`` must satisfy the explicit
    stability bound dt <= dw^2 and ``w_max`` must cover at least four
    standard deviations of W_T.
    """
    if spec.dims.d != 1:
        raise ConfigurationError("field solver requires a scalar Brownian driver (d = 1)")
    if space_nodes < 3 or space_nodes % 2 == 0:
        raise ConfigurationError("space_nodes must be an odd integer >= 3 (grid must contain w = 0)")
    if w_max is None:
        w_max = default_w_max(spec.T)
    if w_max < 4.0 * math.sqrt(spec.T):
        raise ConfigurationError(
            f"w_max={w_max:g} too small: need at least 4*sqrt(T)={4.0 * math.sqrt(spec.T):g}"
        )
    n = spec.dims.n
    t_grid = np.linspace(0.0, spec.T, steps + 1)
    w_grid = np.linspace(-w_max, w_max, space_nodes)
    dw = float(w_grid[1] - w_grid[0])  # the exact grid spacing, reused for all stencils
    dt = spec.T / steps
    if dt > dw * dw * (1.0 + 1e-12):
        raise ConfigurationError(
            f"explicit scheme unstable: dt={dt:.3e} exceeds dw^2={dw * dw:.3e}; "
            f"use steps >= {stability_steps(spec.T, space_nodes, w_max, 1.0)}"
        )
    K_field = np.empty((steps + 1, space_nodes, n, n))
    L_field = np.empty_like(K_field)

    K = sym(np.ascontiguousarray(spec.M.eval_batch(spec.T, w_grid)))
    K = _clamp_slice(K, "terminal slice")
    K_field[steps] = K
    L_field[steps] = sym(_gradient(K, dw, neumann=False))
    for k in range(steps - 1, -1, -1):
        t_hi = t_grid[k + 1]
        grad = _gradient(K, dw, neumann=True)
        G = _eval_G_slice(spec, t_hi, w_grid, K, sym(grad))
        K = K + dt * (0.5 * _second_diff(K, dw) + G)
        if not np.all(np.isfinite(K)):
            raise BlowUpError(f"field solver produced non-finite values at t={t_grid[k]:.6g}")
        K = _clamp_slice(K, f"slice t={t_grid[k]:.6g}")
        K_field[k] = K
        L_field[k] = sym(_gradient(K, dw, neumann=False))
    return RiccatiField(t_grid=t_grid, w_grid=w_grid, K_field=K_field, L_field=L_field)


def sample_solution(field: RiccatiField, t: float, w: float) -> RiccatiPoint:
    """Bilinear interpolation of (K, L); w outside the grid is clamped and flagged."""
    t_grid, w_grid = field.t_grid, field.w_grid
    if not t_grid[0] <= t <= t_grid[-1]:
        raise DomainError(f"t={t} outside [{t_grid[0]}, {t_grid[-1]}]")
    clamped = bool(w < w_grid[0] or w > w_grid[-1])
    w = float(np.clip(w, w_grid[0], w_grid[-1]))

    it = min(int(np.searchsorted(t_grid, t, side="right") - 1), len(t_grid) - 2)
    jw = min(int(np.searchsorted(w_grid, w, side="right") - 1), len(w_grid) - 2)
    lt = (t - t_grid[it]) / (t_grid[it + 1] - t_grid[it])
    lw = (w - w_grid[jw]) / (w_grid[jw + 1] - w_grid[jw])

    def interp(F):
        return ((1 - lt) * (1 - lw) * F[it, jw]
                + (1 - lt) * lw * F[it, jw + 1]
                + lt * (1 - lw) * F[it + 1, jw]
                + lt * lw * F[it + 1, jw + 1])

    return RiccatiPoint(K=interp(field.K_field), L=(interp(field.L_field),), clamped=clamped)


def sample_batch(field: RiccatiField, t: float, w: np.ndarray):
    """Vectorized (K, L) interpolation at one time for an array of w values.

    Returns (K, L, clamped_count); w values beyond the grid are clamped.
    """
    t_grid, w_grid = field.t_grid, field.w_grid
    if not t_grid[0] <= t <= t_grid[-1]:
        raise DomainError(f"t={t} outside [{t_grid[0]}, {t_grid[-1]}]")
    w = np.asarray(w, dtype=float)
    clamped = int(np.count_nonzero((w < w_grid[0]) | (w > w_grid[-1])))
    wc = np.clip(w, w_grid[0], w_grid[-1])

    it = min(int(np.searchsorted(t_grid, t, side="right") - 1), len(t_grid) - 2)
    lt = (t - t_grid[it]) / (t_grid[it + 1] - t_grid[it])
    jw = np.clip(np.searchsorted(w_grid, wc, side="right") - 1, 0, len(w_grid) - 2)
    dw = w_grid[1] - w_grid[0]
    lw = ((wc - w_grid[jw]) / dw)[:, None, None]

    def interp(F):
        lo = (1 - lw) * F[it, jw] + lw * F[it, jw + 1]
        hi = (1 - lw) * F[it + 1, jw] + lw * F[it + 1, jw + 1]
        return (1 - lt) * lo + lt * hi

    return interp(field.K_field), interp(field.L_field), clamped
