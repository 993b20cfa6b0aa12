"""Backward matrix Riccati ODE solver for deterministic coefficients.

With constant or time-varying coefficients the martingale densities vanish
and the backward equation collapses to the matrix ODE

    dK/dt = -G(t, K, 0),   K(T) = M,

integrated here with the classical 4-stage one-step method on a fixed grid.
Every accepted step is symmetrized and eigenvalue-clamped at zero (the value
field is nonnegative; a violation beyond -1e-8 aborts as a blow-up since it
signals a bug rather than rounding noise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .csvio import write_csv_atomic
from .errors import BlowUpError, ConfigurationError, DomainError
from .model import ProblemSpec
from .riccati_core import eval_G, sym

PSD_CLAMP_TOL = 1e-8


@dataclass(frozen=True)
class RiccatiPath:
    """Riccati solution on a time grid: K and the drift integrand G per node."""

    grid: np.ndarray        # (S+1,) strictly increasing, grid[0]=0, grid[-1]=T
    K_values: np.ndarray    # (S+1, n, n)
    G_values: np.ndarray    # (S+1, n, n), G(t_k, K_k, 0)

    @property
    def n(self) -> int:
        return self.K_values.shape[-1]

    def K0(self) -> np.ndarray:
        return self.K_values[0]

    def to_csv(self, path):
        """Columns: t, vec(K) row-major, vec(G) row-major."""
        n = self.n
        header = ["t"]
        header += [f"K{i + 1}{j + 1}" for i in range(n) for j in range(n)]
        header += [f"G{i + 1}{j + 1}" for i in range(n) for j in range(n)]
        rows = (
            [t, *K.ravel(), *G.ravel()]
            for t, K, G in zip(self.grid, self.K_values, self.G_values)
        )
        return write_csv_atomic(path, header, rows)


def _clamp_psd(K: np.ndarray, where: str) -> np.ndarray:
    K = sym(K)
    eigvals, eigvecs = np.linalg.eigh(K)
    lo = float(eigvals.min())
    if lo < -PSD_CLAMP_TOL:
        raise BlowUpError(f"{where}: K lost positive semidefiniteness (min eigenvalue {lo:.3e})")
    if lo < 0.0:
        eigvals = np.clip(eigvals, 0.0, None)
        K = sym(eigvecs @ np.diag(eigvals) @ eigvecs.T)
    return K


def solve_backward(spec: ProblemSpec, steps: int) -> RiccatiPath:
    """Integrate the Riccati ODE backward from K(T) = M on ``steps`` intervals."""
    if spec.has_random_coefficients:
        raise ConfigurationError("ODE solver requires constant or time-varying coefficients")
    if steps < 2:
        raise ConfigurationError(f"need at least 2 steps, got {steps}")
    n = spec.dims.n
    grid = np.linspace(0.0, spec.T, steps + 1)
    h = spec.T / steps
    K_values = np.empty((steps + 1, n, n))
    G_values = np.empty((steps + 1, n, n))

    def G_at(t, K):
        return eval_G(spec.snapshot(t), K)

    K = sym(spec.terminal_weight())
    K_values[steps] = K
    G_values[steps] = G_at(spec.T, K)
    for k in range(steps - 1, -1, -1):
        t_hi = grid[k + 1]
        g1 = G_values[k + 1]  # G(t_hi, K) already computed
        g2 = G_at(t_hi - 0.5 * h, sym(K + 0.5 * h * g1))
        g3 = G_at(t_hi - 0.5 * h, sym(K + 0.5 * h * g2))
        g4 = G_at(t_hi - h, sym(K + h * g3))
        K = K + (h / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
        K = _clamp_psd(K, f"step {k} (t={grid[k]:.6g})")
        K_values[k] = K
        G_values[k] = G_at(grid[k], K)
    return RiccatiPath(grid=grid, K_values=K_values, G_values=G_values)


def interpolate(path: RiccatiPath, t: float) -> np.ndarray:
    """Linear-in-t interpolation of K; exact at grid points."""
    grid = path.grid
    if not grid[0] <= t <= grid[-1]:
        raise DomainError(f"t={t} outside [{grid[0]}, {grid[-1]}]")
    k = int(np.searchsorted(grid, t, side="right") - 1)
    if k >= len(grid) - 1:
        return path.K_values[-1].copy()
    t0, t1 = grid[k], grid[k + 1]
    lam = (t - t0) / (t1 - t0)
    return (1.0 - lam) * path.K_values[k] + lam * path.K_values[k + 1]
