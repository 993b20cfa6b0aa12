"""Matrix algebra of the Riccati generator and the optimal feedback gain.

For a value-field Hessian K and martingale densities L = (L^1, ..., L^d) the
building blocks are

    weight(K)        N + sum_i (D^i)' K D^i                       (m x m)
    mixing(K, L)     K B + sum_i (C^i)' K D^i + sum_i L^i D^i     (n x m)
    generator(K, L)  A'K + KA + Q + sum_i (C^i)' K C^i
                     + sum_i [(C^i)' L^i + L^i C^i]
                     - mixing . weight^{-1} . mixing'             (n x n)

and the optimal control is u = -gain(K, L) x with
gain = weight^{-1}(K) mixing'(K, L).

All inverses are realized as symmetric linear solves; outputs that live in
the symmetric matrices are explicitly symmetrized to kill rounding skew.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SingularWeightError
from .model import CoefficientSnapshot

SINGULARITY_EIG = 1e-12  # smallest admissible eigenvalue of weight(K)


@dataclass(frozen=True)
class RiccatiPoint:
    """Value-field Hessian K with its martingale densities L = (L^1, ..., L^d).

    Both K and every L^i are symmetric n x n. ``clamped`` flags that the
    point came from an out-of-grid interpolation (see bsre_pde).
    """

    K: np.ndarray
    L: tuple[np.ndarray, ...]
    clamped: bool = False

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "L", tuple(np.asarray(Li, dtype=float) for Li in self.L))
        n = K.shape[0]
        if K.shape != (n, n):
            raise DimensionError(f"K must be square, got {K.shape}")
        for Li in self.L:
            if Li.shape != (n, n):
                raise DimensionError(f"L blocks must match K, got {Li.shape}")


def sym(mat: np.ndarray) -> np.ndarray:
    """Symmetrize (works on stacked matrices)."""
    return 0.5 * (mat + np.swapaxes(mat, -1, -2))


def _check_square(name: str, mat: np.ndarray, size: int):
    if mat.shape != (size, size):
        raise DimensionError(f"{name} has shape {mat.shape}, expected ({size}, {size})")


def eval_N(snapshot: CoefficientSnapshot, K: np.ndarray) -> np.ndarray:
    """Control weight N + sum_i (D^i)' K D^i, symmetrized."""
    n = snapshot.A.shape[0]
    K = np.asarray(K, dtype=float)
    _check_square("K", K, n)
    out = snapshot.N.copy()
    for Di in snapshot.D:
        out = out + Di.T @ K @ Di
    return sym(out)


def eval_M(snapshot: CoefficientSnapshot, K: np.ndarray, L=None) -> np.ndarray:
    """Mixing term K B + sum_i (C^i)' K D^i + sum_i L^i D^i."""
    n = snapshot.A.shape[0]
    K = np.asarray(K, dtype=float)
    _check_square("K", K, n)
    out = K @ snapshot.B
    for Ci, Di in zip(snapshot.C, snapshot.D):
        out = out + Ci.T @ K @ Di
    if L is not None:
        for Li, Di in zip(_as_L_list(L, n, len(snapshot.D)), snapshot.D):
            out = out + Li @ Di
    return out


def _as_L_list(L, n: int, d: int) -> list[np.ndarray]:
    if L is None:
        return [np.zeros((n, n))] * d
    arrs = [np.asarray(Li, dtype=float) for Li in L]
    if len(arrs) != d:
        raise DimensionError(f"expected {d} martingale density matrices, got {len(arrs)}")
    for Li in arrs:
        _check_square("L", Li, n)
    return arrs


def min_weight_eig(snapshot: CoefficientSnapshot, K: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(eval_N(snapshot, K)).min())


def solve_weight(NK: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve weight(K) @ X = rhs via a symmetric factorization, guarding singularity."""
    eigmin = float(np.linalg.eigvalsh(NK).min())
    if eigmin <= SINGULARITY_EIG:
        raise SingularWeightError(eigmin)
    try:
        cho = np.linalg.cholesky(NK)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded by eig check
        raise SingularWeightError(eigmin, f"cholesky failed: {exc}") from exc
    y = np.linalg.solve(cho, rhs)
    return np.linalg.solve(cho.T, y)


def eval_G(snapshot: CoefficientSnapshot, K, L=None) -> np.ndarray:
    """Riccati generator G(t, K, L), exactly symmetric.

    ``K`` may be a matrix (with ``L`` a list of matrices or None) or a
    RiccatiPoint carrying both.
    """
    if isinstance(K, RiccatiPoint):
        K, L = K.K, K.L
    n = snapshot.A.shape[0]
    K = np.asarray(K, dtype=float)
    _check_square("K", K, n)
    Ls = _as_L_list(L, n, len(snapshot.D))
    out = snapshot.A.T @ K + K @ snapshot.A + snapshot.Q
    for Ci, Li in zip(snapshot.C, Ls):
        out = out + Ci.T @ K @ Ci + Ci.T @ Li + Li @ Ci
    M_ = eval_M(snapshot, K, Ls)
    NK = eval_N(snapshot, K)
    out = out - M_ @ solve_weight(NK, M_.T)
    return sym(out)


def feedback_gain(snapshot: CoefficientSnapshot, K, L=None) -> np.ndarray:
    """Optimal gain: u = -gain x. Reduces to N^{-1} B' K when C = D = L = 0."""
    if isinstance(K, RiccatiPoint):
        K, L = K.K, K.L
    M_ = eval_M(snapshot, K, L)
    NK = eval_N(snapshot, K)
    return solve_weight(NK, M_.T)


def hamiltonian(snapshot: CoefficientSnapshot, x: np.ndarray, v: np.ndarray,
                K: np.ndarray, L=None) -> float:
    """Drift of the value field along a constant control v, state x.

    This is the quantity whose minimum over v, plus the running cost
    l(t,x,v) = <Qx,x> + <Nv,v>, equals <G(t,K,L)x, x>; the minimizer is
    v = -gain(K,L) x.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    n = snapshot.A.shape[0]
    K = np.asarray(K, dtype=float)
    Ls = _as_L_list(L, n, len(snapshot.D))
    drift = snapshot.A @ x + snapshot.B @ v
    total = 2.0 * float(x @ K @ drift)
    for Ci, Di, Li in zip(snapshot.C, snapshot.D, Ls):
        diff = Ci @ x + Di @ v
        total += 2.0 * float(x @ Li @ diff)
        total += float(diff @ K @ diff)
    return total


def running_cost(snapshot: CoefficientSnapshot, x: np.ndarray, v: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(x @ snapshot.Q @ x + v @ snapshot.N @ v)
