"""Problem data for the stochastic linear-quadratic control setup.

A problem instance consists of dimensions (n states, m controls, d Brownian
drivers), a horizon T, and the coefficient processes A, B, C^i, D^i of the
controlled linear dynamics together with the cost weights Q, N and the
terminal weight M. Coefficients come in three randomness modes:

* ``constant`` -- a fixed matrix,
* ``time`` -- a deterministic function of t,
* ``brownian`` -- a function of (t, w) where w is the current value of the
  scalar Brownian driver (this mode requires d = 1).

The standing assumptions are uniform boundedness of all coefficients with
Q(t,w) and M positive semidefinite (referred to as A1 below) and uniform
positivity of the control weight N with floor ``delta`` (A2). ``validate``
checks both by sampling on a (t, w) lattice and returns the violations as
data rather than raising.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError

PSD_TOL = 1e-10          # eigenvalue floor for "positive semidefinite"
BOUND_TOL = 1e-10        # slack when comparing against a declared bound
W_SAMPLE_RANGE = (-5.0, 5.0)


class CoefficientMode(Enum):
    CONSTANT = "constant"
    TIME_VARYING = "time"
    BROWNIAN = "brownian"


# ---------------------------------------------------------------------------
# expression mini-language for config files
#
# Grammar (JSON values):  number | "t" | "w" | {"tanh": e} | {"sin": e}
#                         | {"add": [e, ...]} | {"mul": [e, ...]}
# Affine combinations are spelled as add-of-muls.
# ---------------------------------------------------------------------------

def compile_expression(node, allow_w: bool = True) -> Callable:
    """Compile a config expression into a numpy-broadcasting ``f(t, w)``."""
    if isinstance(node, bool):
        raise ConfigurationError(f"boolean is not a valid expression: {node!r}")
    if isinstance(node, (int, float)):
        val = float(node)
        return lambda t, w: val
    if node == "t":
        return lambda t, w: t
    if node == "w":
        if not allow_w:
            raise ConfigurationError("'w' not allowed in a time-varying coefficient")
        return lambda t, w: w
    if isinstance(node, dict) and len(node) == 1:
        op, arg = next(iter(node.items()))
        if op == "tanh":
            inner = compile_expression(arg, allow_w)
            return lambda t, w: np.tanh(inner(t, w))
        if op == "sin":
            inner = compile_expression(arg, allow_w)
            return lambda t, w: np.sin(inner(t, w))
        if op == "add":
            parts = [compile_expression(a, allow_w) for a in arg]
            return lambda t, w: sum(p(t, w) for p in parts)
        if op == "mul":
            parts = [compile_expression(a, allow_w) for a in arg]

            def product(t, w, parts=parts):
                out = parts[0](t, w)
                for p in parts[1:]:
                    out = out * p(t, w)
                return out

            return product
        raise ConfigurationError(f"unknown expression operator {op!r}")
    raise ConfigurationError(f"cannot parse expression node {node!r}")


@dataclass(frozen=True)
class Dimensions:
    """State, control and Brownian dimensions."""

    n: int
    m: int
    d: int

    def __post_init__(self):
        for name in ("n", "m", "d"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise DimensionError(f"dimension {name} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class CoefficientProcess:
    """One matrix-valued coefficient in a fixed randomness mode.

    ``fn(t, w)`` must return the matrix for scalar inputs; for brownian-mode
    processes built from config expressions it also broadcasts over a 1-d
    array of w values. ``bound`` is the declared uniform bound on matrix
    entries (assumption A1); ``None`` means "not declared", in which case
    validation only checks finiteness.
    """

    mode: CoefficientMode
    shape: tuple[int, int]
    fn: Callable = field(repr=False)
    bound: float | None = None

    @staticmethod
    def constant(matrix) -> "CoefficientProcess":
        mat = np.array(matrix, dtype=float)
        if mat.ndim != 2:
            raise DimensionError(f"constant coefficient must be a matrix, got ndim={mat.ndim}")
        mat.setflags(write=False)
        bound = float(np.max(np.abs(mat))) if mat.size else 0.0
        return CoefficientProcess(
            CoefficientMode.CONSTANT, mat.shape, lambda t, w: mat, bound
        )

    @staticmethod
    def time_varying(fn, shape, bound=None) -> "CoefficientProcess":
        return CoefficientProcess(
            CoefficientMode.TIME_VARYING, tuple(shape), lambda t, w: np.asarray(fn(t), dtype=float), bound
        )

    @staticmethod
    def brownian(fn, shape, bound=None) -> "CoefficientProcess":
        return CoefficientProcess(CoefficientMode.BROWNIAN, tuple(shape), fn, bound)

    @staticmethod
    def from_config(obj, shape, allow_brownian=True) -> "CoefficientProcess":
        """Build from a ``{"mode": ..., "data": ..., "bound": ...}`` object."""
        if not isinstance(obj, dict) or "mode" not in obj or "data" not in obj:
            raise ConfigurationError(f"coefficient must be an object with 'mode' and 'data': {obj!r}")
        mode = obj["mode"]
        data = obj["data"]
        bound = obj.get("bound")
        if bound is not None:
            bound = float(bound)
        shape = tuple(shape)
        if mode == "constant":
            proc = CoefficientProcess.constant(data)
            if proc.shape != shape:
                raise DimensionError(f"constant coefficient has shape {proc.shape}, expected {shape}")
            if bound is not None:
                proc = CoefficientProcess(proc.mode, proc.shape, proc.fn, bound)
            return proc
        if mode not in ("time", "brownian"):
            raise ConfigurationError(f"unknown coefficient mode {mode!r}")
        if mode == "brownian" and not allow_brownian:
            raise ConfigurationError("brownian mode not allowed for this slot")
        rows = data
        if len(rows) != shape[0] or any(len(r) != shape[1] for r in rows):
            raise DimensionError(f"coefficient data has wrong shape, expected {shape}")
        allow_w = mode == "brownian"
        entries = [[compile_expression(e, allow_w) for e in row] for row in rows]

        def fn(t, w, entries=entries, shape=shape):
            w_arr = np.asarray(w, dtype=float)
            base = np.zeros(w_arr.shape + shape)
            for i in range(shape[0]):
                for j in range(shape[1]):
                    base[..., i, j] = entries[i][j](t, w_arr)
            return base

        cmode = CoefficientMode.TIME_VARYING if mode == "time" else CoefficientMode.BROWNIAN
        return CoefficientProcess(cmode, shape, fn, bound)

    def __call__(self, t: float, w: float = 0.0) -> np.ndarray:
        out = np.asarray(self.fn(t, w), dtype=float)
        if out.shape != self.shape:
            raise DimensionError(f"coefficient returned shape {out.shape}, expected {self.shape}")
        return out

    def eval_batch(self, t: float, w: np.ndarray) -> np.ndarray:
        """Evaluate at one t and a 1-d array of w values, shape (len(w), r, c)."""
        w = np.asarray(w, dtype=float)
        if self.mode is not CoefficientMode.BROWNIAN:
            return np.broadcast_to(self(t), w.shape + self.shape)
        out = np.asarray(self.fn(t, w), dtype=float)
        if out.shape == w.shape + self.shape:
            return out
        if out.shape == self.shape:  # w-independent functional
            return np.broadcast_to(out, w.shape + self.shape)
        # scalar-only callable: fall back to a loop
        return np.stack([np.asarray(self.fn(t, wi), dtype=float) for wi in w])


@dataclass(frozen=True)
class CoefficientSnapshot:
    """All dynamic and running-cost coefficients frozen at one (t, w)."""

    t: float
    w: float
    A: np.ndarray
    B: np.ndarray
    C: tuple[np.ndarray, ...]
    D: tuple[np.ndarray, ...]
    Q: np.ndarray
    N: np.ndarray


@dataclass(frozen=True)
class ProblemSpec:
    """Full problem instance: dimensions, horizon and coefficient processes.

    ``delta`` is the declared uniform positivity floor of N (assumption A2).
    ``M`` is the terminal weight, evaluated only at t = T.
    """

    dims: Dimensions
    T: float
    A: CoefficientProcess
    B: CoefficientProcess
    C: tuple[CoefficientProcess, ...]
    D: tuple[CoefficientProcess, ...]
    Q: CoefficientProcess
    N: CoefficientProcess
    M: CoefficientProcess
    delta: float

    def __post_init__(self):
        n, m, d = self.dims.n, self.dims.m, self.dims.d
        if self.T <= 0:
            raise ConfigurationError(f"horizon T must be positive, got {self.T}")
        if self.delta <= 0:
            raise ConfigurationError(f"positivity floor delta must be positive, got {self.delta}")
        object.__setattr__(self, "C", tuple(self.C))
        object.__setattr__(self, "D", tuple(self.D))
        if len(self.C) != d or len(self.D) != d:
            raise DimensionError(f"need d={d} diffusion coefficients, got {len(self.C)} C and {len(self.D)} D")
        expected = {
            "A": (self.A, (n, n)), "B": (self.B, (n, m)),
            "Q": (self.Q, (n, n)), "N": (self.N, (m, m)), "M": (self.M, (n, n)),
        }
        for i, (c, dd) in enumerate(zip(self.C, self.D)):
            expected[f"C{i}"] = (c, (n, n))
            expected[f"D{i}"] = (d_shape := dd, (n, m))
        for name, (proc, shape) in expected.items():
            if proc.shape != tuple(shape):
                raise DimensionError(f"{name} has shape {proc.shape}, expected {shape}")
        if self.has_random_coefficients and d != 1:
            raise ConfigurationError("brownian-mode coefficients require d = 1")

    @property
    def has_random_coefficients(self) -> bool:
        procs = (self.A, self.B, *self.C, *self.D, self.Q, self.N, self.M)
        return any(p.mode is CoefficientMode.BROWNIAN for p in procs)

    @property
    def is_deterministic(self) -> bool:
        """True when all coefficients are constant or time-varying."""
        return not self.has_random_coefficients

    def snapshot(self, t: float, w: float = 0.0) -> CoefficientSnapshot:
        return evaluate_coefficients(self, t, w)

    def terminal_weight(self, w: float = 0.0) -> np.ndarray:
        return self.M(self.T, w)

    def coefficient_items(self):
        yield "A", self.A
        yield "B", self.B
        for i, c in enumerate(self.C):
            yield f"C{i + 1}", c
        for i, dproc in enumerate(self.D):
            yield f"D{i + 1}", dproc
        yield "Q", self.Q
        yield "N", self.N
        yield "M", self.M


@dataclass(frozen=True)
class Violation:
    """One violated standing assumption, with the sample point that broke it."""

    code: str          # "A1-shape" | "A1-bound" | "A1-psd" | "A2-positivity" | "A1-finite"
    message: str
    t: float
    w: float

    def __str__(self):
        return f"[{self.code}] {self.message} at (t={self.t:g}, w={self.w:g})"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        if self.ok:
            return "valid: all standing assumptions hold on the sample lattice"
        return "\n".join(str(v) for v in self.violations)


def evaluate_coefficients(spec: ProblemSpec, t: float, w: float = 0.0) -> CoefficientSnapshot:
    """All matrices A, B, C, D, Q, N at one (t, w). Deterministic in (t, w)."""
    if not 0.0 <= t <= spec.T:
        raise DomainError(f"t={t} outside [0, {spec.T}]")
    if not np.isfinite(w):
        raise DomainError(f"w must be finite, got {w}")
    return CoefficientSnapshot(
        t=float(t), w=float(w),
        A=spec.A(t, w), B=spec.B(t, w),
        C=tuple(c(t, w) for c in spec.C),
        D=tuple(dd(t, w) for dd in spec.D),
        Q=spec.Q(t, w), N=spec.N(t, w),
    )


def _min_eig(mat: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (mat + mat.T)).min())


def validate(spec: ProblemSpec, t_points: int = 101, w_points: int = 101) -> ValidationReport:
    """Check assumptions A1 and A2 by sampling; violations are data, not errors.

    The lattice is ``t_points`` times over [0, T] crossed with ``w_points``
    values of w over [-5, 5] (w only matters for brownian-mode coefficients).
    """
    out: list[Violation] = []
    ts = np.linspace(0.0, spec.T, t_points)
    ws = np.linspace(*W_SAMPLE_RANGE, w_points)

    def sample_points(proc: CoefficientProcess):
        if proc.mode is CoefficientMode.CONSTANT:
            return [(0.0, 0.0)]
        if proc.mode is CoefficientMode.TIME_VARYING:
            return [(float(t), 0.0) for t in ts]
        return [(float(t), float(w)) for t in ts for w in ws]

    def record(code, msg, t, w):
        out.append(Violation(code, msg, t, w))

    for name, proc in spec.coefficient_items():
        worst_bound = None
        for t, w in sample_points(proc):
            if name == "M":
                t = spec.T  # terminal slot: only the T slice matters
            mat = proc(t, w)
            if not np.all(np.isfinite(mat)):
                record("A1-finite", f"{name} evaluates to a non-finite matrix", t, w)
                break
            if proc.bound is not None:
                peak = float(np.max(np.abs(mat)))
                if peak > proc.bound + BOUND_TOL and (worst_bound is None or peak > worst_bound[0]):
                    worst_bound = (peak, t, w)
            if name == "Q" and _min_eig(mat) < -PSD_TOL:
                record("A1-psd", "Q not positive semidefinite", t, w)
                break
            if name == "M" and _min_eig(mat) < -PSD_TOL:
                record("A1-psd", "M not positive semidefinite", t, w)
                break
            if name == "N":
                lo = _min_eig(mat)
                if lo < spec.delta - PSD_TOL:
                    record(
                        "A2-positivity",
                        f"N not uniformly positive: min eigenvalue {lo:.6g} < delta={spec.delta:g}",
                        t, w,
                    )
                    break
        if worst_bound is not None:
            peak, t, w = worst_bound
            record("A1-bound", f"{name} exceeds declared bound {proc.bound:g}: peak |entry| {peak:.6g}", t, w)

    return ValidationReport(tuple(out))


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemInstance:
    """A spec plus the verification metadata shipped alongside it.

    ``x0`` is the default initial state for simulation-based checks and
    ``c_bias`` maps check names ("value_match", "completion", "dpp") to
    frozen time-discretization bias constants: the allowance used by the
    statistical verifiers is ``c_bias * dt`` on top of the 3-sigma band.
    """

    spec: ProblemSpec
    name: str
    x0: np.ndarray
    c_bias: dict
    source: str | None = None


def spec_from_dict(cfg: dict) -> ProblemSpec:
    try:
        dims_obj = cfg["dims"]
        dims = Dimensions(int(dims_obj["n"]), int(dims_obj["m"]), int(dims_obj["d"]))
        n, m, d = dims.n, dims.m, dims.d
        C_list = cfg["C"]
        D_list = cfg["D"]
        if not isinstance(C_list, list) or not isinstance(D_list, list):
            raise ConfigurationError("C and D must be lists of coefficient objects")
        return ProblemSpec(
            dims=dims,
            T=float(cfg["T"]),
            A=CoefficientProcess.from_config(cfg["A"], (n, n)),
            B=CoefficientProcess.from_config(cfg["B"], (n, m)),
            C=tuple(CoefficientProcess.from_config(c, (n, n)) for c in C_list),
            D=tuple(CoefficientProcess.from_config(dd, (n, m)) for dd in D_list),
            Q=CoefficientProcess.from_config(cfg["Q"], (n, n)),
            N=CoefficientProcess.from_config(cfg["N"], (m, m)),
            M=CoefficientProcess.from_config(cfg["M"], (n, n)),
            delta=float(cfg["delta"]),
        )
    except KeyError as exc:
        raise ConfigurationError(f"config missing required key: {exc}") from exc


def load_instance(path) -> ProblemInstance:
    """Load a problem instance from a JSON config file."""
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    spec = spec_from_dict(cfg)
    x0 = np.array(cfg.get("x0", [1.0] * spec.dims.n), dtype=float)
    if x0.shape != (spec.dims.n,):
        raise ConfigurationError(f"x0 has shape {x0.shape}, expected ({spec.dims.n},)")
    return ProblemInstance(
        spec=spec,
        name=str(cfg.get("name", path.stem)),
        x0=x0,
        c_bias=dict(cfg.get("c_bias", {})),
        source=str(path),
    )
