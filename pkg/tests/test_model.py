import json

import numpy as np
import pytest

from slqlab import (CoefficientMode, CoefficientProcess, ConfigurationError, Dimensions,
                    DomainError, ProblemSpec, evaluate_coefficients, load_instance, validate)
from slqlab.model import compile_expression, spec_from_dict

from conftest import CONFIG_DIR, scalar_spec


def test_valid_scalar_spec_has_empty_report():
    report = validate(scalar_spec(a=0.0, b=1.0, q=1.0, nn=1.0, mm=0.0))
    assert report.ok
    assert report.violations == ()


def test_zero_N_reports_not_uniformly_positive():
    report = validate(scalar_spec(nn=0.0, delta=1.0))
    assert not report.ok
    assert any("N not uniformly positive" in v.message for v in report.violations)
    assert any(v.code == "A2-positivity" for v in report.violations)


def test_indefinite_Q_reports_not_psd():
    const = CoefficientProcess.constant
    spec = ProblemSpec(
        dims=Dimensions(2, 1, 1), T=1.0,
        A=const(np.zeros((2, 2))), B=const([[1.0], [0.0]]),
        C=(const(np.zeros((2, 2))),), D=(const(np.zeros((2, 1))),),
        Q=const([[1.0, 2.0], [2.0, 1.0]]),  # eigenvalues 3, -1
        N=const([[1.0]]), M=const(np.zeros((2, 2))), delta=1.0,
    )
    report = validate(spec)
    assert any("Q not positive semidefinite" in v.message for v in report.violations)


def test_validate_is_pure_and_idempotent():
    spec = scalar_spec(nn=0.0, delta=1.0)
    r1 = validate(spec)
    r2 = validate(spec)
    assert [str(v) for v in r1.violations] == [str(v) for v in r2.violations]


def test_bound_violation_detected():
    proc = CoefficientProcess.brownian(
        lambda t, w: np.full((1, 1), 2.0 * np.tanh(w)), (1, 1), bound=0.5,
    )
    spec = scalar_spec()
    spec = ProblemSpec(dims=spec.dims, T=spec.T, A=proc, B=spec.B, C=spec.C, D=spec.D,
                       Q=spec.Q, N=spec.N, M=spec.M, delta=spec.delta)
    report = validate(spec)
    assert any(v.code == "A1-bound" and "A exceeds declared bound" in v.message
               for v in report.violations)


def test_evaluate_constant_mode_returns_stored_matrices():
    spec = scalar_spec(a=0.25, b=1.5, c=0.3, dd=0.1, q=2.0, nn=0.5, mm=0.75)
    for t, w in [(0.0, 0.0), (0.3, -2.0), (1.0, 4.0)]:
        snap = evaluate_coefficients(spec, t, w)
        assert snap.A[0, 0] == 0.25
        assert snap.B[0, 0] == 1.5
        assert snap.C[0][0, 0] == 0.3
        assert snap.D[0][0, 0] == 0.1
        assert snap.Q[0, 0] == 2.0
        assert snap.N[0, 0] == 0.5
    assert spec.terminal_weight()[0, 0] == 0.75


def test_evaluate_brownian_functional_at_zero():
    a0, a1 = 0.4, 0.2
    proc = CoefficientProcess.brownian(
        lambda t, w: np.full((1, 1), a0 + a1 * np.tanh(w)), (1, 1), bound=a0 + a1,
    )
    assert proc(0.3, 0.0)[0, 0] == pytest.approx(a0, abs=0.0)


def test_evaluate_time_varying_identity_scaling():
    proc = CoefficientProcess.time_varying(lambda t: t * np.eye(2), (2, 2), bound=1.0)
    mat = proc(0.5)
    assert np.allclose(mat, 0.5 * np.eye(2))


def test_evaluate_outside_horizon_raises():
    spec = scalar_spec()
    with pytest.raises(DomainError):
        evaluate_coefficients(spec, 1.5, 0.0)
    with pytest.raises(DomainError):
        evaluate_coefficients(spec, -0.1, 0.0)
    with pytest.raises(DomainError):
        evaluate_coefficients(spec, 0.5, float("nan"))


def test_coefficients_deterministic_and_bounded_on_lattice(p2_instance):
    spec = p2_instance.spec
    ts = np.linspace(0.0, spec.T, 101)
    ws = np.linspace(-5.0, 5.0, 101)
    for name, proc in spec.coefficient_items():
        if proc.bound is None:
            continue
        for t in ts[::10]:
            vals = proc.eval_batch(float(t), ws)
            again = proc.eval_batch(float(t), ws)
            assert np.array_equal(vals, again)
            assert np.max(np.abs(vals)) <= proc.bound + 1e-10


# --- expression interpreter -------------------------------------------------

def test_expression_vocabulary():
    expr = {"add": [0.5, {"mul": [2.0, {"tanh": "w"}]}, {"mul": ["t", {"sin": "w"}]}]}
    fn = compile_expression(expr)
    t, w = 0.25, 1.3
    assert fn(t, w) == pytest.approx(0.5 + 2.0 * np.tanh(w) + t * np.sin(w))
    ws = np.linspace(-2, 2, 7)
    assert np.allclose(fn(t, ws), 0.5 + 2.0 * np.tanh(ws) + t * np.sin(ws))


def test_expression_rejects_unknown_operator():
    with pytest.raises(ConfigurationError):
        compile_expression({"exp": "w"})


def test_time_mode_rejects_w():
    with pytest.raises(ConfigurationError):
        CoefficientProcess.from_config({"mode": "time", "data": [["w"]]}, (1, 1))


# --- config loading ---------------------------------------------------------

def test_load_shipped_instances_all_valid():
    for name in ("tanh", "det2x2", "multnoise", "p2", "flow"):
        inst = load_instance(CONFIG_DIR / f"{name}.json")
        assert validate(inst.spec).ok, name


def test_load_bad_instances_flagged():
    assert not validate(load_instance(CONFIG_DIR / "bad_N.json").spec).ok
    assert not validate(load_instance(CONFIG_DIR / "bad_Q.json").spec).ok


def test_missing_key_raises_configuration_error(tmp_path):
    cfg = json.loads((CONFIG_DIR / "tanh.json").read_text())
    del cfg["Q"]
    path = tmp_path / "broken.json"
    path.write_text(json.dumps(cfg))
    with pytest.raises(ConfigurationError):
        load_instance(path)


def test_malformed_json_raises_configuration_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_instance(path)


def test_brownian_mode_requires_scalar_driver():
    cfg = json.loads((CONFIG_DIR / "p2.json").read_text())
    cfg["dims"]["d"] = 2
    cfg["C"].append({"mode": "constant", "data": [[0.0]]})
    cfg["D"].append({"mode": "constant", "data": [[0.0]]})
    with pytest.raises(ConfigurationError):
        spec_from_dict(cfg)


def test_dimensions_must_be_positive():
    with pytest.raises(Exception):
        Dimensions(0, 1, 1)
    with pytest.raises(Exception):
        Dimensions(1, -1, 1)
