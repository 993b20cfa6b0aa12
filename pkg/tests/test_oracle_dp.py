import math

import numpy as np
import pytest

from slqlab import ConfigurationError, TreeMode, replay_policy, solve_tree, tree_policy_value

from conftest import scalar_spec


def test_zero_problem_gives_zero_tree():
    tree = solve_tree(scalar_spec(q=0.0, mm=0.0), 50)
    for block in tree.node_values:
        assert np.max(np.abs(block)) == 0.0


def test_tanh_instance_converges_to_closed_form():
    tree = solve_tree(scalar_spec(), 200)
    assert abs(tree.root[0, 0] - math.tanh(1.0)) / math.tanh(1.0) <= 0.01


def test_all_nodes_symmetric_psd(p2_instance):
    tree = solve_tree(p2_instance.spec, 60)
    for block in tree.node_values:
        assert np.max(np.abs(block - np.swapaxes(block, -1, -2))) == 0.0
        assert np.linalg.eigvalsh(block).min() >= -1e-10


def test_replayed_optimal_policy_reproduces_root():
    spec = scalar_spec(a=0.1, c=0.3, dd=0.2, mm=0.5)
    tree = solve_tree(spec, 40)
    value = tree_policy_value(spec, 40, replay_policy(tree))
    assert np.allclose(value, tree.root, rtol=1e-12, atol=1e-14)


def test_zero_policy_value_matches_constant_state_cost():
    spec = scalar_spec()  # zero policy keeps X = 1, so the cost is Q * T = 1
    value = tree_policy_value(spec, 200, lambda k, idx: np.zeros((1, 1)))
    assert abs(value[0, 0] - 1.0) <= 0.01


def test_dominance_over_random_node_policies():
    rng = np.random.default_rng(14)
    for name, spec in [("tanh", scalar_spec()),
                       ("noisy", scalar_spec(a=0.1, c=0.3, dd=0.2, mm=0.5))]:
        S = 12
        tree = solve_tree(spec, S)
        for _ in range(100):
            scale = rng.uniform(-2.0, 2.0)
            shift = rng.uniform(-1.0, 1.0)

            def policy(k, idx, scale=scale, shift=shift):
                return scale * tree.gains[k][idx] + shift

            value = tree_policy_value(spec, S, policy)
            assert np.linalg.eigvalsh(value - tree.root).min() >= -1e-12, name


def test_forward_and_reverse_sweeps_bit_identical(p2_instance):
    fwd = solve_tree(p2_instance.spec, 40, node_order="forward")
    rev = solve_tree(p2_instance.spec, 40, node_order="reverse")
    for a, b in zip(fwd.node_values, rev.node_values):
        assert np.array_equal(a, b)
    for a, b in zip(fwd.gains, rev.gains):
        assert np.array_equal(a, b)


def test_recombining_and_path_dependent_agree_for_markovian_coefficients(p2_instance):
    S = 10
    rec = solve_tree(p2_instance.spec, S, TreeMode.RECOMBINING)
    pd = solve_tree(p2_instance.spec, S, TreeMode.PATH_DEPENDENT)
    assert abs(rec.root[0, 0] - pd.root[0, 0]) <= 1e-12
    # per-node check: recombining node j at slice k equals any mask with j bits set
    for k in range(S + 1):
        for j in range(k + 1):
            mask = (1 << j) - 1  # j up-moves first
            assert np.array_equal(rec.node_values[k][j],
                                  pd.node_values[k][mask] if k else pd.node_values[0][0])


def test_genuinely_path_dependent_coefficients():
    """Coefficients reading the first increment's sign break recombination."""
    spec = scalar_spec()
    S = 8
    dt = spec.T / S

    def coeff_fn(t, k, mask):
        first_up = bool(mask & 1) if k >= 1 else False
        a = 0.3 if first_up else -0.3
        snap = spec.snapshot(t)
        return type(snap)(t=snap.t, w=snap.w, A=np.array([[a]]), B=snap.B, C=snap.C,
                          D=snap.D, Q=snap.Q, N=snap.N)

    tree = solve_tree(spec, S, TreeMode.PATH_DEPENDENT, coeff_fn=coeff_fn)
    # value after an up-start differs from a down-start at the same |w| level
    up_node = tree.node_values[1][1]
    down_node = tree.node_values[1][0]
    assert abs(up_node[0, 0] - down_node[0, 0]) > 1e-3
    for block in tree.node_values:
        assert np.linalg.eigvalsh(block).min() >= -1e-10


def test_path_dependent_step_limit():
    with pytest.raises(ConfigurationError):
        solve_tree(scalar_spec(), 17, TreeMode.PATH_DEPENDENT)


def test_requires_scalar_driver():
    from slqlab.model import CoefficientProcess, Dimensions, ProblemSpec

    const = CoefficientProcess.constant
    spec = ProblemSpec(
        dims=Dimensions(1, 1, 2), T=1.0,
        A=const([[0.0]]), B=const([[1.0]]),
        C=(const([[0.0]]), const([[0.0]])),
        D=(const([[0.0]]), const([[0.0]])),
        Q=const([[1.0]]), N=const([[1.0]]), M=const([[0.0]]), delta=1.0,
    )
    with pytest.raises(ConfigurationError):
        solve_tree(spec, 10)


def test_tree_csv_summary(tmp_path):
    tree = solve_tree(scalar_spec(), 20)
    out = tree.to_csv(tmp_path / "tree.csv")
    lines = out.read_text().splitlines()
    assert lines[0] == "k,t,nodes,min_eigenvalue,max_trace,mean_trace,root_K11"
    assert len(lines) == 22
    root_entry = float(lines[1].split(",")[-1])
    assert root_entry == tree.root[0, 0]
