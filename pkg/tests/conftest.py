import sys
from pathlib import Path

import numpy as np
import pytest

from slqlab import load_instance, solve_backward, solve_field, stability_steps
from slqlab.model import CoefficientProcess, Dimensions, ProblemSpec

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def scalar_spec(a=0.0, b=1.0, c=0.0, dd=0.0, q=1.0, nn=1.0, mm=0.0,
                T=1.0, delta=None) -> ProblemSpec:
    """Scalar constant-coefficient problem (the workhorse of the tests)."""
    const = CoefficientProcess.constant
    return ProblemSpec(
        dims=Dimensions(1, 1, 1), T=T,
        A=const([[a]]), B=const([[b]]),
        C=(const([[c]]),), D=(const([[dd]]),),
        Q=const([[q]]), N=const([[nn]]), M=const([[mm]]),
        delta=delta if delta is not None else max(nn, 1e-6),
    )


@pytest.fixture(scope="session")
def tanh_instance():
    return load_instance(CONFIG_DIR / "tanh.json")


@pytest.fixture(scope="session")
def tanh_path(tanh_instance):
    return solve_backward(tanh_instance.spec, 2000)


@pytest.fixture(scope="session")
def det2x2_instance():
    return load_instance(CONFIG_DIR / "det2x2.json")


@pytest.fixture(scope="session")
def det2x2_path(det2x2_instance):
    return solve_backward(det2x2_instance.spec, 2000)


@pytest.fixture(scope="session")
def multnoise_instance():
    return load_instance(CONFIG_DIR / "multnoise.json")


@pytest.fixture(scope="session")
def multnoise_path(multnoise_instance):
    return solve_backward(multnoise_instance.spec, 2000)


@pytest.fixture(scope="session")
def p2_instance():
    return load_instance(CONFIG_DIR / "p2.json")


@pytest.fixture(scope="session")
def p2_field(p2_instance):
    spec = p2_instance.spec
    return solve_field(spec, stability_steps(spec.T, 201, 5.0), 201, 5.0)


@pytest.fixture(scope="session")
def flow_instance():
    return load_instance(CONFIG_DIR / "flow.json")
