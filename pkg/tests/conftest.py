import numpy as np
import pytest

from lactocryst.integrator import IntegratorOptions, integrate
from lactocryst.kinetics import KineticParams
from lactocryst.model import CrystallizerModel, PhysicalConstants, table3_state
from lactocryst.policies import KG_PER_H, constant_policy, linear_cooling_policy

# Placeholder activation energy and a growth coefficient scaled to give
# micrometre-per-minute growth; the same values sit in configs/reference.toml.
E_ACT = 150000.0
K_G_TRAJECTORY = 1e-7

Q_POLICY = 0.0056 * KG_PER_H
TF = 11000.0


@pytest.fixture(scope="session")
def constants():
    return PhysicalConstants()


@pytest.fixture(scope="session")
def formula_params():
    """Printed constants (including k_g = 1e11) for single-formula checks."""
    return KineticParams(E_act=E_ACT)


@pytest.fixture(scope="session")
def params():
    return KineticParams(E_act=E_ACT, k_g=K_G_TRAJECTORY)


@pytest.fixture(scope="session")
def model(params, constants):
    return CrystallizerModel(params, constants)


@pytest.fixture(scope="session")
def s0(constants):
    return table3_state(constants)


@pytest.fixture(scope="session")
def policy1():
    return constant_policy(15.0, Q_POLICY, TF)


@pytest.fixture(scope="session")
def policy2():
    return linear_cooling_policy(15.0, 0.0, Q_POLICY, TF)


@pytest.fixture(scope="session")
def policy1_traj(model, s0, policy1):
    return integrate(model, s0, policy1, opts=IntegratorOptions(rel_tol=1e-8,
                                                                dense_output_dt=100.0))


def rel(a, b):
    return np.abs(np.asarray(a) - np.asarray(b)) / np.abs(np.asarray(b))



# (sort key, line) per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
