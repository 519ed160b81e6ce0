import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lactocryst.exceptions import ModelDomainError
from lactocryst.kinetics import KineticParams
from lactocryst.model import (
    TABLE3_MOMENTS,
    ControlInput,
    CrystallizerModel,
    PhysicalConstants,
    ProcessState,
    c_alpha_rhs,
    c_beta_rhs,
    conservation_residuals,
    contact_surface,
    crystal_mass_rhs,
    energy_rhs,
    full_rhs,
    heat_capacity,
    moment_rhs,
    quality_metrics,
    slurry_volume,
    table3_state,
    water_rhs,
)

from conftest import Q_POLICY

V_TABLE3 = 0.001498962717409953
M_CRY_TABLE3 = 0.0984630587757354

# Derivative at the Table 3 state under Policy 1 controls (E_act = 150 kJ/mol,
# k_g = 1e-7), from a separate scalar re-derivation of every balance.
RHS_TABLE3_POLICY1 = np.array([
    -19202.625772472562, 56.231287766812706, 0.02028256051416909, 5.77306033807254e-06,
    1.5344886260502017e-09, 3.982819969549077e-13, 1.1987637745326517e-06,
    -6.092212809716629e-06, -9.53501491311214e-07, 7.152825705268699e-06,
    -0.05081945698939445, -0.0095,
])


def test_volume_table3(s0, constants):
    V = slurry_volume(s0, constants)
    assert V == pytest.approx(V_TABLE3, rel=1e-13)
    assert abs(V - constants.V0) / constants.V0 < 5e-3


def test_volume_pure_water(constants):
    s = ProcessState((0.0,) * 6, 0.7, 0.0, 0.0, 0.0, 25.0, 25.0)
    assert slurry_volume(s, constants) == pytest.approx(0.7 / 1000.0, rel=1e-15)


def test_volume_pole(constants):
    s = ProcessState((1.0, 1.0, 1.0, 1.0 / constants.k_v, 1.0, 1.0), 0.9, 0.3, 0.5, 0.0, 50, 50)
    with pytest.raises(ModelDomainError):
        slurry_volume(s, constants)


def test_contact_surface(constants):
    assert contact_surface(0.0, constants) == 0.0
    assert contact_surface(0.0015, constants) == pytest.approx(0.06, rel=1e-14)
    assert contact_surface(2 * 0.0013, constants) == 2 * contact_surface(0.0013, constants)


def test_moment_rhs_cases():
    mu = np.array(TABLE3_MOMENTS)
    assert np.all(moment_rhs(mu, 0.0, 0.0, 0.0) == 0.0)
    G = 3e-9
    assert moment_rhs(mu, G, 0.0, 0.0)[1] == G * mu[0]
    r = 1e-4
    d = moment_rhs(mu, 0.0, 0.0, r)
    assert np.allclose(d / mu, -r, rtol=1e-15, atol=0)


def test_water_and_crystal_mass(constants):
    assert water_rhs(409.0, 0.0, 0.0015, 0.0, constants) == 0.0
    assert 1 / constants.R_molar_ratio - 1 == pytest.approx(-0.04988, abs=1e-5)
    assert water_rhs(409.0, 0.0, 0.0015, Q_POLICY, constants) == pytest.approx(1.556e-6, rel=1e-3)
    dm = crystal_mass_rhs(409.2491, 4.8e-9, 0.0015, constants)
    first = water_rhs(409.2491, 4.8e-9, 0.0015, 0.0, constants)
    assert first == pytest.approx((1 / constants.R_molar_ratio - 1) * dm, rel=1e-15)
    assert crystal_mass_rhs(409.0, 0.0, 0.0015, constants) == 0.0


def test_seed_mass(s0, constants):
    c = constants
    assert c.k_v * c.V0 * c.rho_cry * 0.0812 == pytest.approx(0.098531195238, rel=1e-10)
    assert s0.m_cry == pytest.approx(M_CRY_TABLE3, rel=1e-13)


def test_concentration_rhs_trivial_cases(constants, formula_params):
    c = constants
    k1, k2 = 2e-4 * 1.451, 2e-4
    # mutarotation equilibrium: k1 ca = k2 cb
    ca = 0.3
    cb = k1 * ca / k2
    assert c_alpha_rhs(0.9, ca, cb, 0.0, 0.0, k1, k2, c) == pytest.approx(0.0, abs=1e-18)
    assert c_beta_rhs(0.9, ca, cb, 0.0, 0.0, k1, k2, c) == pytest.approx(0.0, abs=1e-18)
    ca_f, cb_f = c.feed_fractions
    assert c_alpha_rhs(0.9, ca_f, 0.4, 0.0, 1e-5, 0.0, 0.0, c) == 0.0
    assert c_beta_rhs(0.9, 0.3, cb_f, 0.0, 1e-5, 0.0, 0.0, c) == 0.0
    assert c_beta_rhs(0.9, 0.5, 0.3, 0.0, 0.0, k1, k2, c) > 0
    with pytest.raises(ModelDomainError):
        c_alpha_rhs(0.0, 0.3, 0.4, 0.0, 0.0, k1, k2, c)
    with pytest.raises(ModelDomainError):
        c_beta_rhs(-1.0, 0.3, 0.4, 0.0, 0.0, k1, k2, c)


def test_feed_swap_flag():
    c = PhysicalConstants(swap_feed_fractions=True)
    assert c.feed_fractions == (0.359, 0.521)
    assert PhysicalConstants().feed_fractions == (0.521, 0.359)


def test_heat_capacity_table3(s0, constants):
    cap = heat_capacity(s0.m_H2O, s0.c_alpha, s0.c_beta, s0.m_cry, constants)
    by_hand = 0.92 * 4180.5 + (0.92 * 0.359 + 0.92 * 0.521) * 1193 + M_CRY_TABLE3 * 1251
    assert cap == pytest.approx(by_hand, rel=1e-14)
    assert round(cap) == 4935


def test_energy_rhs_cases(constants):
    c = constants
    _, dTj = energy_rhs(0.92, 0.359, 0.521, 0.1, 70.0, 20.0, 0, 0, 0, 0, 15.0, 0.0, 0.06, c,
                        0.359, 0.521)
    assert dTj == pytest.approx(-0.0095, rel=1e-14)
    dT, dTj = energy_rhs(0.92, 0.359, 0.521, 0.1, c.T_ref, c.T_ref, 0, 0, 0, 0, c.T_ref, 0.0,
                         0.06, c, 0.359, 0.521)
    assert dT == 0.0 and dTj == 0.0


def test_p2_flag_changes_only_last_term(s0, params):
    u = ControlInput(15.0, Q_POLICY)
    a = full_rhs(s0, u, PhysicalConstants(), params)
    b = full_rhs(s0, u, PhysicalConstants(p2_use_cp_cry=True), params)
    assert np.array_equal(a[:10], b[:10]) and a[10] != b[10]


def test_full_rhs_regression(s0, constants, params):
    d = full_rhs(s0, ControlInput(15.0, Q_POLICY), constants, params)
    np.testing.assert_allclose(d, RHS_TABLE3_POLICY1, rtol=1e-12, atol=0)


def test_full_rhs_deterministic(s0, constants, params):
    u = ControlInput(15.0, Q_POLICY)
    a = full_rhs(s0, u, constants, params)
    b = full_rhs(s0, u, constants, params)
    assert a.tobytes() == b.tobytes()


def test_full_rhs_equilibrium(constants):
    """Saturated liquid at mutarotation equilibrium, isothermal, no feed."""
    p = KineticParams(E_act=150000.0, k_g=1e-7)
    c = constants
    T = c.T_ref
    from lactocryst.kinetics import equilibrium_saturation, mutarotation_ratio
    ca = equilibrium_saturation(T)
    cb = mutarotation_ratio(T) * ca
    s = ProcessState(TABLE3_MOMENTS, 0.92, ca, cb, 0.1, T, T)
    d = full_rhs(s, ControlInput(T, 0.0), c, p)
    assert np.max(np.abs(d)) < 1e-15 * max(TABLE3_MOMENTS)


def test_dilution_only(constants):
    """No kinetics (far undersaturated, frozen mutarotation), only feed."""
    p = KineticParams(E_act=1e12, k_g=1e-7)
    s = ProcessState(TABLE3_MOMENTS, 0.92, 0.05, 0.5, 0.1, 30.0, 30.0)
    d = full_rhs(s, ControlInput(30.0, 1e-5), constants, p)
    ratios = d[:6] / np.array(TABLE3_MOMENTS)
    assert np.all(ratios < 0)
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-12)


def test_quality_metrics_table3():
    d43, cv = quality_metrics(np.array(TABLE3_MOMENTS))
    assert d43 == pytest.approx(2.070443349753695e-4, rel=1e-13)
    assert cv == pytest.approx(0.0369367834821539, rel=1e-12)
    assert abs(d43 - 2.0704e-4) / 2.0704e-4 < 1e-4


def test_quality_metrics_monodisperse():
    L = 1.3e-4
    mu = 7.0 * L ** np.arange(6)
    d43, cv = quality_metrics(mu)
    assert d43 == pytest.approx(L, rel=1e-14)
    assert abs(cv) < 1e-14


def test_quality_metrics_domain():
    with pytest.raises(ModelDomainError):
        quality_metrics(np.array([1.0, 1.0, 1.0, 0.0, 1.0, 1.0]))


def test_state_invariants(s0, constants):
    assert s0.violations(constants) == []
    bad = s0.replace(mu=(1.0, 10.0, 1.0, 0.0812, 1.6812e-5, 3.6094e-9))
    assert "hankel_012" in bad.violations(constants)


def test_conservation_policy1(policy1_traj, constants):
    lac, wat = conservation_residuals(policy1_traj, constants)
    assert np.max(np.abs(lac)) < 1e-6
    assert np.max(np.abs(wat)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.floats(0.25, 0.45), st.floats(0.3, 0.6), st.floats(5.0, 70.0), st.floats(0.0, 40.0),
       st.floats(0.0, 2.8e-5))
def test_dilution_corrected_monotonicity(ca, cb, T, T_sp, q):
    """d(V mu_k)/dt >= 0 and dm_cry >= 0 with the clamp active."""
    m = CrystallizerModel(KineticParams(E_act=150000.0, k_g=1e-7), PhysicalConstants())
    s = table3_state(m.constants, c_alpha=ca, c_beta=cb, T=T)
    y = s.to_array()
    dy, aux = m.rates(y, T_sp, q)
    r = aux["dV"] / aux["V"]
    assert np.all(dy[:6] + r * y[:6] >= -1e-12 * np.abs(r * y[:6]))
    assert dy[9] >= 0


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-5, 1e-3), st.floats(0.05, 1.0))
def test_cauchy_schwarz_of_lognormal_moments(median, sigma):
    k = np.arange(6)
    mu = np.exp(k * np.log(median) + 0.5 * k**2 * sigma**2) * 1e10
    s = ProcessState(tuple(mu), 0.9, 0.3, 0.5, 0.0, 50.0, 50.0)
    assert "hankel_012" not in s.violations(PhysicalConstants())
    assert "hankel_345" not in s.violations(PhysicalConstants())
