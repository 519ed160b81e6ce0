import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lactocryst.exceptions import ModelDomainError
from lactocryst.kinetics import (
    KineticParams,
    alpha_saturation,
    equilibrium_saturation,
    growth_rate,
    mutarotation_rates,
    mutarotation_ratio,
    nucleation_rate,
    solubility_correction,
)

temps = st.floats(0.0, 70.0)

# Frozen values from a hand evaluation of the formulas (plain floats, no package code).
C_SAT_EQ = {25.0: 0.08549596602505602, 70.0: 0.3169206027568094, 0.0: 0.041329166666666674}
F_70 = 0.09756545868473754
C_SAT_70_0521 = 0.31095465004922257
C_SAT_70_0 = 0.3617862540239708
B_TABLE3 = 1.1799917523016504e-07


def test_e_act_is_mandatory():
    with pytest.raises(TypeError):
        KineticParams()


@pytest.mark.parametrize("field", ["E_act", "k0", "Rg", "B0", "k_b", "k_g"])
def test_params_must_be_positive(field):
    kw = {"E_act": 1.0, field: 0.0}
    with pytest.raises(ValueError):
        KineticParams(**kw)


def test_mutarotation_ratio_examples(formula_params):
    assert mutarotation_ratio(25.0) == pytest.approx(1.5725, abs=1e-15)
    assert mutarotation_ratio(70.0) == pytest.approx(1.451, abs=1e-15)
    k1, k2 = mutarotation_rates(25.0, formula_params)
    assert k1 / k2 == pytest.approx(1.5725, rel=1e-14)


def test_arrhenius_limit():
    k1, k2 = mutarotation_rates(40.0, KineticParams(E_act=1e12))
    assert k1 == 0.0 and k2 == 0.0


def test_k2_value(formula_params):
    expected = 2.25e8 * math.exp(-150000.0 / (18.314 * 298.15))
    assert mutarotation_rates(25.0, formula_params)[1] == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("T", sorted(C_SAT_EQ))
def test_equilibrium_saturation_values(T):
    assert equilibrium_saturation(T) == pytest.approx(C_SAT_EQ[T], rel=1e-13)


def test_equilibrium_saturation_rejects_km_pole():
    with pytest.raises(ModelDomainError):
        equilibrium_saturation(1000.0)


def test_below_absolute_zero(formula_params):
    with pytest.raises(ModelDomainError):
        mutarotation_rates(-300.0, formula_params)


def test_alpha_saturation_values():
    assert solubility_correction(70.0) == pytest.approx(F_70, rel=1e-13)
    assert alpha_saturation(0.521, 70.0) == pytest.approx(C_SAT_70_0521, rel=1e-13)
    assert alpha_saturation(0.0, 70.0) == pytest.approx(C_SAT_70_0, rel=1e-13)
    # the rounded reference values
    assert abs(alpha_saturation(0.521, 70.0) - 0.31093) < 1e-4
    assert abs(alpha_saturation(0.0, 70.0) - 0.36176) < 1e-4


def test_nucleation_table3(formula_params):
    B = nucleation_rate(0.359, 0.521, 70.0, formula_params)
    assert B == pytest.approx(B_TABLE3, rel=1e-12)


def test_growth_table3(formula_params):
    G = growth_rate(0.359, 0.521, 70.0, formula_params)
    assert G == pytest.approx(1e11 * (0.359 - C_SAT_70_0521), rel=1e-12)
    assert abs(G / 1e11 - 0.04807) < 1e-4


@given(temps)
def test_k1_over_k2_is_km(T):
    k1, k2 = mutarotation_rates(T, KineticParams(E_act=150000.0))
    assert k1 / k2 == pytest.approx(mutarotation_ratio(T), rel=1e-14)


@given(temps)
def test_saturation_at_mutarotation_equilibrium(T):
    c_eq = equilibrium_saturation(T)
    assert alpha_saturation(mutarotation_ratio(T) * c_eq, T) == pytest.approx(c_eq, rel=1e-15)


@given(temps, st.floats(0.0, 1.0), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_rates_monotone_in_c_alpha(T, c_beta, d1, d2):
    p = KineticParams(E_act=150000.0)
    c_sat = alpha_saturation(c_beta, T)
    lo, hi = c_sat * (1 + min(d1, d2)), c_sat * (1 + max(d1, d2))
    assert nucleation_rate(hi, c_beta, T, p) >= nucleation_rate(lo, c_beta, T, p)
    assert growth_rate(hi, c_beta, T, p) >= growth_rate(lo, c_beta, T, p)


@given(temps, st.floats(0.0, 1.0), st.floats(1e-6, 0.99))
def test_clamp_undersaturated(T, c_beta, frac):
    p = KineticParams(E_act=150000.0)
    c_sat = alpha_saturation(c_beta, T)
    assert nucleation_rate(c_sat * frac, c_beta, T, p) == 0.0
    assert growth_rate(c_sat * frac, c_beta, T, p) == 0.0
    assert nucleation_rate(c_sat, c_beta, T, p) == 0.0
    assert growth_rate(c_sat, c_beta, T, p) == 0.0


def test_continuity_at_saturation():
    p = KineticParams(E_act=150000.0)
    c_sat = alpha_saturation(0.521, 70.0)
    eps = np.array([1e-3, 1e-5, 1e-7])
    B = nucleation_rate(c_sat * (1 + eps), 0.521, 70.0, p)
    G = growth_rate(c_sat * (1 + eps), 0.521, 70.0, p)
    assert np.all(np.diff(B) <= 0) and B[-1] == 0.0
    assert np.all(np.diff(G) < 0) and G[-1] < 1e-7 * p.k_g


def test_negative_growth_switch():
    p = KineticParams(E_act=150000.0, k_g=1e-7, allow_negative_growth=True)
    assert growth_rate(0.2, 0.521, 70.0, p) < 0


def test_equilibrium_saturation_increasing():
    T = np.linspace(0.0, 70.0, 701)
    assert np.all(np.diff(equilibrium_saturation(T)) > 0)


@settings(max_examples=50)
@given(st.lists(temps, min_size=2, max_size=8))
def test_vectorized_matches_scalar(Ts):
    p = KineticParams(E_act=150000.0, k_g=1e-7)
    T = np.array(Ts)
    vec = growth_rate(0.4, 0.5, T, p)
    assert np.array_equal(vec, [growth_rate(0.4, 0.5, t, p) for t in Ts])
