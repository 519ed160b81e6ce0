"""Rate laws for alpha-lactose crystallization.

Every function accepts Python floats or numpy arrays (broadcasting), so the same
code drives single simulations and batched finite-difference sweeps.
Temperatures are in degrees Celsius, concentrations in kg lactose per kg water.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lactocryst.exceptions import ModelDomainError

KELVIN = 273.15
# s = c_alpha / c_sat below 1 + SAT_EPS counts as saturated (ln^2 s underflows the exponent).
SAT_EPS = 1e-12


@dataclass(frozen=True)
class KineticParams:
    """Kinetic constants.

    ``E_act`` has no tabulated value and must always be supplied.  ``Rg`` keeps
    the tabulated 18.314 J/K/mol; ``k_g`` keeps the tabulated 1e11, which is only
    sensible for formula checks (trajectory runs override it).
    """

    E_act: float
    k0: float = 2.25e8
    Rg: float = 18.314
    B0: float = 5.83
    k_b: float = 1.18e-7
    k_g: float = 10e10
    allow_negative_growth: bool = False

    def __post_init__(self):
        for name in ("E_act", "k0", "Rg", "B0", "k_b", "k_g"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"KineticParams.{name} must be finite and > 0, got {value!r}")


def _check_temperature(T):
    if np.any(np.asarray(T) <= -KELVIN):
        raise ModelDomainError(f"temperature below absolute zero: {T!r} degC")


def mutarotation_ratio(T):
    """k_m(T) = k1/k2, the alpha->beta equilibrium ratio."""
    return 1.64 - 0.0027 * T


def mutarotation_rates(T, p: KineticParams):
    """Return ``(k1, k2)`` in 1/s: alpha->beta and beta->alpha mutarotation rates."""
    _check_temperature(T)
    k2 = p.k0 * np.exp(-p.E_act / (p.Rg * (T + KELVIN)))
    k1 = k2 * mutarotation_ratio(T)
    return k1, k2


def equilibrium_saturation(T):
    """Alpha-lactose solubility at mutarotation equilibrium (kg/kg water)."""
    km1 = 1.0 + mutarotation_ratio(T)
    if np.any(np.asarray(km1) <= 0):
        raise ModelDomainError(f"1 + k_m(T) <= 0 at T = {T!r} degC")
    return 10.9109 * np.exp(0.02804 * T) / (100.0 * km1)


def solubility_correction(T):
    """F(T), sensitivity of alpha solubility to excess beta-lactose."""
    return 0.0187 * np.exp(0.0236 * T)


def alpha_saturation(c_beta, T):
    """Alpha-lactose saturation concentration given the beta concentration."""
    c_eq = equilibrium_saturation(T)
    return c_eq - solubility_correction(T) * (c_beta - mutarotation_ratio(T) * c_eq)


def _nucleation_from_sat(c_alpha, c_sat, T, p):
    if np.any(np.asarray(c_sat) <= 0):
        raise ModelDomainError("saturation concentration must be positive")
    s = np.asarray(c_alpha / c_sat, dtype=float)
    supersat = s > 1.0 + SAT_EPS
    log_s = np.log(np.where(supersat, s, 2.0))
    expo = -p.B0 / ((T + KELVIN) ** 3 * log_s**2)
    B = np.where(supersat, p.k_b * np.exp(expo), 0.0)
    return B if B.ndim else float(B)


def _growth_from_sat(c_alpha, c_sat, p):
    drive = c_alpha - c_sat
    if not p.allow_negative_growth:
        drive = np.maximum(drive, 0.0)
    return p.k_g * drive


def nucleation_rate(c_alpha, c_beta, T, p: KineticParams):
    """Primary nucleation rate B in #/(m^3 s); zero at or below saturation."""
    return _nucleation_from_sat(c_alpha, alpha_saturation(c_beta, T), T, p)


def growth_rate(c_alpha, c_beta, T, p: KineticParams):
    """Size-independent growth rate G in m/s, clamped at zero when undersaturated."""
    return _growth_from_sat(c_alpha, alpha_saturation(c_beta, T), p)


def rates(c_alpha, c_beta, T, p: KineticParams):
    """All kinetic quantities at once: ``(c_sat, B, G, k1, k2)``.

    Evaluates the saturation curve a single time; used by the right-hand sides.
    """
    c_sat = alpha_saturation(c_beta, T)
    B = _nucleation_from_sat(c_alpha, c_sat, T, p)
    G = _growth_from_sat(c_alpha, c_sat, p)
    k1, k2 = mutarotation_rates(T, p)
    return c_sat, B, G, k1, k2
