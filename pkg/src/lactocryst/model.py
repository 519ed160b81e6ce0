"""Moment-reduced crystallizer model: balances, derived quantities, diagnostics.

State vector layout (``N`` = highest retained moment, 5 by default)::

    [mu_0 .. mu_N, m_H2O, c_alpha, c_beta, m_cry, T, T_jacket]

All internal units are SI with time in seconds; temperatures are degC.
Right-hand-side functions broadcast over a trailing batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from lactocryst import kinetics
from lactocryst.exceptions import ModelDomainError, StateInvariantViolated
from lactocryst.kinetics import KineticParams

SCALAR_NAMES = ("m_H2O", "c_alpha", "c_beta", "m_cry", "T", "T_jacket")
N_MOMENTS_DEFAULT = 5

# Tabulated initial moments (study 1).
TABLE3_MOMENTS = (1.24051e10, 2.1767e6, 409.2491, 0.0812, 1.6812e-5, 3.6094e-9)


@dataclass(frozen=True)
class PhysicalConstants:
    """Physical constants in SI units (heat in J, time in s).

    ``U`` is stored in W/(m^2 K); use :meth:`from_table_units` to enter the
    tabulated kJ/(m^2 h K) and kJ/kg values.
    """

    R_molar_ratio: float = 1.0525
    k_v: float = 0.523598
    rho_cry: float = 1545.0
    rho_lac_alpha: float = 1545.0
    rho_lac_beta: float = 1590.0
    rho_H2O: float = 1000.0
    dH: float = -43.1e3
    U: float = 300.0e3 / 3600.0
    T_ref: float = 25.0
    Cp_H2O: float = 4180.5
    Cp_cry: float = 1251.0
    Cp_alpha: float = 1193.0
    Cp_beta: float = 1193.0
    c_alpha_feed: float = 0.521
    c_beta_feed: float = 0.359
    T_feed: float = 25.0
    V0: float = 0.0015
    V_max: float = 0.01
    jacket_gain: float = 0.0019
    vessel_diameter: float = 0.1
    p2_use_cp_cry: bool = False
    swap_feed_fractions: bool = False

    def __post_init__(self):
        if not self.R_molar_ratio > 1:
            raise ValueError("R_molar_ratio must exceed 1")
        positive = ("k_v", "rho_cry", "rho_lac_alpha", "rho_lac_beta", "rho_H2O", "U",
                    "Cp_H2O", "Cp_cry", "Cp_alpha", "Cp_beta", "V0", "V_max",
                    "jacket_gain", "vessel_diameter")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"PhysicalConstants.{name} must be > 0")
        if self.dH >= 0:
            raise ValueError("heat of crystallization dH must be negative (exothermic)")
        if not self.V0 < self.V_max:
            raise ValueError("V0 must be smaller than V_max")

    @classmethod
    def from_table_units(cls, U_kJ_m2_h_K=300.0, dH_kJ_kg=-43.1, **kw):
        return cls(U=U_kJ_m2_h_K * 1e3 / 3600.0, dH=dH_kJ_kg * 1e3, **kw)

    @property
    def feed_fractions(self):
        """``(c_alpha_feed, c_beta_feed)`` after the optional swap."""
        if self.swap_feed_fractions:
            return self.c_beta_feed, self.c_alpha_feed
        return self.c_alpha_feed, self.c_beta_feed


@dataclass(frozen=True)
class ControlInput:
    T_sp: float
    q_H2O: float


@dataclass(frozen=True)
class ProcessState:
    mu: tuple
    m_H2O: float
    c_alpha: float
    c_beta: float
    m_cry: float
    T: float
    T_jacket: float

    @property
    def n_moments(self):
        return len(self.mu) - 1

    def to_array(self):
        return np.array([*self.mu, self.m_H2O, self.c_alpha, self.c_beta,
                         self.m_cry, self.T, self.T_jacket], dtype=float)

    @classmethod
    def from_array(cls, y):
        y = np.asarray(y, dtype=float)
        nm = y.shape[0] - len(SCALAR_NAMES)
        return cls(tuple(float(v) for v in y[:nm]), *(float(v) for v in y[nm:]))

    def replace(self, **changes):
        return replace(self, **changes)

    def violations(self, c: PhysicalConstants, rtol=1e-9):
        """Names of violated state invariants (empty list when valid)."""
        bad = []
        mu = np.asarray(self.mu)
        if np.any(mu < 0):
            bad.append("mu")
        if self.m_H2O <= 0:
            bad.append("m_H2O")
        for name in ("c_alpha", "c_beta", "m_cry"):
            if getattr(self, name) < 0:
                bad.append(name)
        if self.n_moments >= 2 and mu[0] * mu[2] < (1 - rtol) * mu[1] ** 2:
            bad.append("hankel_012")
        if self.n_moments >= 5 and mu[3] * mu[5] < (1 - rtol) * mu[4] ** 2:
            bad.append("hankel_345")
        if self.n_moments >= 3 and c.k_v * mu[3] >= 1:
            bad.append("packing")
        return bad


def n_state(n_moments=N_MOMENTS_DEFAULT):
    return n_moments + 1 + len(SCALAR_NAMES)


def state_names(n_moments=N_MOMENTS_DEFAULT):
    return tuple(f"mu{k}" for k in range(n_moments + 1)) + SCALAR_NAMES


def table3_state(c: PhysicalConstants | None = None, moments=TABLE3_MOMENTS,
                 c_alpha=0.359, c_beta=0.521, T=70.0, T_jacket=20.0, m_H2O=0.92):
    """Initial state of study 1; the crystal mass is made consistent with the slurry volume."""
    c = c or PhysicalConstants()
    s = ProcessState(tuple(float(m) for m in moments), m_H2O, c_alpha, c_beta, 0.0, T, T_jacket)
    V = slurry_volume(s, c)
    return s.replace(m_cry=float(c.k_v * c.rho_cry * V * moments[3]))


def _liquid_specific_volume(c_alpha, c_beta, c):
    return c_alpha / c.rho_lac_alpha + c_beta / c.rho_lac_beta + 1.0 / c.rho_H2O


def volume_from_parts(m_H2O, c_alpha, c_beta, mu3, c: PhysicalConstants):
    packing = 1.0 - c.k_v * mu3
    if np.any(np.asarray(packing) <= 0):
        raise ModelDomainError("k_v * mu3 >= 1: crystal phase fills the slurry")
    return m_H2O / packing * _liquid_specific_volume(c_alpha, c_beta, c)


def slurry_volume(s: ProcessState, c: PhysicalConstants):
    """Slurry volume in m^3 from water mass, concentrations and solid fraction."""
    return volume_from_parts(s.m_H2O, s.c_alpha, s.c_beta, s.mu[3], c)


def contact_surface(V, c: PhysicalConstants):
    """Wetted wall of a vertical cylinder of fixed diameter: A = 4 V / D."""
    if np.any(np.asarray(V) < 0):
        raise ModelDomainError("negative volume")
    return 4.0 * V / c.vessel_diameter


def moment_rhs(mu, G, B, dilution):
    """d mu_k/dt for the size-independent growth moment hierarchy.

    ``dilution`` is V'/V in 1/s.  ``mu`` has the moment index on axis 0.
    """
    mu = np.asarray(mu, dtype=float)
    k = np.arange(1, mu.shape[0], dtype=float).reshape((-1,) + (1,) * (mu.ndim - 1))
    dmu = np.empty_like(mu)
    dmu[0] = B - dilution * mu[0]
    dmu[1:] = k * G * mu[:-1] - dilution * mu[1:]
    return dmu


def crystal_mass_rhs(mu2, G, V, c: PhysicalConstants):
    return 3.0 * c.k_v * c.rho_cry * G * V * mu2


def water_rhs(mu2, G, V, q_H2O, c: PhysicalConstants):
    """Water balance: hydrate uptake by growing crystals plus feed."""
    return (1.0 / c.R_molar_ratio - 1.0) * crystal_mass_rhs(mu2, G, V, c) + q_H2O


def c_alpha_rhs(m_H2O, c_alpha, c_beta, dm_cry, q_H2O, k1, k2, c: PhysicalConstants):
    if np.any(np.asarray(m_H2O) <= 0):
        raise ModelDomainError("water mass must be positive")
    Rinv = 1.0 / c.R_molar_ratio
    c_feed = c.feed_fractions[0]
    return ((c_alpha * (1.0 - Rinv) - Rinv) * dm_cry / m_H2O
            - k1 * c_alpha + k2 * c_beta + (c_feed - c_alpha) * q_H2O / m_H2O)


def c_beta_rhs(m_H2O, c_alpha, c_beta, dm_cry, q_H2O, k1, k2, c: PhysicalConstants):
    if np.any(np.asarray(m_H2O) <= 0):
        raise ModelDomainError("water mass must be positive")
    Rinv = 1.0 / c.R_molar_ratio
    c_feed = c.feed_fractions[1]
    return (c_beta * (1.0 - Rinv) * dm_cry / m_H2O
            + k1 * c_alpha - k2 * c_beta + (c_feed - c_beta) * q_H2O / m_H2O)


def heat_capacity(m_H2O, c_alpha, c_beta, m_cry, c: PhysicalConstants):
    """Total heat capacity of the slurry in J/K (inverse of the P1 factor)."""
    return (m_H2O * c.Cp_H2O + c_alpha * m_H2O * c.Cp_alpha
            + c_beta * m_H2O * c.Cp_beta + m_cry * c.Cp_cry)


def energy_rhs(m_H2O, c_alpha, c_beta, m_cry, T, T_jacket, dm_H2O, dc_alpha, dc_beta,
               dm_cry, T_sp, q_H2O, A, c: PhysicalConstants, c_alpha0, c_beta0):
    """Return ``(dT, dT_jacket)`` in K/s.

    ``c_alpha0``/``c_beta0`` are the initial concentrations entering the feed
    enthalpy term.
    """
    cap = heat_capacity(m_H2O, c_alpha, c_beta, m_cry, c)
    if np.any(np.asarray(cap) <= 0):
        raise ModelDomainError("non-positive heat capacity")
    dm_alpha = dc_alpha * m_H2O + c_alpha * dm_H2O
    dm_beta = dc_beta * m_H2O + c_beta * dm_H2O
    cp_last = c.Cp_cry if c.p2_use_cp_cry else c.Cp_H2O
    P2 = dm_H2O * c.Cp_H2O + dm_alpha * c.Cp_alpha + dm_beta * c.Cp_beta + dm_cry * cp_last
    feed = q_H2O * (c.Cp_H2O + c.Cp_alpha * c_alpha0 + c.Cp_beta * c_beta0) * (c.T_feed - c.T_ref)
    dT = (-P2 * (T - c.T_ref) - c.dH * dm_cry + c.U * A * (T_jacket - T) + feed) / cap
    dTj = -c.jacket_gain * (T_jacket - T_sp)
    return dT, dTj


@dataclass(frozen=True)
class CrystallizerModel:
    """Constants, kinetics and the feed-enthalpy reference concentrations."""

    kinetics: KineticParams
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    c_alpha0: float = 0.359
    c_beta0: float = 0.521
    n_moments: int = N_MOMENTS_DEFAULT

    def __post_init__(self):
        if self.n_moments < 4:
            raise ValueError("at least mu_0..mu_4 are needed (CV uses mu_5, d43 uses mu_4)")

    @classmethod
    def for_initial_state(cls, kinetics: KineticParams, constants: PhysicalConstants,
                          s0: ProcessState):
        return cls(kinetics, constants, s0.c_alpha, s0.c_beta, s0.n_moments)

    @property
    def n_state(self):
        return n_state(self.n_moments)

    def split(self, y):
        nm = self.n_moments + 1
        return (y[:nm],) + tuple(y[nm + i] for i in range(len(SCALAR_NAMES)))

    def rates(self, y, T_sp, q_H2O):
        """Evaluate the full right-hand side together with derived quantities.

        Returns ``(dy, aux)`` with ``aux`` a dict of V, A, B, G, c_sat, dV.
        """
        mu, m_w, ca, cb, m_cry, T, Tj = self.split(y)
        dscal, aux = self.scalar_rates(mu[2], mu[3], m_w, ca, cb, m_cry, T, Tj, T_sp, q_H2O)
        dmu = moment_rhs(mu, aux["G"], aux["B"], aux["dV"] / aux["V"])
        return np.concatenate([dmu, np.stack(dscal)]), aux

    def scalar_rates(self, mu2, mu3, m_w, ca, cb, m_cry, T, Tj, T_sp, q_H2O):
        """Liquid, crystal-mass and thermal derivatives given mu2 and mu3.

        Shared with the population-balance simulator, which supplies mu2 and
        mu3 by quadrature of the discretized distribution.
        """
        c = self.constants
        V = volume_from_parts(m_w, ca, cb, mu3, c)
        A = contact_surface(V, c)
        c_sat, B, G, k1, k2 = kinetics.rates(ca, cb, T, self.kinetics)
        dm_cry = crystal_mass_rhs(mu2, G, V, c)
        dm_w = (1.0 / c.R_molar_ratio - 1.0) * dm_cry + q_H2O
        dca = c_alpha_rhs(m_w, ca, cb, dm_cry, q_H2O, k1, k2, c)
        dcb = c_beta_rhs(m_w, ca, cb, dm_cry, q_H2O, k1, k2, c)
        dV = (3.0 * c.k_v * G * V * mu2 + dm_w * _liquid_specific_volume(ca, cb, c)
              + m_w * (dca / c.rho_lac_alpha + dcb / c.rho_lac_beta))
        dT, dTj = energy_rhs(m_w, ca, cb, m_cry, T, Tj, dm_w, dca, dcb, dm_cry, T_sp, q_H2O,
                             A, c, self.c_alpha0, self.c_beta0)
        aux = {"V": V, "A": A, "B": B, "G": G, "c_sat": c_sat, "dV": dV}
        return (dm_w, dca, dcb, dm_cry, dT, dTj), aux

    def rhs(self, y, T_sp, q_H2O):
        return self.rates(y, T_sp, q_H2O)[0]


def full_rhs(s: ProcessState, u: ControlInput, c: PhysicalConstants, p: KineticParams,
             c_alpha0=None, c_beta0=None):
    """State derivative (per second) as an array in the standard layout."""
    model = CrystallizerModel(p, c,
                              s.c_alpha if c_alpha0 is None else c_alpha0,
                              s.c_beta if c_beta0 is None else c_beta0,
                              s.n_moments)
    return model.rhs(s.to_array(), u.T_sp, u.q_H2O)


def quality_metrics(mu):
    """``(d43, CV)`` from a moment vector (moment index on axis 0)."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu[3] <= 0) or np.any(mu[4] <= 0):
        raise ModelDomainError("d43/CV need mu3 > 0 and mu4 > 0")
    d43 = mu[4] / mu[3]
    cv = mu[3] * mu[5] / mu[4] ** 2 - 1.0
    return d43, cv


def conservation_residuals(traj, c: PhysicalConstants):
    """Lactose and water balance residuals (kg) at every trajectory time.

    Both vanish for the exact solution; their size measures integration error.
    """
    y = traj.states
    nm = y.shape[1] - len(SCALAR_NAMES)
    m_w, ca, cb, m_cry = y[:, nm], y[:, nm + 1], y[:, nm + 2], y[:, nm + 3]
    Rinv = 1.0 / c.R_molar_ratio
    fed = traj.profile.cumulative_feed(traj.times)
    c_af, c_bf = c.feed_fractions
    lactose = m_w * (ca + cb) + Rinv * m_cry
    lactose_res = lactose - lactose[0] - fed * (c_af + c_bf)
    water_res = m_w - m_w[0] - fed - (Rinv - 1.0) * (m_cry - m_cry[0])
    return lactose_res, water_res


def constants_field_names():
    return tuple(f.name for f in fields(PhysicalConstants))
