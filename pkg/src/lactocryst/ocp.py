"""Optimal control of the crystallizer by direct single shooting.

Decision vectors live in the unit box.  Layout::

    [T_sp knots / T_sp_max | q knots / q_max | seed log-moments | tf / t_max]

where the seed block (mu_0, mu_1, mu_2, mu_4, mu_5 at t = 0; mu_3 stays pinned)
is present only for seed co-optimization and the last entry only for a free
final time.  Every candidate is simulated with fixed-step RK4 on a normalized
horizon ``tau in [0, 1]`` (real time ``t = tf * tau``), so the discrete cost is
a smooth, deterministic function of the decision vector and finite-difference
gradients of all perturbations come out of one batched simulation.

Constraints enter through a quadratic penalty whose weights grow on an outer
loop until the largest scaled violation is below ``feas_tol``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import minimize

from lactocryst import kinetics
from lactocryst.exceptions import InfeasibleStart, ModelDomainError, NoProgress
from lactocryst.integrator import Trajectory, rk4_nodes
from lactocryst.maxent import realizability_margin
from lactocryst.model import CrystallizerModel, ProcessState, volume_from_parts
from lactocryst.policies import ControlBounds, ControlProfile, knot_times

logger = logging.getLogger(__name__)

OBJECTIVES = ("d43", "nucleation", "nucleation_integral", "cv", "moment_match")
ENGINES = ("projected_gradient", "nelder_mead", "lbfgsb")
FAILED_COST = 1e12
FREE_SEED = (0, 1, 2, 4, 5)
# magnitudes used to make path violations dimensionless
CONSTRAINT_SCALES = {"V_max": None, "V_min": None, "T_max": 70.0, "T_min": 70.0,
                     "supersaturation": 0.1, "realizability": 1.0}


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str
    target: tuple | None = None
    weights: tuple | None = None
    t_max: float | None = None

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ValueError(f"objective kind must be one of {OBJECTIVES}")
        if self.kind != "moment_match":
            return
        if self.target is None:
            raise ValueError("moment matching needs target moments")
        if len(self.target) < 4 or self.target[3] != 1.0:
            raise ValueError("target moments must be normalized so that nu_3 = 1 exactly")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.size != len(self.target):
                raise ValueError("one weight per target moment")
            if np.any(w < 0) or not np.any(w > 0):
                raise ValueError("weights must be non-negative and not all zero")


def lognormal_target(median=5e-5, sigma=0.3, order=5):
    """Moments of a log-normal size density normalized so that nu_3 = 1."""
    k = np.arange(order + 1)
    nu = np.exp((k - 3) * math.log(median) + 0.5 * (k**2 - 9) * sigma**2)
    nu[3] = 1.0
    return tuple(float(v) for v in nu)


def default_weights(target, mu3_ref):
    """``w_i = (mu3_ref * nu_i)^-2`` (zero where nu_i = 0): dimensionless residuals."""
    nu = np.asarray(target, dtype=float)
    w = np.zeros_like(nu)
    nz = nu != 0
    w[nz] = (mu3_ref * nu[nz]) ** -2
    return tuple(float(v) for v in w)


@dataclass(frozen=True)
class OcpSpec:
    objective: ObjectiveSpec
    model: CrystallizerModel
    s0: ProcessState
    tf: float = 11000.0
    free_tf: bool = False
    tf_min: float = 1000.0
    n_knots: int = 20
    interpolation: str = "linear"
    bounds: ControlBounds = field(default_factory=ControlBounds)
    T_bounds: tuple = (0.0, 70.0)
    seed_moments_free: bool = False
    seed_log_span: float = math.log(10.0)
    realizability_margin: float = 1e-3
    rk4_step: float = 20.0
    feas_tol: float = 1e-6

    def __post_init__(self):
        if self.free_tf:
            t_max = self.objective.t_max
            if t_max is None or not 0 < self.tf_min < t_max:
                raise ValueError("free final time needs 0 < tf_min < objective.t_max")
        elif self.tf <= 0:
            raise ValueError("tf must be positive")
        if self.n_knots < (2 if self.interpolation == "linear" else 1):
            raise ValueError("too few knots for the interpolation")

    @property
    def t_ref(self):
        """Horizon used to size the RK4 grid (t_max for free tf)."""
        return self.objective.t_max if self.free_tf else self.tf

    @property
    def weights(self):
        o = self.objective
        if o.kind != "moment_match":
            return None
        return np.asarray(o.weights if o.weights is not None
                          else default_weights(o.target, self.s0.mu[3]))


class Layout:
    """Encoding between physical decisions and the unit box."""

    def __init__(self, spec: OcpSpec):
        self.spec = spec
        self.n = spec.n_knots
        self.n_seed = len(FREE_SEED) if spec.seed_moments_free else 0
        self.size = 2 * self.n + self.n_seed + int(spec.free_tf)
        self.log_ref = np.log(np.asarray(spec.s0.mu, dtype=float))
        self.lower = np.zeros(self.size)
        self.upper = np.ones(self.size)
        if spec.free_tf:
            self.lower[-1] = spec.tf_min / spec.objective.t_max

    def encode(self, T_knots, q_knots, seed=None, tf=None):
        b = self.spec.bounds
        parts = [np.asarray(T_knots, dtype=float) / b.T_sp_max,
                 np.asarray(q_knots, dtype=float) / b.q_max]
        if self.n_seed:
            seed = np.asarray(self.spec.s0.mu if seed is None else seed, dtype=float)
            y = (np.log(seed[list(FREE_SEED)]) - self.log_ref[list(FREE_SEED)])
            parts.append(0.5 + y / (2.0 * self.spec.seed_log_span))
        if self.spec.free_tf:
            parts.append([(self.spec.tf if tf is None else tf) / self.spec.objective.t_max])
        return np.clip(np.concatenate(parts), self.lower, self.upper)

    def decode(self, Z):
        """Z of shape (size,) or (size, batch) -> (T, q, mu0, tf)."""
        Z = np.asarray(Z, dtype=float)
        b = self.spec.bounds
        n = self.n
        T = Z[:n] * b.T_sp_max
        q = Z[n:2 * n] * b.q_max
        mu0 = np.asarray(self.spec.s0.mu, dtype=float)
        if Z.ndim == 2:
            mu0 = np.repeat(mu0[:, None], Z.shape[1], axis=1)
        else:
            mu0 = mu0.copy()
        if self.n_seed:
            y = (Z[2 * n:2 * n + self.n_seed] - 0.5) * 2.0 * self.spec.seed_log_span
            mu0[list(FREE_SEED)] = np.exp(self.log_ref[list(FREE_SEED)].reshape(
                (-1,) + (1,) * (Z.ndim - 1)) + y)
        tf = Z[-1] * self.spec.objective.t_max if self.spec.free_tf else self.spec.tf
        return T, q, mu0, tf


def objective_from_states(kind, Y, t, model: CrystallizerModel, target=None, weights=None):
    """Objective from node states ``Y`` (n_nodes, n_state, ...) at real times ``t``.

    ``t`` is 1-D or broadcastable against the trailing batch axes of ``Y``.
    """
    nm = model.n_moments + 1
    yf = Y[-1]
    mu = yf[:nm]
    if kind in ("d43", "cv"):
        if np.any(mu[3] <= 0) or np.any(mu[4] <= 0):
            raise ModelDomainError("d43/CV objectives need mu3, mu4 > 0 at tf")
        return mu[4] / mu[3] if kind == "d43" else mu[3] * mu[5] / mu[4] ** 2 - 1.0
    if kind == "nucleation":
        return kinetics.rates(yf[nm + 1], yf[nm + 2], yf[nm + 4], model.kinetics)[1]
    if kind == "nucleation_integral":
        B = kinetics.rates(Y[:, nm + 1], Y[:, nm + 2], Y[:, nm + 4], model.kinetics)[1]
        return trapezoid(B, t, axis=0)
    nu = np.asarray(target, dtype=float)
    w = np.asarray(weights, dtype=float)
    shape = (-1,) + (1,) * (mu.ndim - 1)
    resid = mu[: nu.size] - mu[3] * nu.reshape(shape)
    return np.sum(w.reshape(shape) * resid**2, axis=0)


def evaluate_objective(traj: Trajectory, spec: ObjectiveSpec, weights=None):
    """Objective of a simulated trajectory (terminal value or, for
    ``nucleation_integral``, the time integral of B)."""
    if spec.kind == "moment_match" and weights is None:
        weights = spec.weights if spec.weights is not None else default_weights(
            spec.target, traj.states[0, 3])
    return float(objective_from_states(spec.kind, traj.states, traj.times, traj.model,
                                       spec.target, weights))


def path_violations(Y, model: CrystallizerModel, T_bounds=(0.0, 70.0), V_bounds=None):
    """Maximum violation of each path constraint over the nodes, in constraint units.

    Same definitions as :func:`lactocryst.integrator.monitor_path_constraints`.
    """
    c = model.constants
    nm = model.n_moments + 1
    V_lo, V_hi = V_bounds or (0.0, c.V_max)
    with np.errstate(all="ignore"):
        V = volume_from_parts(Y[:, nm], Y[:, nm + 1], Y[:, nm + 2], Y[:, 3], c)
        c_sat = kinetics.alpha_saturation(Y[:, nm + 2], Y[:, nm + 4])
    T = Y[:, nm + 4]
    checks = {"V_max": V - V_hi, "V_min": V_lo - V, "T_max": T - T_bounds[1],
              "T_min": T_bounds[0] - T, "supersaturation": c_sat - Y[:, nm + 1]}
    return {k: np.maximum(g, 0.0).max(axis=0) for k, g in checks.items()}


def seed_violation(mu0, margin, log_margin=1e-3):
    """Realizability shortfall of seed moments (log-convexity plus Hankel margin)."""
    mu0 = np.asarray(mu0, dtype=float)
    y = np.log(mu0)
    cs = 2.0 * y[1:-1] - y[:-2] - y[2:] + log_margin
    out = np.maximum(cs, 0.0).max(axis=0)
    if mu0.ndim == 1:
        return float(max(out, max(margin - realizability_margin(mu0), 0.0)))
    hank = np.array([max(margin - realizability_margin(mu0[:, j]), 0.0)
                     for j in range(mu0.shape[1])])
    return np.maximum(out, hank)


class Evaluator:
    """Batched cost evaluation for one spec; counts simulations."""

    def __init__(self, spec: OcpSpec):
        self.spec = spec
        self.layout = Layout(spec)
        n_int = spec.n_knots - 1 if spec.interpolation == "linear" else spec.n_knots
        self.tau = knot_times(spec.n_knots, 1.0, spec.interpolation)
        self.steps = max(1, math.ceil(spec.t_ref / (n_int * spec.rk4_step) - 1e-9))
        self.n_sims = 0
        c = spec.model.constants
        self.scales = dict(CONSTRAINT_SCALES, V_max=c.V_max, V_min=c.V_max)

    def simulate(self, Z):
        """Returns (tau nodes, Y nodes (n_nodes, n_state, batch), tf (batch,), mu0)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float).T).T
        T, q, mu0, tf = self.layout.decode(Z)
        profile = ControlProfile(self.tau, T, q, self.spec.interpolation,
                                 self.spec.bounds, clip=True)
        y0 = np.repeat(self.spec.s0.to_array()[:, None], Z.shape[1], axis=1)
        y0[: mu0.shape[0]] = mu0
        tf = np.broadcast_to(np.asarray(tf, dtype=float), (Z.shape[1],))
        self.n_sims += Z.shape[1]
        with np.errstate(all="ignore"):
            try:
                tau, Y, _ = rk4_nodes(self.spec.model, y0, profile, self.steps, time_scale=tf)
            except (ModelDomainError, FloatingPointError, ValueError) as exc:
                logger.debug("batch simulation failed: %s", exc)
                Y = np.full((self.steps * (self.tau.size - 1) + 1,) + y0.shape, np.nan)
                tau = None
        return tau, Y, tf, mu0

    def terms(self, Z):
        """Objective, raw violations dict and failure mask for a batch of vectors."""
        tau, Y, tf, mu0 = self.simulate(Z)
        spec = self.spec
        batch = Y.shape[-1]
        failed = ~np.all(np.isfinite(Y), axis=(0, 1))
        with np.errstate(all="ignore"):
            t = None if tau is None else tau[:, None] * tf[None, :]
            try:
                J = objective_from_states(spec.objective.kind, Y, t, spec.model,
                                          spec.objective.target, spec.weights)
            except ModelDomainError:
                J = np.full(batch, np.nan)
            viol = path_violations(Y, spec.model, spec.T_bounds)
        J = np.broadcast_to(J, (batch,)).astype(float)
        if spec.seed_moments_free:
            viol["realizability"] = seed_violation(mu0, spec.realizability_margin)
        failed |= ~np.isfinite(J)
        for v in viol.values():
            failed |= ~np.isfinite(v)
        return J, viol, failed

    def scaled_violation(self, viol):
        return np.max([v / self.scales[k] for k, v in viol.items()], axis=0)

    def penalized(self, Z, weights, J_scale=1.0):
        """``(J + sum rho_j v_j^2) / J_scale`` per column; failures give FAILED_COST."""
        J, viol, failed = self.terms(Z)
        P = sum(weights.get(k, 0.0) * v**2 for k, v in viol.items())
        f = (J + P) / J_scale
        return np.where(failed, FAILED_COST, f), J, viol, failed


def default_penalty_weights(evaluator: Evaluator, rho, J_scale):
    """rho * J_scale / scale_j^2: a scaled violation v costs rho * v^2 relative to J_scale."""
    return {k: rho * J_scale / s**2 for k, s in evaluator.scales.items()}


def penalized_cost(z, spec: OcpSpec, weights: dict):
    """Objective plus sum of rho_j * (max violation_j)^2 for one decision vector.

    Violations are in each constraint's own units.  A failed simulation costs
    FAILED_COST (never NaN).
    """
    ev = Evaluator(spec)
    f, J, viol, failed = ev.penalized(np.asarray(z, dtype=float)[:, None], weights)
    if failed[0]:
        logger.warning("simulation failed for decision vector; barrier cost returned")
    return float(f[0])


@dataclass
class OcpSolution:
    z: np.ndarray
    profile: ControlProfile
    seed_moments: tuple | None
    tf: float
    objective: float
    penalized: float
    violations: dict
    max_scaled_violation: float
    diagnostics: dict
    kind: str = ""

    def to_json(self, path, provenance=None):
        data = {
            "objective_kind": self.kind,
            "decision_vector": [float(v) for v in self.z],
            "interpolation": self.profile.interpolation,
            "breakpoints": [float(v) for v in self.profile.breakpoints],
            "T_sp": [float(v) for v in self.profile.T_sp],
            "q_H2O": [float(v) for v in self.profile.q_H2O],
            "seed_moments": None if self.seed_moments is None else list(self.seed_moments),
            "tf": self.tf,
            "objective": self.objective,
            "penalized": self.penalized,
            "violations": {k: float(v) for k, v in self.violations.items()},
            "max_scaled_violation": self.max_scaled_violation,
            "diagnostics": _jsonable(self.diagnostics),
            "provenance": provenance or {},
        }
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))
        return path

    @classmethod
    def from_json(cls, path, bounds: ControlBounds | None = None):
        d = json.loads(Path(path).read_text())
        prof = ControlProfile(d["breakpoints"], d["T_sp"], d["q_H2O"], d["interpolation"],
                              bounds, clip=True)
        seed = None if d["seed_moments"] is None else tuple(d["seed_moments"])
        return cls(np.array(d["decision_vector"]), prof, seed, d["tf"], d["objective"],
                   d["penalized"], d["violations"], d["max_scaled_violation"],
                   d["diagnostics"], d.get("objective_kind", ""))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def content_hash(*items):
    """SHA-256 over a canonical JSON rendering of ``items``."""
    blob = json.dumps(_jsonable(list(items)), sort_keys=True, default=repr)
    return hashlib.sha256(blob.encode()).hexdigest()


def initial_vector(spec: OcpSpec, guess):
    """Decision vector from a ControlProfile, OcpSolution or raw vector."""
    layout = Layout(spec)
    if isinstance(guess, OcpSolution):
        prof, seed, tf = guess.profile, guess.seed_moments, guess.tf
    elif isinstance(guess, ControlProfile):
        prof, seed, tf = guess, None, guess.tf
    else:
        z = np.asarray(guess, dtype=float)
        if z.shape != (layout.size,):
            raise ValueError(f"decision vector must have {layout.size} entries")
        return np.clip(z, layout.lower, layout.upper)
    t = knot_times(spec.n_knots, 1.0, spec.interpolation) * prof.tf
    if spec.interpolation == "constant":
        t = 0.5 * (t[1:] + t[:-1])
    T, q = prof.sample_many(t)
    tf = min(max(tf, spec.tf_min), spec.objective.t_max) if spec.free_tf else spec.tf
    return layout.encode(T, q, seed, tf)


# ---------------------------------------------------------------- inner engines

def fd_gradient(ev: Evaluator, z, weights, J_scale, h=1e-6):
    """Central differences (one-sided at the box faces), all in one batch."""
    lo, hi = ev.layout.lower, ev.layout.upper
    n = z.size
    zp = np.minimum(z + h, hi)
    zm = np.maximum(z - h, lo)
    Z = np.repeat(z[:, None], 2 * n + 1, axis=1)
    idx = np.arange(n)
    Z[idx, 1 + idx] = zp
    Z[idx, 1 + n + idx] = zm
    f = ev.penalized(Z, weights, J_scale)[0]
    g = (f[1:n + 1] - f[n + 1:]) / (zp - zm)
    return float(f[0]), g


def _projected_gradient(ev, z, weights, J_scale, max_iter, gtol, ftol, h):
    """Spectral (Barzilai-Borwein) projected gradient with Armijo backtracking."""
    lo, hi = ev.layout.lower, ev.layout.upper
    f, g = fd_gradient(ev, z, weights, J_scale, h)
    alpha = 1.0 / max(np.linalg.norm(g, np.inf), 1e-12) * 0.1
    it, stalls = 0, 0
    status = "max_iter"
    for it in range(1, max_iter + 1):
        pg = np.clip(z - g, lo, hi) - z
        if np.linalg.norm(pg, np.inf) < gtol:
            status = "converged"
            break
        accepted = False
        step = alpha
        for _ in range(40):
            z_new = np.clip(z - step * g, lo, hi)
            d = z_new - z
            f_new = float(ev.penalized(z_new[:, None], weights, J_scale)[0][0])
            if f_new <= f + 1e-4 * g @ d:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            status = "line_search_failed"
            break
        f_new, g_new = fd_gradient(ev, z_new, weights, J_scale, h)
        s, y = z_new - z, g_new - g
        sy = s @ y
        alpha = (s @ s) / sy if sy > 0 else step * 2.0
        alpha = min(max(alpha, 1e-10), 1e6)
        stalls = stalls + 1 if f - f_new <= ftol * max(abs(f), 1e-300) else 0
        z, f, g = z_new, f_new, g_new
        if stalls >= 5:
            status = "stalled"
            break
    return z, f, it, status


def _nelder_mead(ev, z, weights, J_scale, max_iter, gtol, ftol, h):
    bounds = list(zip(ev.layout.lower, ev.layout.upper))
    res = minimize(lambda x: float(ev.penalized(x[:, None], weights, J_scale)[0][0]), z,
                   method="Nelder-Mead", bounds=bounds,
                   options={"maxiter": max_iter, "xatol": gtol, "fatol": ftol,
                            "adaptive": True})
    return res.x, float(res.fun), int(res.nit), "converged" if res.success else "max_iter"


def _lbfgsb(ev, z, weights, J_scale, max_iter, gtol, ftol, h):
    bounds = list(zip(ev.layout.lower, ev.layout.upper))
    res = minimize(lambda x: fd_gradient(ev, x, weights, J_scale, h), z, jac=True,
                   method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": max_iter, "gtol": gtol, "ftol": ftol})
    status = "converged" if res.success else ("max_iter" if res.nit >= max_iter else "stalled")
    return res.x, float(res.fun), int(res.nit), status


_ENGINES = {"projected_gradient": _projected_gradient, "nelder_mead": _nelder_mead,
            "lbfgsb": _lbfgsb}


@dataclass(frozen=True)
class SolverOptions:
    engine: str = "projected_gradient"
    max_iter: int = 300
    max_outer: int = 8
    rho0: float = 1e2
    rho_growth: float = 10.0
    gtol: float = 1e-9
    ftol: float = 1e-12
    fd_step: float = 1e-6
    raise_on_no_progress: bool = False

    def __post_init__(self):
        if self.engine not in _ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}")


def solve_ocp(spec: OcpSpec, initial_guess, opts: SolverOptions = SolverOptions()) -> OcpSolution:
    """Penalty outer loop around the chosen inner engine.

    The result never costs more than the start (every engine is run from the
    best point found so far and the best point is kept).  ``diagnostics['status']``
    is ``converged``, ``infeasible`` (penalty loop exhausted) or the inner
    engine's last status.
    """
    t_start = time.perf_counter()
    ev = Evaluator(spec)
    z = initial_vector(spec, initial_guess)
    J0, viol0, failed0 = ev.terms(z[:, None])
    if failed0[0]:
        raise InfeasibleStart("initial guess cannot be simulated")
    J_scale = max(abs(float(J0[0])), 1e-300)
    rho = opts.rho0
    history = []
    engine = _ENGINES[opts.engine]
    status = "max_iter"
    iterations = 0
    weights = default_penalty_weights(ev, rho, J_scale)
    f_start = float(ev.penalized(z[:, None], weights, J_scale)[0][0])
    for outer in range(opts.max_outer):
        weights = default_penalty_weights(ev, rho, J_scale)
        f_before = float(ev.penalized(z[:, None], weights, J_scale)[0][0])
        z_new, f_new, it, status = engine(ev, z.copy(), weights, J_scale, opts.max_iter,
                                          opts.gtol, opts.ftol, opts.fd_step)
        iterations += it
        if f_new <= f_before:
            z = np.clip(z_new, ev.layout.lower, ev.layout.upper)
        _, J, viol, _ = ev.penalized(z[:, None], weights, J_scale)
        v = float(ev.scaled_violation(viol)[0])
        history.append({"rho": rho, "objective": float(J[0]), "max_scaled_violation": v,
                        "inner_iterations": it, "inner_status": status})
        if v < spec.feas_tol:
            break
        rho *= opts.rho_growth
    else:
        status = "infeasible"
    sol = make_solution(spec, z, weights, J_scale)
    if v < spec.feas_tol and status in ("converged", "stalled", "line_search_failed"):
        status = "converged"
    sol.diagnostics.update({
        "status": status, "engine": opts.engine, "iterations": iterations,
        "evaluations": ev.n_sims, "penalty_history": history,
        "initial_objective": float(J0[0]), "initial_penalized": f_start * J_scale,
        "seconds": time.perf_counter() - t_start,
    })
    if sol.penalized >= f_start * J_scale and iterations and opts.raise_on_no_progress:
        raise NoProgress("optimizer made no progress from the initial guess", sol)
    return sol


def make_solution(spec: OcpSpec, z, weights=None, J_scale=1.0) -> OcpSolution:
    """Re-simulate decision vector ``z`` and package the result."""
    ev = Evaluator(spec)
    weights = weights if weights is not None else default_penalty_weights(ev, 0.0, 1.0)
    f, J, viol, failed = ev.penalized(np.asarray(z, dtype=float)[:, None], weights, J_scale)
    T, q, mu0, tf = ev.layout.decode(z)
    tf = float(tf)
    prof = ControlProfile(ev.tau * tf, T, q, spec.interpolation, spec.bounds, clip=True)
    seed = tuple(float(v) for v in mu0) if spec.seed_moments_free else None
    raw = {k: float(v[0]) for k, v in viol.items()}
    return OcpSolution(np.asarray(z, dtype=float), prof, seed, tf, float(J[0]),
                       float(f[0]) * J_scale, raw, float(ev.scaled_violation(viol)[0]),
                       {"failed": bool(failed[0])}, spec.objective.kind)


def resimulate_objective(spec: OcpSpec, sol: OcpSolution):
    """Objective recomputed from the solution's decision vector."""
    J, _, _ = Evaluator(spec).terms(np.asarray(sol.z)[:, None])
    return float(J[0])


def solve_scenario4(spec: OcpSpec, initial_guess, opts: SolverOptions = SolverOptions(),
                    freeze_seed=False):
    """Controls plus seed moments mu_0, mu_1, mu_2, mu_4, mu_5 (mu_3 pinned).

    With ``freeze_seed`` this is exactly the control-only problem.  A seed that
    ends up short of the realizability margin is flagged in diagnostics.
    """
    spec = replace(spec, seed_moments_free=not freeze_seed)
    sol = solve_ocp(spec, initial_guess, opts)
    if sol.seed_moments is not None:
        mu = np.asarray(sol.seed_moments)
        sol.diagnostics["seed_realizable"] = bool(
            np.all(mu[:-2] * mu[2:] >= mu[1:-1] ** 2) and realizability_margin(mu) > 0)
        c = spec.model.constants
        V = volume_from_parts(spec.s0.m_H2O, spec.s0.c_alpha, spec.s0.c_beta, mu[3], c)
        sol.diagnostics["seed_mass"] = float(c.k_v * c.rho_cry * V * mu[3])
    return sol


def solve_scenario5(spec: OcpSpec, initial_guess, opts: SolverOptions = SolverOptions()):
    """Moment matching with the final time free in ``[tf_min, t_max]``."""
    if spec.objective.kind != "moment_match":
        raise ValueError("scenario 5 uses the moment-matching objective")
    return solve_ocp(replace(spec, free_tf=True), initial_guess, opts)


def tf_homotopy(spec: OcpSpec, t_max_sequence, initial_guess,
                opts: SolverOptions = SolverOptions()):
    """Solve a sequence of free-tf problems with growing t_max, each warm-started
    from the previous optimum.  Returns the list of solutions."""
    seq = sorted(float(t) for t in t_max_sequence)
    out = []
    guess = initial_guess
    for t_max in seq:
        s = replace(spec, free_tf=True, objective=replace(spec.objective, t_max=t_max),
                    tf_min=min(spec.tf_min, 0.5 * t_max))
        sol = solve_ocp(s, guess, opts)
        out.append(sol)
        guess = sol
    return out


def heuristic_objectives(spec: OcpSpec, profiles: dict):
    """Objective of each named heuristic profile under the OcpSpec's evaluator."""
    out = {}
    for name, prof in profiles.items():
        s = replace(spec, free_tf=False, tf=prof.tf) if spec.free_tf else spec
        ev = Evaluator(s)
        J, viol, failed = ev.terms(initial_vector(s, prof)[:, None])
        out[name] = {"objective": float(J[0]),
                     "max_scaled_violation": float(ev.scaled_violation(viol)[0]),
                     "failed": bool(failed[0])}
    return out


def fd_gradient_check(spec: OcpSpec, vectors, directions=None, h=1e-4, clamp_band=1e-6,
                      tol=0.10):
    """Directional derivatives by central differences at steps h and h/2.

    A vector is excluded (and reported) when some trajectory node sits within
    ``clamp_band`` of the saturation clamp, where the cost is only piecewise
    smooth.  Returns a list of dicts with the two estimates, their relative
    gap and a pass flag (gap <= tol).
    """
    ev = Evaluator(spec)
    rng = np.random.default_rng(0)
    weights = default_penalty_weights(ev, 0.0, 1.0)
    report = []
    for i, z in enumerate(vectors):
        z = np.asarray(z, dtype=float)
        d = (directions[i] if directions is not None else rng.standard_normal(z.size))
        d = d / np.linalg.norm(d)
        Z = np.stack([z + h * d, z - h * d, z + 0.5 * h * d, z - 0.5 * h * d], axis=1)
        if np.any(Z < ev.layout.lower[:, None]) or np.any(Z > ev.layout.upper[:, None]):
            report.append({"index": i, "excluded": "box boundary"})
            continue
        tau, Y, tf, _ = ev.simulate(Z)
        nm = spec.model.n_moments + 1
        gap = (Y[:, nm + 1] - kinetics.alpha_saturation(Y[:, nm + 2], Y[:, nm + 4]))
        if np.any(np.abs(gap) < clamp_band) or (np.any(gap < 0) and np.any(gap > 0)):
            report.append({"index": i, "excluded": "saturation clamp"})
            continue
        f = ev.penalized(Z, weights)[0]
        D1 = (f[0] - f[1]) / (2 * h)
        D2 = (f[2] - f[3]) / h
        rel = abs(D1 - D2) / max(abs(D2), 1e-300)
        report.append({"index": i, "excluded": None, "D_h": float(D1), "D_h2": float(D2),
                       "relative_gap": float(rel), "ok": bool(rel <= tol)})
    return report
