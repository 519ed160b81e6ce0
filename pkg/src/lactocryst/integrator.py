"""Time integration of the moment model under a control profile.

Two methods: adaptive Dormand-Prince RK45 (scipy's stepper driven one step at a
time so step-size floors, invariants and events are checked here) and classical
fixed-step RK4.  Integration restarts at every profile breakpoint, so no step
straddles a control kink or jump.

The RK4 path broadcasts over a trailing batch axis of the state and profile and
is what the optimizer uses for its finite-difference sweeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import RK45

from lactocryst.exceptions import ModelDomainError, StateInvariantViolated, StepSizeUnderflow
from lactocryst.model import CrystallizerModel, ProcessState, quality_metrics, state_names
from lactocryst.policies import ControlProfile

METHODS = ("rk45", "rk4")


@dataclass(frozen=True)
class IntegratorOptions:
    method: str = "rk45"
    rel_tol: float = 1e-8
    abs_tol: float | None = None  # None: rel_tol times the initial magnitude of each state
    max_step: float = 500.0
    min_step: float = 1e-8
    rk4_step: float = 10.0
    dense_output_dt: float | None = None
    check_invariants: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.rel_tol <= 0 or (self.abs_tol is not None and self.abs_tol <= 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.min_step < self.max_step:
            raise ValueError("need 0 < min_step < max_step")
        if self.rk4_step <= 0:
            raise ValueError("rk4_step must be positive")


@dataclass
class Trajectory:
    """Simulated time series.  Derived quantities are recomputed from states on access."""

    times: np.ndarray
    states: np.ndarray  # (n_times, n_state)
    controls: np.ndarray  # (n_times, 2): T_sp, q_H2O
    profile: ControlProfile
    model: CrystallizerModel
    event: str | None = None
    stats: dict = field(default_factory=dict)

    @property
    def final_state(self):
        return ProcessState.from_array(self.states[-1])

    @property
    def moments(self):
        return self.states[:, : self.model.n_moments + 1]

    def column(self, name):
        return self.states[:, state_names(self.model.n_moments).index(name)]

    def derived(self):
        """Dict of arrays V, A, B, G, c_sat, d43, CV over all times."""
        y = self.states.T
        _, aux = self.model.rates(y, self.controls[:, 0], self.controls[:, 1])
        d43, cv = quality_metrics(y[: self.model.n_moments + 1])
        return {"V": aux["V"], "A": aux["A"], "B": aux["B"], "G": aux["G"],
                "c_sat": aux["c_sat"], "d43": d43, "CV": cv}


def default_abs_tol(y0, rel_tol):
    """Component-wise absolute tolerance scaled by the initial state magnitudes."""
    scale = np.abs(np.asarray(y0, dtype=float))
    scale[scale == 0] = 1.0
    return rel_tol * scale


def _event_name(model, y):
    c = model.constants
    mu3 = y[3]
    if c.k_v * mu3 >= 1:
        return "packing"
    try:
        _, aux = model.rates(y, 0.0, 0.0)
    except ModelDomainError:
        return "packing"
    if aux["V"] > c.V_max:
        return "V_max"
    return None


def _check_state(model, t, y):
    s = ProcessState.from_array(y)
    bad = s.violations(model.constants, rtol=1e-6)
    bad = [b for b in bad if b != "packing"]
    if bad:
        name = bad[0]
        value = s.mu if name.startswith(("mu", "hankel")) else getattr(s, name)
        raise StateInvariantViolated(name, t, value)


def integrate(model: CrystallizerModel, s0, profile: ControlProfile, t_span=None,
              opts: IntegratorOptions | None = None) -> Trajectory:
    """Simulate from ``s0`` over ``t_span`` (default ``(0, profile.tf)``)."""
    opts = opts or IntegratorOptions()
    y0 = s0.to_array() if isinstance(s0, ProcessState) else np.asarray(s0, dtype=float)
    t0, tf = (0.0, profile.tf) if t_span is None else map(float, t_span)
    if t0 != 0.0:
        raise ValueError("trajectories start at t = 0")
    if tf > profile.tf * (1 + 1e-12):
        raise ValueError(f"profile covers [0, {profile.tf}], requested tf = {tf}")
    if tf == 0.0:
        u = profile.sample(0.0)
        return Trajectory(np.array([0.0]), y0[None, :].copy(), np.array([u], dtype=float),
                          profile, model, None, {"steps": 0, "rhs_evals": 0})
    if opts.method == "rk4":
        return _integrate_rk4(model, y0, profile, tf, opts)
    return _integrate_rk45(model, y0, profile, tf, opts)


def _intervals(profile, tf):
    bp = profile.breakpoints
    out = []
    for k in range(profile.n_intervals):
        a, b = bp[k], min(bp[k + 1], tf)
        if a >= tf:
            break
        out.append((k, a, b))
    return out


def _integrate_rk45(model, y0, profile, tf, opts):
    atol = default_abs_tol(y0, opts.rel_tol) if opts.abs_tol is None else opts.abs_tol
    times, states, controls = [0.0], [y0.copy()], [np.array(profile.sample(0.0), dtype=float)]
    stats = {"steps": 0, "rhs_evals": 0, "rejected_min_step": 0}
    y = y0.copy()
    event = None
    for k, a, b in _intervals(profile, tf):
        def fun(t, yy, k=k):
            T_sp, q = profile.interval_value(k, t)
            return model.rhs(yy, T_sp, q)

        solver = RK45(fun, a, y, b, max_step=min(opts.max_step, b - a), rtol=opts.rel_tol,
                      atol=atol)
        grid = None
        if opts.dense_output_dt:
            n0 = math.floor(a / opts.dense_output_dt) + 1
            grid = [g * opts.dense_output_dt for g in range(n0, math.ceil(b / opts.dense_output_dt))
                    if a < g * opts.dense_output_dt < b]
            gi = 0
        while solver.status == "running":
            msg = solver.step()
            stats["steps"] += 1
            if solver.status == "failed":
                raise StepSizeUnderflow(f"integrator failed near t = {solver.t}: {msg}")
            if solver.step_size < opts.min_step and solver.t < b:
                raise StepSizeUnderflow(f"step size {solver.step_size:g} s < min_step "
                                        f"{opts.min_step:g} s at t = {solver.t}")
            t_new, y_new = solver.t, solver.y
            if not np.all(np.isfinite(y_new)):
                raise StepSizeUnderflow(f"non-finite state at t = {t_new}")
            if opts.check_invariants:
                _check_state(model, t_new, y_new)
            ev = _event_name(model, y_new)
            if grid is not None:
                dense = solver.dense_output()
                while gi < len(grid) and grid[gi] <= t_new:
                    tg = grid[gi]
                    times.append(tg)
                    states.append(dense(tg))
                    controls.append(np.array(profile.interval_value(k, tg), dtype=float))
                    gi += 1
            if ev is not None:
                t_new, y_new = _locate_event(model, solver.dense_output(), solver.t_old, t_new)
                event = ev
            if grid is None or ev is not None or t_new >= b:
                times.append(t_new)
                states.append(np.array(y_new))
                controls.append(np.array(profile.interval_value(k, t_new), dtype=float))
            if ev is not None:
                break
        stats["rhs_evals"] += solver.nfev
        y = np.array(solver.y)
        if event is not None:
            break
    return Trajectory(np.array(times), np.array(states), np.array(controls), profile, model,
                      event, stats)


def _locate_event(model, dense, t_lo, t_hi, iters=60):
    """Bisect for the first time where the event function turns on inside a step."""
    for _ in range(iters):
        mid = 0.5 * (t_lo + t_hi)
        if _event_name(model, dense(mid)) is None:
            t_lo = mid
        else:
            t_hi = mid
    return t_hi, dense(t_hi)


def rk4_nodes(model: CrystallizerModel, y0, profile: ControlProfile, steps, time_scale=1.0):
    """Fixed-step RK4 over the whole profile, returning every node.

    ``steps`` is an int (steps per interval) or a sequence with one count per
    interval.  If ``time_scale`` is not 1 the profile lives on a normalized
    horizon and real time is ``time_scale * tau`` (``time_scale`` may be a batch
    array, which is how free final times are handled).

    Returns ``(tau, Y, U)`` with ``Y`` of shape ``(n_nodes, n_state, *batch)`` and
    ``U`` of shape ``(n_nodes, 2, *batch)``.
    """
    y = np.array(y0, dtype=float)
    batch = profile.batch_shape or np.shape(time_scale)
    if y.ndim == 1 and batch:
        y = np.broadcast_to(y.reshape((-1,) + (1,) * len(batch)), y.shape + batch).copy()
    if np.ndim(steps) == 0:
        steps = [int(steps)] * profile.n_intervals
    tau = [0.0]
    Y = [y.copy()]
    U = [np.stack(np.broadcast_arrays(*profile.interval_value(0, 0.0), y[0]))[:2]]
    scale = time_scale
    for k in range(profile.n_intervals):
        a, b = profile.breakpoints[k], profile.breakpoints[k + 1]
        n = steps[k]
        h = (b - a) / n
        for i in range(n):
            t = a + i * h
            u0 = profile.interval_value(k, t)
            um = profile.interval_value(k, t + 0.5 * h)
            u1 = profile.interval_value(k, t + h)
            k1 = scale * model.rhs(y, *u0)
            k2 = scale * model.rhs(y + 0.5 * h * k1, *um)
            k3 = scale * model.rhs(y + 0.5 * h * k2, *um)
            k4 = scale * model.rhs(y + h * k3, *u1)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            tau.append(b if i == n - 1 else t + h)
            Y.append(y)
            U.append(np.stack(np.broadcast_arrays(*u1, y[0]))[:2])
    return np.array(tau), np.array(Y), np.array(U)


def _integrate_rk4(model, y0, profile, tf, opts):
    if tf < profile.tf:
        bp = profile.breakpoints
        keep = bp[bp < tf]
        values_T = profile.T_sp[: keep.size + (profile.interpolation == "linear")]
        values_q = profile.q_H2O[: keep.size + (profile.interpolation == "linear")]
        if profile.interpolation == "linear":
            Tt, qt = profile.sample(tf)
            values_T = np.concatenate([profile.T_sp[: keep.size], [Tt]])
            values_q = np.concatenate([profile.q_H2O[: keep.size], [qt]])
        profile = ControlProfile(np.append(keep, tf), values_T, values_q,
                                 profile.interpolation, profile.bounds)
    steps = [max(1, math.ceil((b - a) / opts.rk4_step - 1e-9))
             for a, b in zip(profile.breakpoints[:-1], profile.breakpoints[1:])]
    tau, Y, U = rk4_nodes(model, y0, profile, steps)
    if not np.all(np.isfinite(Y)):
        raise StepSizeUnderflow("RK4 produced non-finite states; reduce rk4_step")
    if opts.check_invariants:
        for t, y in zip(tau, Y):
            _check_state(model, t, y)
    event = None
    for i, y in enumerate(Y):
        event = _event_name(model, y)
        if event is not None:
            tau, Y, U = tau[: i + 1], Y[: i + 1], U[: i + 1]
            break
    return Trajectory(tau, Y, U, profile, model, event,
                      {"steps": int(sum(steps)), "rhs_evals": 4 * int(sum(steps))})


def monitor_path_constraints(traj: Trajectory, T_bounds=(0.0, 70.0), V_bounds=None):
    """Maximum violation and first violation time of each path constraint.

    Magnitudes are in the constraint's own units (m^3, degC, kg/kg).  A
    feasible trajectory reports zeros and ``None`` times.
    """
    c = traj.model.constants
    d = traj.derived()
    V_lo, V_hi = V_bounds or (0.0, c.V_max)
    T = traj.column("T")
    ca = traj.column("c_alpha")
    checks = {
        "V_max": d["V"] - V_hi,
        "V_min": V_lo - d["V"],
        "T_max": T - T_bounds[1],
        "T_min": T_bounds[0] - T,
        "supersaturation": d["c_sat"] - ca,
    }
    report = {}
    for name, g in checks.items():
        viol = np.maximum(g, 0.0)
        idx = np.flatnonzero(viol > 0)
        report[name] = {"max": float(viol.max()),
                        "first_time": float(traj.times[idx[0]]) if idx.size else None}
    return report
