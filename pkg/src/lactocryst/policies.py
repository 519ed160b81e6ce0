"""Open-loop control profiles for set-point temperature and water feed.

Feed rates are kg/s internally; ``KG_PER_H`` converts the usual kg/h figures.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lactocryst.exceptions import BoundViolation

KG_PER_H = 1.0 / 3600.0
INTERPOLATIONS = ("constant", "linear")


@dataclass(frozen=True)
class ControlBounds:
    T_sp_min: float = 0.0
    T_sp_max: float = 40.0
    q_min: float = 0.0
    q_max: float = 0.1 * KG_PER_H

    def lower(self):
        return np.array([self.T_sp_min, self.q_min])

    def upper(self):
        return np.array([self.T_sp_max, self.q_max])


class ControlProfile:
    """Piecewise-constant or piecewise-linear inputs on ``[0, tf]``.

    ``breakpoints`` holds K increasing times starting at 0.  Piecewise-constant
    profiles carry one value per interval (K-1), piecewise-linear ones one value
    per breakpoint (K).  Value arrays may carry a trailing batch axis so one
    profile object can describe many perturbed candidates at once.

    Piecewise-constant sampling is left-continuous: at an interior breakpoint
    the value of the interval that ends there is returned.
    """

    def __init__(self, breakpoints, T_sp, q_H2O, interpolation="linear",
                 bounds: ControlBounds | None = None, clip=False):
        if interpolation not in INTERPOLATIONS:
            raise ValueError(f"interpolation must be one of {INTERPOLATIONS}")
        bp = np.asarray(breakpoints, dtype=float)
        T_sp = np.array(T_sp, dtype=float)
        q = np.array(q_H2O, dtype=float)
        if bp.ndim != 1 or bp.size < 2 or bp[0] != 0.0 or np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing and start at 0")
        n_values = bp.size - 1 if interpolation == "constant" else bp.size
        if T_sp.shape[0] != n_values or q.shape[0] != n_values:
            raise ValueError(f"{interpolation} profile with {bp.size} breakpoints needs "
                             f"{n_values} values per control")
        if np.any(~np.isfinite(T_sp)) or np.any(~np.isfinite(q)):
            raise ValueError("control values must be finite")
        self.bounds = bounds or ControlBounds()
        b = self.bounds
        self.clipped = 0
        outside = ((T_sp < b.T_sp_min) | (T_sp > b.T_sp_max) | (q < b.q_min) | (q > b.q_max))
        if np.any(outside):
            if not clip:
                raise BoundViolation(f"{int(outside.sum())} control values outside "
                                     f"T_sp in [{b.T_sp_min}, {b.T_sp_max}], "
                                     f"q in [{b.q_min}, {b.q_max}]")
            self.clipped = int(outside.sum())
            T_sp = np.clip(T_sp, b.T_sp_min, b.T_sp_max)
            q = np.clip(q, b.q_min, b.q_max)
        self.breakpoints = bp
        self.T_sp = T_sp
        self.q_H2O = q
        self.interpolation = interpolation

    @property
    def tf(self):
        return float(self.breakpoints[-1])

    @property
    def n_intervals(self):
        return self.breakpoints.size - 1

    @property
    def batch_shape(self):
        return self.T_sp.shape[1:]

    def __repr__(self):
        return (f"ControlProfile({self.interpolation}, {self.breakpoints.size} breakpoints, "
                f"tf={self.tf:g} s, batch={self.batch_shape})")

    def interval_value(self, k, t):
        """Inputs at time ``t`` using interval ``k``'s formula (no breakpoint lookup)."""
        if self.interpolation == "constant":
            return self.T_sp[k], self.q_H2O[k]
        t0, t1 = self.breakpoints[k], self.breakpoints[k + 1]
        w = (t - t0) / (t1 - t0)
        return (self.T_sp[k] + w * (self.T_sp[k + 1] - self.T_sp[k]),
                self.q_H2O[k] + w * (self.q_H2O[k + 1] - self.q_H2O[k]))

    def interval_of(self, t):
        """Index of the interval owning ``t`` (left-continuous convention)."""
        if t < 0 or t > self.tf * (1 + 1e-12):
            raise ValueError(f"t = {t} outside [0, {self.tf}]")
        k = int(np.searchsorted(self.breakpoints, t, side="left")) - 1
        return min(max(k, 0), self.n_intervals - 1)

    def sample(self, t):
        """``(T_sp, q_H2O)`` at a scalar time."""
        return self.interval_value(self.interval_of(t), t)

    def sample_many(self, times):
        out = [self.sample(float(t)) for t in np.atleast_1d(times)]
        return np.array([o[0] for o in out]), np.array([o[1] for o in out])

    def cumulative_feed(self, times):
        """Exact integral of q_H2O from 0 to each time (kg)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        bp = self.breakpoints
        dt = np.diff(bp)
        if self.interpolation == "constant":
            per_interval = self.q_H2O * dt.reshape((-1,) + (1,) * (self.q_H2O.ndim - 1))
        else:
            mean = 0.5 * (self.q_H2O[1:] + self.q_H2O[:-1])
            per_interval = mean * dt.reshape((-1,) + (1,) * (mean.ndim - 1))
        cum = np.concatenate([np.zeros((1,) + per_interval.shape[1:]),
                              np.cumsum(per_interval, axis=0)])
        out = []
        for t in times:
            k = self.interval_of(t)
            t0 = bp[k]
            if self.interpolation == "constant":
                part = self.q_H2O[k] * (t - t0)
            else:
                qt = self.interval_value(k, t)[1]
                part = 0.5 * (self.q_H2O[k] + qt) * (t - t0)
            out.append(cum[k] + part)
        return np.array(out)

    def with_horizon(self, tf):
        """Same knot values stretched onto ``[0, tf]``."""
        return ControlProfile(self.breakpoints * (tf / self.tf), self.T_sp, self.q_H2O,
                              self.interpolation, self.bounds)

    def member(self, i):
        """Extract batch member ``i`` as an unbatched profile."""
        return ControlProfile(self.breakpoints, self.T_sp[:, i], self.q_H2O[:, i],
                              self.interpolation, self.bounds)

    def knot_vector(self):
        """Decision-vector form ``[T_sp values..., q values...]``."""
        return np.concatenate([self.T_sp, self.q_H2O])

    def to_csv(self, path):
        """Write columns ``t, T_sp, q_H2O`` (q in kg/s) with 17 significant digits."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            fh.write(f"# interpolation={self.interpolation}\n")
            w = csv.writer(fh)
            w.writerow(["t", "T_sp", "q_H2O"])
            n = self.T_sp.shape[0]
            for i, t in enumerate(self.breakpoints):
                j = min(i, n - 1)
                w.writerow([f"{t:.17g}", f"{self.T_sp[j]:.17g}", f"{self.q_H2O[j]:.17g}"])
        return path

    @classmethod
    def from_csv(cls, path, bounds: ControlBounds | None = None):
        interpolation = "linear"
        rows = []
        with Path(path).open() as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    if "interpolation=" in line:
                        interpolation = line.split("interpolation=", 1)[1].strip()
                    continue
                if line.startswith("t,"):
                    continue
                rows.append([float(x) for x in line.split(",")])
        arr = np.array(rows)
        if interpolation == "constant":
            return cls(arr[:, 0], arr[:-1, 1], arr[:-1, 2], "constant", bounds)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], "linear", bounds)


def constant_policy(T_sp, q_H2O, tf, bounds: ControlBounds | None = None):
    """Fixed set-point and feed for the whole batch."""
    return ControlProfile([0.0, tf], [T_sp], [q_H2O], "constant", bounds)


def linear_cooling_policy(T_start, T_end, q_H2O, tf, bounds: ControlBounds | None = None):
    """Set-point ramping linearly from ``T_start`` to ``T_end`` at constant feed."""
    if T_start < T_end:
        raise ValueError("linear cooling needs T_start >= T_end")
    return ControlProfile([0.0, tf], [T_start, T_end], [q_H2O, q_H2O], "linear", bounds)


def knot_times(n_knots, tf, interpolation="linear"):
    """Breakpoints for ``n_knots`` values per control."""
    if interpolation == "linear":
        if n_knots < 2:
            raise ValueError("piecewise-linear profiles need at least two knots")
        return np.linspace(0.0, tf, n_knots)
    return np.linspace(0.0, tf, n_knots + 1)


def parameterized_policy(vector, n_knots, tf, interpolation="linear",
                         bounds: ControlBounds | None = None):
    """Profile whose knot values are ``vector = [T_sp_1..T_sp_n, q_1..q_n]``.

    Out-of-bound values are clipped; the count is kept in ``profile.clipped``.
    ``vector`` may be 2-D (``2*n_knots`` x batch).
    """
    v = np.asarray(vector, dtype=float)
    if v.shape[0] != 2 * n_knots:
        raise ValueError(f"expected {2 * n_knots} knot values, got {v.shape[0]}")
    if np.any(np.isnan(v)):
        raise ValueError("NaN in control vector")
    return ControlProfile(knot_times(n_knots, tf, interpolation), v[:n_knots], v[n_knots:],
                          interpolation, bounds, clip=True)


def resample_profile(profile: ControlProfile, n_knots, tf=None, interpolation="linear"):
    """Knot values of ``profile`` sampled on a regular knot grid (warm starts)."""
    tf = profile.tf if tf is None else tf
    times = knot_times(n_knots, tf, interpolation)
    src = profile.with_horizon(tf) if tf != profile.tf else profile
    if interpolation == "linear":
        T, q = src.sample_many(times)
    else:
        mids = 0.5 * (times[1:] + times[:-1])
        T, q = src.sample_many(mids)
    return parameterized_policy(np.concatenate([T, q]), n_knots, tf, interpolation,
                                profile.bounds)
