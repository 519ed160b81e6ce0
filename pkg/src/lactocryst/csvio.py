"""CSV emission and reading.  Floats are written with 17 significant digits so a
write/read round trip reproduces every value bit for bit."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from lactocryst.integrator import Trajectory
from lactocryst.model import state_names

DERIVED_COLUMNS = ("V", "A", "B", "G", "c_sat", "d43", "CV")


def trajectory_columns(n_moments=5):
    return ("t",) + state_names(n_moments) + DERIVED_COLUMNS


def fmt(x):
    return f"{float(x):.17g}"


def write_table(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, int, np.floating, np.integer))
                        and not isinstance(v, bool) else v for v in row])
    return path


def read_table(path):
    """``(header, float array)``; lines starting with ``#`` are skipped."""
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    data = np.array([[float(v) for v in row] for row in reader if row], dtype=float)
    return header, data.reshape(-1, len(header))


def write_trajectory(traj: Trajectory, path):
    """Columns: t, all states, V, A, B, G, c_sat, d43, CV (fixed order)."""
    d = traj.derived()
    cols = [traj.times] + [traj.states[:, i] for i in range(traj.states.shape[1])]
    cols += [np.broadcast_to(d[name], traj.times.shape) for name in DERIVED_COLUMNS]
    return write_table(path, trajectory_columns(traj.model.n_moments), np.column_stack(cols))


def write_profile_samples(profile, times, path):
    """Control inputs sampled on ``times``: columns t, T_sp, q_H2O (kg/s)."""
    T, q = profile.sample_many(times)
    return write_table(path, ("t", "T_sp", "q_H2O"), np.column_stack([times, T, q]))
