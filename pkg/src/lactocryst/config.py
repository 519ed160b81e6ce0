"""Experiment configuration: a TOML file with one table per concern.

Every key has a default (the tabulated constants and the study-1 initial
state) except ``kinetics.E_act``, which must be given.  Unknown tables or keys
are rejected with the offending line number.  ``dump_config`` writes the fully
resolved configuration back out; each run stores that copy next to its results.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import tomli

from lactocryst.exceptions import ConfigurationError
from lactocryst.integrator import IntegratorOptions
from lactocryst.kinetics import KineticParams
from lactocryst.model import (TABLE3_MOMENTS, CrystallizerModel, PhysicalConstants,
                              ProcessState, slurry_volume)
from lactocryst.policies import (KG_PER_H, ControlBounds, ControlProfile, constant_policy,
                                 linear_cooling_policy)

FEED_UNITS = {"kg/h": KG_PER_H, "kg/s": 1.0}
SCENARIOS = ("d43", "nucleation", "cv", "seed", "moment-match")


@dataclass(frozen=True)
class RunSection:
    output_dir: str | None = None
    tf: float = 11000.0
    dense_output_dt: float = 60.0
    feed_rate_unit: str = "kg/h"  # unit of every feed rate in this file


@dataclass(frozen=True)
class InitialStateSection:
    mu: tuple = TABLE3_MOMENTS
    m_H2O: float = 0.92
    c_alpha: float = 0.359
    c_beta: float = 0.521
    T: float = 70.0
    T_jacket: float = 20.0
    m_cry: float | None = None  # unset: k_v * rho_cry * V * mu3


@dataclass(frozen=True)
class PolicySection:
    kind: str = "constant"  # constant | linear | optimal
    T_sp: float = 15.0
    T_start: float = 15.0
    T_end: float = 0.0
    q_H2O: float = 0.0056
    solution: str | None = None  # solution file used by kind = "optimal"


@dataclass(frozen=True)
class OcpSection:
    scenario: str = "d43"
    seed_objective: str = "d43"
    nucleation_variant: str = "terminal"  # terminal | integral
    n_knots: int = 20
    interpolation: str = "linear"
    engine: str = "projected_gradient"
    max_iter: int = 300
    max_outer: int = 8
    rho0: float = 100.0
    fd_step: float = 1e-6
    rk4_step: float = 20.0
    feas_tol: float = 1e-6
    T_sp_min: float = 0.0
    T_sp_max: float = 40.0
    q_max: float = 0.1
    t_max: float = 11000.0
    tf_min: float = 1000.0
    target: tuple | None = None  # unset: log-normal with the two parameters below
    target_median: float = 5e-5
    target_sigma: float = 0.3
    weights: tuple | None = None
    seed_log_span: float = math.log(10.0)
    realizability_margin: float = 1e-3
    warm_start: str | None = None


@dataclass(frozen=True)
class MaxEntSection:
    moments: tuple | None = None  # unset: the initial seed moments
    tol: float = 1e-10
    max_iter: int = 200
    n_nodes: int = 200
    tail_tol: float = 1e-10
    density_points: int = 400


@dataclass(frozen=True)
class PbeSection:
    nodes: int = 2000
    L_max: float = 8e-3
    spacing: str = "logarithmic"
    L_cut: float | None = 1e-3
    scheme: str = "upwind"
    stepper: str = "ssprk3"
    cfl: float = 0.9
    dt: float | None = None
    dt_max: float = 5.0
    output_dt: float = 100.0
    snapshot_times: tuple = ()
    threshold_low: float = 0.01  # mu_0..mu_3
    threshold_high: float = 0.03  # mu_4, mu_5
    product_band: tuple = (1e-5, 1e-4)  # m; crystal-volume fraction inside it is reported


@dataclass(frozen=True)
class ExperimentConfig:
    kinetics: KineticParams
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    initial_state: InitialStateSection = field(default_factory=InitialStateSection)
    run: RunSection = field(default_factory=RunSection)
    policy: PolicySection = field(default_factory=PolicySection)
    integrator: IntegratorOptions = field(default_factory=IntegratorOptions)
    ocp: OcpSection = field(default_factory=OcpSection)
    maxent: MaxEntSection = field(default_factory=MaxEntSection)
    pbe: PbeSection = field(default_factory=PbeSection)

    @property
    def feed_scale(self):
        return FEED_UNITS[self.run.feed_rate_unit]

    def state0(self) -> ProcessState:
        i = self.initial_state
        s = ProcessState(tuple(float(m) for m in i.mu), i.m_H2O, i.c_alpha, i.c_beta, 0.0,
                         i.T, i.T_jacket)
        if i.m_cry is not None:
            return s.replace(m_cry=i.m_cry)
        c = self.constants
        return s.replace(m_cry=float(c.k_v * c.rho_cry * slurry_volume(s, c) * i.mu[3]))

    def model(self) -> CrystallizerModel:
        return CrystallizerModel.for_initial_state(self.kinetics, self.constants, self.state0())

    def bounds(self) -> ControlBounds:
        o = self.ocp
        return ControlBounds(o.T_sp_min, o.T_sp_max, 0.0, o.q_max * self.feed_scale)

    def heuristic(self, kind, tf=None) -> ControlProfile:
        p = self.policy
        tf = self.run.tf if tf is None else tf
        q = p.q_H2O * self.feed_scale
        if kind == "constant":
            return constant_policy(p.T_sp, q, tf, self.bounds())
        if kind == "linear":
            return linear_cooling_policy(p.T_start, p.T_end, q, tf, self.bounds())
        raise ConfigurationError(f"no heuristic policy named {kind!r}")


SECTION_TYPES = {f.name: f for f in fields(ExperimentConfig)}


def _section_class(name):
    return {"kinetics": KineticParams, "constants": PhysicalConstants,
            "initial_state": InitialStateSection, "run": RunSection, "policy": PolicySection,
            "integrator": IntegratorOptions, "ocp": OcpSection, "maxent": MaxEntSection,
            "pbe": PbeSection}[name]


def _line_of(text, section, key=None):
    """1-based line of ``[section]`` (or of ``key`` inside it), or None."""
    current = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.-]+)\s*\]", line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(
                rf"^{re.escape(key)}\s*=", line):
            return no
    return None


def _coerce(cls, name, value, line):
    """Check ``value`` against the annotation of ``cls.name``."""
    ann = str({f.name: f.type for f in fields(cls)}[name])
    where = f"{cls.__name__}.{name}"
    if value is None:
        return None
    if "tuple" in ann:
        if not isinstance(value, list):
            raise ConfigurationError(f"{where} must be an array", line)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigurationError(f"{where} must hold numbers", line)
        return tuple(float(v) for v in value)
    if ann.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be true or false", line)
        return value
    if ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer", line)
        return value
    if ann.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number", line)
        return float(value)
    if ann.startswith("str"):
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string", line)
        return value
    return value


def parse_config(text, overrides=None, base_dir=None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from TOML text plus dotted overrides
    (``{"ocp.scenario": "cv"}``)."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigurationError(f"malformed configuration: {exc}",
                                 int(m.group(1)) if m else None) from None
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigurationError(f"override {dotted!r} must look like section.key")
        raw.setdefault(section, {})[key] = value
    sections = {}
    for name, table in raw.items():
        if name not in SECTION_TYPES:
            raise ConfigurationError(f"unknown table [{name}]", _line_of(text, name))
        if not isinstance(table, dict):
            raise ConfigurationError(f"{name} must be a table", _line_of(text, name))
        cls = _section_class(name)
        known = {f.name for f in fields(cls)}
        values = {}
        for key, value in table.items():
            line = _line_of(text, name, key)
            if key not in known:
                raise ConfigurationError(f"unknown key {key!r} in [{name}]", line)
            values[key] = _coerce(cls, key, value, line)
        sections[name] = (cls, values)
    if "kinetics" not in sections or "E_act" not in sections["kinetics"][1]:
        raise ConfigurationError("kinetics.E_act is mandatory (no tabulated value exists)",
                                 _line_of(text, "kinetics"))
    built = {}
    for name, (cls, values) in sections.items():
        try:
            built[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"[{name}]: {exc}", _line_of(text, name)) from None
    cfg = ExperimentConfig(**built)
    _validate(cfg, text)
    if base_dir is not None:
        cfg = _resolve_paths(cfg, Path(base_dir))
    return cfg


def _validate(cfg: ExperimentConfig, text):
    checks = [
        ("run", "feed_rate_unit", cfg.run.feed_rate_unit in FEED_UNITS,
         f"must be one of {sorted(FEED_UNITS)}"),
        ("run", "tf", cfg.run.tf >= 0, "must be non-negative"),
        ("policy", "kind", cfg.policy.kind in ("constant", "linear", "optimal"),
         "must be constant, linear or optimal"),
        ("ocp", "scenario", cfg.ocp.scenario in SCENARIOS, f"must be one of {SCENARIOS}"),
        ("ocp", "seed_objective", cfg.ocp.seed_objective in ("d43", "nucleation", "cv"),
         "must be d43, nucleation or cv"),
        ("ocp", "nucleation_variant", cfg.ocp.nucleation_variant in ("terminal", "integral"),
         "must be terminal or integral"),
        ("ocp", "interpolation", cfg.ocp.interpolation in ("linear", "constant"),
         "must be linear or constant"),
        ("ocp", "engine", cfg.ocp.engine in ("projected_gradient", "nelder_mead", "lbfgsb"),
         "must be projected_gradient, nelder_mead or lbfgsb"),
        ("initial_state", "mu", len(cfg.initial_state.mu) == 6, "needs mu_0..mu_5"),
        ("pbe", "nodes", cfg.pbe.nodes >= 100, "must be at least 100"),
        ("pbe", "product_band", len(cfg.pbe.product_band) == 2
         and 0 <= cfg.pbe.product_band[0] < cfg.pbe.product_band[1], "needs 0 <= lower < upper"),
    ]
    for section, key, ok, msg in checks:
        if not ok:
            raise ConfigurationError(f"{section}.{key} {msg}", _line_of(text, section, key))


def _resolve_paths(cfg, base):
    def fix(p):
        return None if p is None else str((base / p).resolve()) if not Path(p).is_absolute() else p
    return replace(cfg, policy=replace(cfg.policy, solution=fix(cfg.policy.solution)),
                   ocp=replace(cfg.ocp, warm_start=fix(cfg.ocp.warm_start)),
                   run=replace(cfg.run, output_dir=fix(cfg.run.output_dir)))


def load_config(path, overrides=None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration {path}: {exc}") from None
    return parse_config(text, overrides, base_dir=path.parent)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        if isinstance(v, float) and math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot render {v!r} as TOML")


def dump_config(cfg: ExperimentConfig) -> str:
    """Resolved configuration as TOML text (unset optional keys appear as comments)."""
    out = []
    for f in fields(ExperimentConfig):
        section = getattr(cfg, f.name)
        out.append(f"[{f.name}]")
        for sf in fields(section):
            v = getattr(section, sf.name)
            out.append(f"# {sf.name} = (unset)" if v is None
                       else f"{sf.name} = {_toml_value(v)}")
        out.append("")
    return "\n".join(out)


def default_config(E_act=150000.0) -> ExperimentConfig:
    """Tabulated defaults; ``E_act`` is a placeholder that real runs must replace."""
    return ExperimentConfig(kinetics=KineticParams(E_act=E_act))
