"""Experiment configuration: sections of key = value lines, strictly typed.

Unknown keys are rejected, every value is parsed against a per-key
converter, and cross-field contracts (discount-step products, horizon
orderings) are enforced at parse time so pipelines never start on a bad
configuration.  Arrays use bracket syntax (``[1.0, 2.0]``).
"""

from __future__ import annotations

import ast
import configparser
from dataclasses import dataclass, field

import numpy as np

from .bsde import Driver, RegressionBasis, driver_constant, driver_from_state, driver_linear
from .control import ControlProblem
from .discounted import MAX_ALPHA_DT, Numerics
from .forward_sde import (
    PeriodicCoefficients,
    constant_drift,
    constant_matrix,
    saturated_drift,
    sinusoidal_diagonal,
    sinusoidal_drift,
    zero_drift,
)
from .levy_model import LevyModel
from .powerplant import Scenario, SparkSpreadModel, spread_uncertainty


class ConfigError(ValueError):
    pass


def _cv_int(v, key):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{key}: expected integer, got {v!r}")
    return v


def _cv_float(v, key):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key}: expected number, got {v!r}")
    return float(v)


def _cv_bool(v, key):
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "false", "yes", "no", "on", "off"):
        return v.lower() in ("true", "yes", "on")
    raise ConfigError(f"{key}: expected boolean, got {v!r}")


def _cv_str(v, key):
    return str(v)


def _cv_vector(v, key):
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected numeric vector, got {v!r}") from None
    return np.atleast_1d(arr)


def _cv_matrix(v, key):
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected numeric matrix, got {v!r}") from None
    return np.atleast_2d(arr)


def _cv_list(v, key):
    if not isinstance(v, (list, tuple)):
        raise ConfigError(f"{key}: expected a bracketed list, got {v!r}")
    return list(v)


# section -> key -> (converter, required)
SCHEMA = {
    "model": {
        "dim": (_cv_int, True),
        "diffusion_cov": (_cv_matrix, True),
        "jump_marks": (_cv_matrix, False),
        "jump_intensities": (_cv_vector, False),
    },
    "coefficients": {
        "period": (_cv_float, True),
        "a_family": (_cv_str, True),
        "a_matrix": (_cv_matrix, False),
        "a_base": (_cv_vector, False),
        "a_amplitude": (_cv_vector, False),
        "f_family": (_cv_str, True),
        "f_value": (_cv_vector, False),
        "f_base": (_cv_vector, False),
        "f_amplitude": (_cv_vector, False),
        "f_scale": (_cv_float, False),
        "f_width": (_cv_float, False),
        "g_family": (_cv_str, True),
        "g_matrix": (_cv_matrix, False),
        "g_base": (_cv_vector, False),
        "g_amplitude": (_cv_vector, False),
        "f_sup": (_cv_float, False),
        "stability_mu": (_cv_float, False),
        "stability_m": (_cv_float, False),
        "ginv_bound": (_cv_float, False),
    },
    "simulation": {
        "x0": (_cv_vector, True),
        "t_start": (_cv_float, False),
        "t_end": (_cv_float, True),
        "dt": (_cv_float, True),
        "n_paths": (_cv_int, True),
        "seed": (_cv_int, True),
        "snapshot_stride": (_cv_int, False),
        "store_increments": (_cv_bool, False),
    },
    "ergodicity": {
        "x": (_cv_vector, False),
        "y": (_cv_vector, False),
        "psis": (_cv_list, False),
        "coupling_horizon": (_cv_float, False),
        "coupling_dt": (_cv_float, False),
        "coupling_paths": (_cv_int, False),
        "ball_center": (_cv_vector, False),
        "ball_radius": (_cv_float, False),
        "hitting_x": (_cv_vector, False),
        "hitting_horizon": (_cv_float, False),
        "hitting_dt": (_cv_float, False),
        "hitting_paths": (_cv_int, False),
        "burn_in": (_cv_float, False),
        "harvest_horizon": (_cv_float, False),
        "harvest_dt": (_cv_float, False),
        "thinning": (_cv_int, False),
    },
    "driver": {
        "family": (_cv_str, True),
        "value": (_cv_float, False),
        "power": (_cv_int, False),
        "scale": (_cv_float, False),
        "coef_x": (_cv_vector, False),
        "coef_z": (_cv_vector, False),
        "coef_u": (_cv_vector, False),
        "const": (_cv_float, False),
        "zero_bound": (_cv_float, False),
        "lipschitz_k": (_cv_float, False),
    },
    "bsde": {
        "terminal": (_cv_str, False),
        "terminal_value": (_cv_float, False),
        "degree": (_cv_int, False),
        "basis": (_cv_str, False),
        "t_end": (_cv_float, True),
        "dt": (_cv_float, True),
        "n_paths": (_cv_int, True),
        "n_batches": (_cv_int, False),
        "pide_check": (_cv_bool, False),
        "space_lo": (_cv_float, False),
        "space_hi": (_cv_float, False),
        "space_points": (_cv_int, False),
    },
    "discounted": {
        "alpha": (_cv_float, True),
        "epsilon_trunc": (_cv_float, True),
        "s": (_cv_float, False),
        "x": (_cv_vector, True),
        "dt": (_cv_float, True),
        "n_paths": (_cv_int, True),
        "degree": (_cv_int, False),
        "basis": (_cv_str, False),
        "n_batches": (_cv_int, False),
        "horizons": (_cv_vector, False),
    },
    "ebsde": {
        "alpha_schedule": (_cv_vector, True),
        "probes": (_cv_matrix, True),
        "dt": (_cv_float, True),
        "n_paths": (_cv_int, True),
        "degree": (_cv_int, False),
        "basis": (_cv_str, False),
        "n_batches": (_cv_int, False),
        "epsilon_trunc": (_cv_float, False),
        "growth_tol": (_cv_float, False),
        "periodicity_tol": (_cv_float, False),
    },
    "control": {
        "labels": (_cv_list, True),
        "r_shifts": (_cv_matrix, True),
        "gamma": (_cv_matrix, False),
        "cost": (_cv_str, True),
        "penalties": (_cv_vector, False),
        "l_bound": (_cv_float, True),
        "eval_horizon": (_cv_float, False),
        "eval_dt": (_cv_float, False),
        "eval_paths": (_cv_int, False),
        "eval_burn_in": (_cv_float, False),
    },
    "powerplant": {
        "theta_base": (_cv_float, True),
        "theta_amp": (_cv_float, False),
        "kappa_base": (_cv_float, False),
        "kappa_amp": (_cv_float, False),
        "vol": (_cv_float, True),
        "discount_rate": (_cv_float, True),
        "lifetimes": (_cv_vector, True),
        "scenarios": (_cv_list, False),
        "payoff_bound": (_cv_float, True),
    },
    "output": {
        "dir": (_cv_str, False),
        "write_ensemble": (_cv_bool, False),
        "summary_stride": (_cv_int, False),
    },
}

# Sections each subcommand must have (beyond what it may optionally use).
REQUIRED_SECTIONS = {
    "simulate": ["model", "coefficients", "simulation"],
    "ergodicity": ["model", "coefficients", "simulation", "ergodicity"],
    "bsde": ["model", "coefficients", "simulation", "driver", "bsde"],
    "discounted": ["model", "coefficients", "driver", "discounted"],
    "ebsde": ["model", "coefficients", "driver", "ebsde"],
    "control": ["model", "coefficients", "control", "ebsde"],
    "powerplant": ["model", "powerplant", "ebsde"],
}


@dataclass
class ExperimentConfig:
    """Parsed and validated configuration sections."""

    sections: dict = field(default_factory=dict)
    source_text: str = ""

    def section(self, name: str) -> dict:
        if name not in self.sections:
            raise ConfigError(f"missing required section [{name}]")
        return self.sections[name]

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    # -- constructors -----------------------------------------------------

    def build_model(self) -> LevyModel:
        sec = self.section("model")
        dim = sec["dim"]
        marks = sec.get("jump_marks")
        intensities = sec.get("jump_intensities")
        if (marks is None) != (intensities is None):
            raise ConfigError("jump_marks and jump_intensities must be given together")
        pairs = []
        if marks is not None:
            if marks.shape[0] != len(intensities):
                raise ConfigError("jump_marks and jump_intensities length mismatch")
            pairs = [(marks[i], float(intensities[i])) for i in range(marks.shape[0])]
        return LevyModel(dim=dim, diffusion_cov=sec["diffusion_cov"], jump_marks=tuple(pairs))

    def build_coefficients(self) -> PeriodicCoefficients:
        sec = self.section("coefficients")
        dim = self.section("model")["dim"]
        period = sec["period"]

        fam = sec["a_family"]
        if fam == "constant":
            a = constant_matrix(_need(sec, "a_matrix", "coefficients"))
        elif fam == "sinusoidal_diagonal":
            a = sinusoidal_diagonal(
                _need(sec, "a_base", "coefficients"), _need(sec, "a_amplitude", "coefficients"), period
            )
        else:
            raise ConfigError(f"coefficients.a_family: unknown family {fam!r}")

        fam = sec["f_family"]
        if fam == "zero":
            f = zero_drift()
        elif fam == "constant":
            f = constant_drift(_need(sec, "f_value", "coefficients"))
        elif fam == "sinusoidal":
            f = sinusoidal_drift(
                _need(sec, "f_base", "coefficients"), _need(sec, "f_amplitude", "coefficients"), period
            )
        elif fam == "saturated":
            f = saturated_drift(_need(sec, "f_scale", "coefficients"), sec.get("f_width", 1.0))
        else:
            raise ConfigError(f"coefficients.f_family: unknown family {fam!r}")

        fam = sec["g_family"]
        if fam == "constant":
            g = constant_matrix(_need(sec, "g_matrix", "coefficients"))
        elif fam == "sinusoidal_diagonal":
            g = sinusoidal_diagonal(
                _need(sec, "g_base", "coefficients"), _need(sec, "g_amplitude", "coefficients"), period
            )
        else:
            raise ConfigError(f"coefficients.g_family: unknown family {fam!r}")

        ts = np.linspace(0.0, period, 65)
        probe = np.random.Generator(np.random.Philox(key=0xFACADE)).uniform(-3, 3, (16, dim))
        f_sup = sec.get("f_sup")
        if f_sup is None:
            f_sup = max(np.linalg.norm(np.broadcast_to(f(t, probe), probe.shape), axis=1).max() for t in ts)
            f_sup = float(f_sup) * (1 + 1e-9) + 1e-12
        mu = sec.get("stability_mu")
        if mu is None:
            worst = max(np.linalg.eigvalsh(0.5 * (a(t) + a(t).T)).max() for t in ts)
            if worst >= 0:
                raise ConfigError("coefficients: A(t) is not stable; supply a stable matrix")
            mu = -float(worst) * (1 - 1e-9)
        ginv = sec.get("ginv_bound")
        if ginv is None:
            ginv = max(1.0 / np.linalg.svd(g(t), compute_uv=False).min() for t in ts)
            ginv = float(ginv) * (1 + 1e-9)
        return PeriodicCoefficients(
            period=period, A=a, F=f, G=g, f_sup=f_sup,
            stability_mu=mu, stability_M=sec.get("stability_m", 1.0), ginv_bound=ginv,
        )

    def build_driver(self) -> Driver:
        sec = self.section("driver")
        fam = sec["family"]
        if fam == "constant":
            return driver_constant(_need(sec, "value", "driver"))
        if fam == "state_power":
            p = sec.get("power", 2)
            zb = _need(sec, "zero_bound", "driver")
            return driver_from_state(lambda x: x[:, 0] ** p, zero_bound=zb)
        if fam == "bounded_cos":
            s = sec.get("scale", 1.0)
            return driver_from_state(lambda x: s * np.cos(x[:, 0]), zero_bound=abs(s))
        if fam == "spread_positive":
            zb = _need(sec, "zero_bound", "driver")
            return driver_from_state(lambda x: np.maximum(x[:, 0], 0.0), zero_bound=zb)
        if fam == "linear":
            return driver_linear(
                a=sec.get("coef_x"), b=sec.get("coef_z"), c=sec.get("coef_u"),
                const=sec.get("const", 0.0), zero_bound=sec.get("zero_bound"),
            )
        raise ConfigError(f"driver.family: unknown family {fam!r}")

    def build_control_problem(self, noise: LevyModel) -> ControlProblem:
        sec = self.section("control")
        labels = [str(v) for v in sec["labels"]]
        r_shifts = sec["r_shifts"]
        if r_shifts.shape[0] != len(labels):
            raise ConfigError("control.r_shifts must have one row per control")
        gamma = sec.get("gamma")
        if gamma is None:
            gamma = np.zeros((len(labels), max(noise.n_marks, 1)))
        if gamma.shape[0] != len(labels):
            raise ConfigError("control.gamma must have one row per control")
        penalties = sec.get("penalties")
        if penalties is None:
            penalties = np.zeros(len(labels))
        if len(penalties) != len(labels):
            raise ConfigError("control.penalties must have one entry per control")
        cost_kind = sec["cost"]
        index = {lab: i for i, lab in enumerate(labels)}

        if cost_kind == "quadratic":
            base = lambda x: np.sum(x**2, axis=1)
        elif cost_kind == "abs":
            base = lambda x: np.abs(x[:, 0])
        elif cost_kind == "positive_part":
            base = lambda x: np.maximum(x[:, 0], 0.0)
        else:
            raise ConfigError(f"control.cost: unknown cost {cost_kind!r}")

        return ControlProblem(
            controls=tuple(labels),
            L=lambda x, c: base(x) + penalties[index[c]],
            R=lambda c: r_shifts[index[c]],
            gamma=lambda c, i: float(gamma[index[c], i]) if noise.n_marks else 0.0,
            l_bound=sec["l_bound"],
            r_bound=float(np.linalg.norm(r_shifts, axis=1).max()),
            lipschitz_L=np.inf,
        )

    def build_powerplant(self) -> SparkSpreadModel:
        sec = self.section("powerplant")
        period = 1.0
        th_b, th_a = sec["theta_base"], sec.get("theta_amp", 0.0)
        kp_b, kp_a = sec.get("kappa_base", 0.0), sec.get("kappa_amp", 0.0)
        omega = 2 * np.pi / period
        rows = sec.get("scenarios") or [["base", 0.0, 0.0, 0.0]]
        scenarios = []
        for row in rows:
            if len(row) != 4:
                raise ConfigError("powerplant.scenarios rows are [label, drift_shift, jump_tilt, penalty]")
            scenarios.append(Scenario(str(row[0]), float(row[1]), float(row[2]), float(row[3])))
        return SparkSpreadModel(
            theta=lambda t: th_b + th_a * np.sin(omega * t),
            kappa=lambda t: kp_b + kp_a * np.sin(omega * t),
            vol=sec["vol"],
            jumps=self.build_model(),
            uncertainty=spread_uncertainty(scenarios, payoff_bound=sec["payoff_bound"]),
            discount=sec["discount_rate"],
            lifetime_N=float(np.max(sec["lifetimes"])),
            period=period,
        )

    def numerics(self, section: str, seed: int, workers: int = 1) -> Numerics:
        sec = self.section(section)
        return Numerics(
            dt=sec["dt"],
            n_paths=sec["n_paths"],
            basis=RegressionBasis(family=sec.get("basis", "polynomial"), degree=sec.get("degree", 3)),
            seed=seed,
            n_batches=sec.get("n_batches", 4),
            workers=workers,
        )


def _need(sec: dict, key: str, section: str):
    if key not in sec:
        raise ConfigError(f"section [{section}] requires key {key!r} for this family")
    return sec[key]


def _parse_value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def parse_config(text: str, overrides=()) -> ExperimentConfig:
    """Parse config text, apply key=value overrides, validate the schema.

    Overrides use dotted names: ``section.key=value``.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str.lower
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc

    raw: dict[str, dict] = {s: dict(cp.items(s)) for s in cp.sections()}
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {ov!r}")
        name, val = ov.split("=", 1)
        sec_name, key = name.strip().split(".", 1)
        raw.setdefault(sec_name.strip().lower(), {})[key.strip().lower()] = val.strip()

    sections: dict[str, dict] = {}
    for sec_name, kv in raw.items():
        if sec_name not in SCHEMA:
            raise ConfigError(f"unknown section [{sec_name}]")
        schema = SCHEMA[sec_name]
        parsed = {}
        for key, rawval in kv.items():
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in section [{sec_name}]")
            conv, _ = schema[key]
            parsed[key] = conv(_parse_value(rawval), f"[{sec_name}].{key}")
        for key, (_, required) in schema.items():
            if required and key not in parsed:
                raise ConfigError(f"section [{sec_name}] is missing required key {key!r}")
        sections[sec_name] = parsed

    cfg = ExperimentConfig(sections=sections, source_text=text)
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg: ExperimentConfig) -> None:
    if "discounted" in cfg.sections:
        sec = cfg.sections["discounted"]
        if sec["alpha"] <= 0:
            raise ConfigError("[discounted].alpha must be > 0")
        if sec["alpha"] * sec["dt"] > MAX_ALPHA_DT + 1e-15:
            raise ConfigError(f"[discounted]: alpha * dt must be <= {MAX_ALPHA_DT}")
    if "ebsde" in cfg.sections:
        sec = cfg.sections["ebsde"]
        sched = np.asarray(sec["alpha_schedule"], float)
        if np.any(sched <= 0) or np.any(np.diff(sched) >= 0):
            raise ConfigError("[ebsde].alpha_schedule must be positive and strictly decreasing")
        if sched[0] * sec["dt"] > MAX_ALPHA_DT + 1e-15:
            raise ConfigError(f"[ebsde]: alpha * dt must be <= {MAX_ALPHA_DT}")
    if "ergodicity" in cfg.sections:
        sec = cfg.sections["ergodicity"]
        if "harvest_horizon" in sec and "burn_in" in sec:
            if sec["harvest_horizon"] <= sec["burn_in"]:
                raise ConfigError("[ergodicity]: harvest_horizon must exceed burn_in")
    if "simulation" in cfg.sections:
        sec = cfg.sections["simulation"]
        if sec["dt"] <= 0 or sec["t_end"] <= sec.get("t_start", 0.0):
            raise ConfigError("[simulation]: need dt > 0 and t_end > t_start")


def check_sections_for(cfg: ExperimentConfig, subcommand: str) -> None:
    for name in REQUIRED_SECTIONS.get(subcommand, []):
        if name not in cfg.sections:
            raise ConfigError(f"subcommand {subcommand!r} requires section [{name}]")
