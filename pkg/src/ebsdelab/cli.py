"""Configuration-driven experiment runner.

Every pipeline is a subcommand reading one config file; outputs are a
JSON manifest (inputs echoed, content hash of the resolved config, seed,
wall time, results, diagnostics) plus plot-ready CSVs.  Exit status: 0 on
success, 2 when the run completed but a theory-derived diagnostic failed,
1 on operational errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bsde import RegressionBasis, martingale_residuals, pide_oracle_1d, solve_finite_horizon
from .config import ConfigError, check_sections_for, parse_config
from .control import ConstantPolicy, evaluate_policy, solve_ergodic_control
from .discounted import horizon_convergence_study, solve_discounted
from .ebsde import lambda_via_invariant_measure, vanishing_discount
from .ergodicity import coupling_decay, harvest_invariant, hitting_times, test_function
from .forward_sde import moment_bound_report, simulate, write_ensemble
from .powerplant import plant_value, worst_case_lambda

SUBCOMMANDS = ("simulate", "ergodicity", "bsde", "discounted", "ebsde", "control", "powerplant")


def git_blob_sha(text: str) -> str:
    data = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


class Diagnostics:
    def __init__(self):
        self.entries = []

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        self.entries.append({"name": name, "ok": bool(ok), "detail": detail})
        return ok

    @property
    def all_ok(self) -> bool:
        return all(e["ok"] for e in self.entries)


def _resolve_seed(cfg, args) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("simulation", "seed", 0))


# ---------------------------------------------------------------------------
# Pipelines (each returns a results dict; diagnostics collected alongside)
# ---------------------------------------------------------------------------


def run_simulate(cfg, args, out: Path, diag: Diagnostics, seed: int) -> dict:
    model = cfg.build_model()
    coeffs = cfg.build_coefficients()
    sec = cfg.section("simulation")
    ens = simulate(
        coeffs, model, sec["x0"], sec.get("t_start", 0.0), sec["t_end"], sec["dt"],
        sec["n_paths"], seed,
        store_increments=sec.get("store_increments", False),
        snapshot_stride=sec.get("snapshot_stride", 1),
        workers=args.workers,
    )
    d = model.dim
    mean = ens.states.mean(axis=0)
    var = ens.states.var(axis=0, ddof=1)
    rows = [
        [t] + list(mean[i]) + list(var[i]) + [float(np.sum(ens.states[:, i, :] ** 2, axis=1).mean())]
        for i, t in enumerate(ens.grid)
    ]
    header = (["t"] + [f"mean_{j+1}" for j in range(d)] + [f"var_{j+1}" for j in range(d)]
              + ["mean_sq_norm"])
    write_csv(out / "ensemble_summary.csv", header, rows)
    if cfg.get("output", "write_ensemble", False):
        write_ensemble(out / "ensemble.bin", ens)
    report = moment_bound_report(ens, coeffs)
    diag.check(
        "moment-bound-envelope", report.ok,
        f"D={report.D:.6g} c={report.c:.6g} violations={report.violations.size}",
    )
    return {
        "terminal_mean": _jsonable(mean[-1]),
        "terminal_variance": _jsonable(var[-1]),
        "moment_bound": {"D": report.D, "c": report.c, "violations": int(report.violations.size)},
    }


def run_ergodicity(cfg, args, out: Path, diag: Diagnostics, seed: int) -> dict:
    model = cfg.build_model()
    coeffs = cfg.build_coefficients()
    sec = cfg.section("ergodicity")
    results = {}

    if "coupling_horizon" in sec:
        psis = [test_function(name) for name in sec.get("psis", ["sin"])]
        fit = coupling_decay(
            coeffs, model, sec["x"], sec["y"], psis,
            sec["coupling_horizon"], sec.get("coupling_dt", 0.01),
            sec.get("coupling_paths", 10000), seed,
        )
        rows = []
        for i, label in enumerate(fit.test_functions):
            for t, g, s in zip(fit.times, fit.gaps[i], fit.gap_stderr[i]):
                rows.append([label, t, g, s])
        write_csv(out / "coupling_gaps.csv", ["psi", "t", "gap", "stderr"], rows)
        diag.check(
            "coupling-rate-positive", fit.rho_hat > 2 * fit.rho_stderr,
            f"rho={fit.rho_hat:.4g} +- {fit.rho_stderr:.4g}, R2={fit.r_squared:.4f}",
        )
        results["coupling"] = {
            "rho_hat": fit.rho_hat, "rho_stderr": fit.rho_stderr,
            "c_hat": fit.c_hat, "r_squared": fit.r_squared,
        }

    if "ball_radius" in sec:
        stats = hitting_times(
            coeffs, model, sec.get("hitting_x", sec.get("x")), sec.get("ball_center"),
            sec["ball_radius"], sec.get("hitting_horizon", 10.0),
            sec.get("hitting_dt", 0.01), sec.get("hitting_paths", 4000), seed + 1,
        )
        write_csv(out / "survival.csv", ["T", "survival"],
                  list(zip(stats.survival_times, stats.survival)))
        diag.check(
            "survival-decays", stats.survival[-1] < stats.survival[0],
            f"terminal survival {stats.survival[-1]:.4f}",
        )
        results["hitting"] = {
            "terminal_survival": float(stats.survival[-1]),
            "censored_fraction": stats.censored_fraction,
        }

    if "harvest_horizon" in sec:
        inv = harvest_invariant(
            coeffs, model, sec.get("burn_in", 0.0), sec["harvest_horizon"],
            sec.get("thinning", 10), sec.get("harvest_dt", 0.01), seed + 2,
        )
        d = model.dim
        write_csv(out / "invariant.csv", ["phase"] + [f"x{j+1}" for j in range(d)],
                  [[p] + list(x) for p, x in zip(inv.phases, inv.states)])
        m2, m2_se = inv.integrate(lambda ph, x: np.sum(x**2, axis=1))
        results["invariant"] = {"n_samples": inv.n_samples, "second_moment": m2,
                                "second_moment_stderr": m2_se}
    return results


def run_bsde(cfg, args, out: Path, diag: Diagnostics, seed: int) -> dict:
    model = cfg.build_model()
    coeffs = cfg.build_coefficients()
    driver = cfg.build_driver()
    sim = cfg.section("simulation")
    sec = cfg.section("bsde")
    basis = RegressionBasis(family=sec.get("basis", "polynomial"), degree=sec.get("degree", 3))
    ens = simulate(
        coeffs, model, sim["x0"], sim.get("t_start", 0.0), sec["t_end"], sec["dt"],
        sec["n_paths"], seed, workers=args.workers,
    )
    terminal_kind = sec.get("terminal", "zero")
    tval = sec.get("terminal_value", 0.0)
    if terminal_kind == "zero":
        terminal = lambda x: np.zeros(x.shape[0])
    elif terminal_kind == "constant":
        terminal = lambda x: np.full(x.shape[0], tval)
    elif terminal_kind == "gauss":
        terminal = lambda x: np.exp(-np.sum(x**2, axis=1))
    else:
        raise ConfigError(f"[bsde].terminal: unknown terminal {terminal_kind!r}")
    sol = solve_finite_horizon(
        driver, ens, terminal, basis, n_batches=sec.get("n_batches", 1),
        terminal_label=terminal_kind,
    )
    rows = []
    for n, fit in enumerate(sol.fits):
        rows.append([fit.t, "y"] + list(fit.coef_cont))
        for j in range(model.dim):
            rows.append([fit.t, f"z{j+1}"] + list(fit.coef_z[:, j]))
        for j in range(model.n_marks):
            rows.append([fit.t, f"u{j+1}"] + list(fit.coef_u[:, j]))
    n_b = len(sol.fits[0].coef_cont)
    write_csv(out / "surfaces.csv", ["t", "surface"] + [f"c{k}" for k in range(n_b)], rows)

    means, ses = martingale_residuals(sol, ens)
    resid_ok = bool(np.all(np.abs(means) <= 4 * ses + 1e-14))
    diag.check("martingale-residuals", resid_ok,
               f"max |mean|/se = {float(np.max(np.abs(means) / np.maximum(ses, 1e-300))):.2f}")
    results = {"y0_mean": float(sol.y0.mean()), "max_cond": sol.max_cond}

    if sec.get("pide_check", False):
        if model.dim != 1:
            raise ConfigError("[bsde].pide_check requires dim = 1")
        lo, hi = sec.get("space_lo", -6.0), sec.get("space_hi", 6.0)
        xg = np.linspace(lo, hi, sec.get("space_points", 481))
        pide = pide_oracle_1d(driver, coeffs, model, terminal, xg, ens.grid)
        half = (xg >= lo / 2) & (xg <= hi / 2)
        t_probe = ens.grid[len(ens.grid) // 2]
        y_reg = sol.y_at(t_probe, xg[half].reshape(-1, 1))
        y_pde = pide.at(t_probe, xg[half])
        scale = max(float(np.max(np.abs(y_pde))), 1e-12)
        rms = float(np.sqrt(np.mean((y_reg - y_pde) ** 2))) / scale
        diag.check("pide-cross-check", rms <= 0.02, f"relative RMS {rms:.4f}")
        results["pide_rms"] = rms
    return results


def run_discounted(cfg, args, out: Path, diag: Diagnostics, seed: int) -> dict:
    model = cfg.build_model()
    coeffs = cfg.build_coefficients()
    driver = cfg.build_driver()
    sec = cfg.section("discounted")
    numerics = cfg.numerics("discounted", seed, args.workers)
    res = solve_discounted(
        driver, coeffs, model, sec["alpha"], sec.get("s", 0.0), sec["x"],
        sec["epsilon_trunc"], numerics,
    )
    diag.check("discounted-bound", res.bound_ok,
               f"max |Y| = {res.max_abs_y:.6g} vs C/alpha + eps = {res.bound_level:.6g}")
    write_csv(out / "discounted.csv",
              ["alpha", "T", "v_alpha", "bound_c_over_alpha", "bound_ok"],
              [[res.alpha, res.truncation_T, res.v_value, res.bound_C / res.alpha, int(res.bound_ok)]])
    results = {"alpha": res.alpha, "T": res.truncation_T, "v_alpha": res.v_value,
               "v_stderr": res.v_stderr, "bound_ok": res.bound_ok}

    horizons = sec.get("horizons")
    if horizons is not None and len(horizons):
        study = horizon_convergence_study(
            driver, coeffs, model, sec["alpha"], sec.get("s", 0.0), sec["x"],
            list(horizons), numerics,
        )
        write_csv(out / "horizon_gaps.csv", ["T", "gap", "gap_stderr", "bound"],
                  [[r.horizon, r.gap, r.gap_stderr, r.bound] for r in study.rows])
        gaps_ok = all(r.gap <= r.bound + 3 * r.gap_stderr + 1e-12 for r in study.rows)
        diag.check("horizon-gaps-bounded", gaps_ok, "geometric bound respected")
        results["horizon_gaps"] = [[r.horizon, r.gap, r.bound] for r in study.rows]
    return results


def run_ebsde(cfg, args, out: Path, diag: Diagnostics, seed: int) -> dict:
    model = cfg.build_model()
    coeffs = cfg.build_coefficients()
    driver = cfg.build_driver()
    sec = cfg.section("ebsde")
    numerics = cfg.numerics("ebsde", seed, args.workers)
    probes = [(0.0, row) for row in sec["probes"]]
    result = vanishing_discount(
        driver, coeffs, model, list(sec["alpha_schedule"]), probes, numerics,
        epsilon_trunc=sec.get("epsilon_trunc"),
    )
    diag.check("discounted-bounds", all(r.bound_ok for r in result.per_alpha),
               "C/alpha bound across the schedule")
    diag.check("extrapolation-clean", len(result.warnings) == 0, "; ".join(result.warnings))
    write_csv(out / "per_alpha.csv",
              ["alpha", "T", "alpha_v00", "alpha_v00_stderr"],
              [[r.alpha, r.truncation_T, r.alpha_v00, r.alpha_v00_stderr] for r in result.per_alpha])
    write_csv(out / "vhat_probes.csv", ["probe_x", "vhat", "stderr"],
              [[result.probe_points[j][1][0], *result.vhat[j]] for j in range(len(result.probe_points))])
    results = {
        "lambda_hat": result.lambda_hat,
        "lambda_stderr": result.lambda_stderr,
        "alpha_schedule": list(result.alpha_schedule),
        "per_alpha": [[r.alpha, r.alpha_v00, r.alpha_v00_stderr] for r in result.per_alpha],
        "warnings": list(result.warnings),
    }

    erg = cfg.sections.get("ergodicity", {})
    if "harvest_horizon" in erg:
        inv = harvest_invariant(
            coeffs, model, erg.get("burn_in", 0.0), erg["harvest_horizon"],
            erg.get("thinning", 10), erg.get("harvest_dt", 0.01), seed + 7,
        )
        lam2, lam2_se = lambda_via_invariant_measure(driver, result, inv)
        comb = float(np.hypot(result.lambda_stderr, lam2_se))
        diag.check(
            "invariant-measure-crosscheck",
            abs(lam2 - result.lambda_hat) <= 2 * comb,
            f"lambda={result.lambda_hat:.6g} lambda2={lam2:.6g} comb_se={comb:.3g}",
        )
        results["lambda_invariant"] = {"value": lam2, "stderr": lam2_se}
    return results


def run_control(cfg, args, out: Path, diag: Diagnostics, seed: int) -> dict:
    model = cfg.build_model()
    coeffs = cfg.build_coefficients()
    problem = cfg.build_control_problem(model)
    sec = cfg.section("ebsde")
    numerics = cfg.numerics("ebsde", seed, args.workers)
    probes = [(0.0, row) for row in sec["probes"]]
    result, policy = solve_ergodic_control(
        problem, coeffs, model, numerics,
        alpha_schedule=list(sec["alpha_schedule"]), probe_points=probes,
        epsilon_trunc=sec.get("epsilon_trunc"),
    )
    csec = cfg.section("control")
    horizon = csec.get("eval_horizon", 200.0)
    ev_dt = csec.get("eval_dt", 0.01)
    ev_paths = csec.get("eval_paths", 256)
    burn = csec.get("eval_burn_in", min(20.0, horizon / 4))
    ev = evaluate_policy(problem, policy, coeffs, model, horizon, ev_dt, ev_paths,
                         seed + 11, burn_in=burn)
    comb = float(np.hypot(result.lambda_stderr, ev.stderr))
    diag.check("policy-achieves-lambda", abs(ev.j_hat - result.lambda_hat) <= 2 * comb,
               f"J={ev.j_hat:.6g} lambda={result.lambda_hat:.6g} comb_se={comb:.3g}")
    const_evals = {}
    for ci, c in enumerate(problem.controls):
        cev = evaluate_policy(problem, ConstantPolicy(problem, model, ci), coeffs, model,
                              horizon, ev_dt, ev_paths, seed + 13 + ci, burn_in=burn)
        const_evals[str(c)] = {"J": cev.j_hat, "stderr": cev.stderr}
        comb_c = float(np.hypot(result.lambda_stderr, cev.stderr))
        diag.check(f"lambda-optimal-vs-{c}", result.lambda_hat <= cev.j_hat + 2 * comb_c,
                   f"lambda={result.lambda_hat:.6g} J({c})={cev.j_hat:.6g}")

    probe_xs = np.array([row for row in sec["probes"]])
    phases = np.linspace(0.0, coeffs.period, 5, endpoint=False)
    rows = []
    for ph in phases:
        idx = policy.control_indices(ph, probe_xs)
        for xrow, ci in zip(probe_xs, idx):
            rows.append([ph, xrow[0], int(ci)])
    write_csv(out / "policy.csv", ["phase", "x", "control_index"], rows)
    return {
        "lambda_hat": result.lambda_hat,
        "lambda_stderr": result.lambda_stderr,
        "policy_eval": {"J": ev.j_hat, "stderr": ev.stderr,
                        "effective_samples": ev.effective_samples},
        "constant_controls": const_evals,
    }


def run_powerplant(cfg, args, out: Path, diag: Diagnostics, seed: int) -> dict:
    sec = cfg.section("powerplant")
    model = cfg.build_powerplant()
    numerics = cfg.numerics("ebsde", seed, args.workers)
    esec = cfg.section("ebsde")
    probes = [(0.0, row) for row in esec["probes"]]
    lam, lam_se, policy, result = worst_case_lambda(
        model, numerics, alpha_schedule=list(esec["alpha_schedule"]),
        probe_points=probes, epsilon_trunc=esec.get("epsilon_trunc"),
    )
    diag.check("ebsde-bounds", all(r.bound_ok for r in result.per_alpha), "")
    probe_xs = np.array([row for row in esec["probes"]])
    counts = np.bincount(policy.control_indices(0.0, probe_xs),
                         minlength=len(model.uncertainty.controls))
    adversarial = model.uncertainty.controls[int(np.argmax(counts))].label
    values = {}
    rows = []
    for n_years in sec["lifetimes"]:
        v = plant_value(lam, model.discount, float(n_years))
        values[f"{float(n_years):g}"] = v
        rows.append([n_years, v])
    write_csv(out / "valuation.csv", ["lifetime_years", "value"], rows)
    report = {
        "lambda_hat": lam,
        "lambda_stderr": lam_se,
        "adversarial_scenario": adversarial,
        "values": values,
    }
    with open(out / "valuation_report.json", "w") as fh:
        json.dump(_jsonable(report), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return report


PIPELINES = {
    "simulate": run_simulate,
    "ergodicity": run_ergodicity,
    "bsde": run_bsde,
    "discounted": run_discounted,
    "ebsde": run_ebsde,
    "control": run_control,
    "powerplant": run_powerplant,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ebsdelab", description=__doc__)
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out-dir", default="out")
    parser.add_argument("--override", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    args = parser.parse_args(argv)

    started = time.time()
    try:
        text = Path(args.config).read_text()
        cfg = parse_config(text, overrides=args.override)
        check_sections_for(cfg, args.subcommand)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        seed = _resolve_seed(cfg, args)
        diag = Diagnostics()
        results = PIPELINES[args.subcommand](cfg, args, out, diag, seed)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    manifest = {
        "tool": "ebsdelab",
        "version": __version__,
        "subcommand": args.subcommand,
        "config_sha": git_blob_sha(text),
        "config": _jsonable(cfg.sections),
        "overrides": list(args.override),
        "seed": seed,
        "workers": args.workers,
        "results": _jsonable(results),
        "diagnostics": diag.entries,
        "status": "ok" if diag.all_ok else "diagnostic-failure",
        "timing": {
            "started_at_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "wall_time_s": time.time() - started,
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"{args.subcommand}: {manifest['status']}")
    return 0 if diag.all_ok else 2


if __name__ == "__main__":
    sys.exit(main())
