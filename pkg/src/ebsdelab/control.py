"""Risk-averse ergodic control on a finite control grid.

The control couples to the dynamics through a bounded drift shift and a
jump-intensity tilt.  The pointwise minimum of cost plus drift and jump
couplings over the control grid is the driver of an ergodic BSDE; its
long-run constant is the optimal average cost, and the minimizing index
defines the feedback policy.  Policies are evaluated by simulating the
tilted dynamics directly (the pathwise realization of the measure change:
the drift shift enters through the noise loading, jump intensities are
tilted while the compensator stays at base rates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng
from .bsde import Driver
from .discounted import Numerics
from .ebsde import EbsdeResult, vanishing_discount
from .forward_sde import PeriodicCoefficients, _eval_f
from .levy_model import LevyModel, compensator_drift, gaussian_increment_rows


@dataclass(frozen=True)
class ControlProblem:
    """Finite control set with cost, drift shift and jump tilt.

    Attributes:
        controls: the control values (any hashable labels).
        L: cost map, vectorized in the state: ``L(x, control) -> (n,)``
            for ``x`` of shape (n, d); bounded by ``l_bound`` with
            Lipschitz-in-x constant ``lipschitz_L``.
        R: drift shift per control, ``R(control) -> (d,)`` with norm
            at most ``r_bound``.
        gamma: jump tilt ``gamma(control, mark_index) -> float`` in
            (-1, infinity), intended within the comparison band
            ``|gamma| <= C (1 ^ ||mark||)`` for some ``C < 1``.
        l_bound: bound on |L|.
        r_bound: bound on ||R||.
        lipschitz_L: Lipschitz-in-x constant of L.
    """

    controls: tuple
    L: Callable
    R: Callable
    gamma: Callable
    l_bound: float
    r_bound: float
    lipschitz_L: float = np.inf

    def __post_init__(self):
        if len(self.controls) == 0:
            raise ValueError("control set must be nonempty")


@dataclass(frozen=True)
class ControlTables:
    """Control problem evaluated against a specific noise model."""

    problem: ControlProblem
    r_mat: np.ndarray  # (n_controls, d)
    gamma_mat: np.ndarray  # (n_controls, m)
    coupling: np.ndarray  # (n_controls, m) = gamma * intensity


def build_tables(problem: ControlProblem, noise: LevyModel) -> ControlTables:
    n_c = len(problem.controls)
    m = noise.n_marks
    r_mat = np.zeros((n_c, noise.dim))
    gamma_mat = np.zeros((n_c, m))
    for ci, c in enumerate(problem.controls):
        r_vec = np.atleast_1d(np.asarray(problem.R(c), float))
        if np.linalg.norm(r_vec) > problem.r_bound * (1 + 1e-12):
            raise ValueError(f"||R({c!r})|| exceeds r_bound")
        r_mat[ci] = r_vec
        for mi in range(m):
            g = float(problem.gamma(c, mi))
            if 1.0 + g <= 0.0:
                raise ValueError(f"gamma({c!r}, {mi}) <= -1 makes the tilt degenerate")
            gamma_mat[ci, mi] = g
    return ControlTables(problem, r_mat, gamma_mat, gamma_mat * noise.intensities)


def hamiltonian(problem: ControlProblem, noise: LevyModel, x, z, u,
                tables: ControlTables | None = None):
    """Pointwise minimum of L(x, c) + z.R(c) + sum_i gamma(c, i) u_i nu_i.

    Accepts single points or batches; ties go to the smallest control
    index.  Returns ``(value, argmin_index)`` with shapes matching the
    batch.
    """
    tables = tables or build_tables(problem, noise)
    x2 = np.atleast_2d(np.asarray(x, float))
    z2 = np.atleast_2d(np.asarray(z, float))
    u2 = np.atleast_2d(np.asarray(u, float)) if noise.n_marks else np.zeros((x2.shape[0], 0))
    if u2.shape[1] != noise.n_marks:
        raise ValueError("u must have one entry per jump mark")
    vals = np.empty((len(problem.controls), x2.shape[0]))
    for ci, c in enumerate(problem.controls):
        vals[ci] = (
            np.asarray(problem.L(x2, c), float)
            + z2 @ tables.r_mat[ci]
            + (u2 @ tables.coupling[ci] if noise.n_marks else 0.0)
        )
    idx = np.argmin(vals, axis=0)
    best = vals[idx, np.arange(x2.shape[0])]
    if np.ndim(x) == 1:
        return float(best[0]), int(idx[0])
    return best, idx


def hamiltonian_driver(problem: ControlProblem, noise: LevyModel) -> Driver:
    """The ergodic-control driver: f(x, z, u) = min over the control grid."""
    tables = build_tables(problem, noise)
    k_z = float(np.linalg.norm(tables.r_mat, axis=1).max(initial=0.0))
    k_u = float(np.sqrt((tables.gamma_mat**2 * noise.intensities).sum(axis=1)).max(initial=0.0))
    if noise.n_marks:
        unit = np.minimum(1.0, np.linalg.norm(noise.marks, axis=1))
        ratios = tables.gamma_mat / unit
        c1 = min(0.0, float(ratios.min()))
        c2 = max(0.0, float(ratios.max()))
    else:
        c1, c2 = 0.0, 0.0
    if c1 <= -1.0:
        raise ValueError("jump tilts exceed the admissible comparison band (C1 <= -1)")

    def f(x, z, u):
        vals, _ = hamiltonian(problem, noise, x, z, u, tables)
        return vals

    return Driver(f=f, lipschitz_K=k_z + k_u, zero_bound=problem.l_bound,
                  jump_bounds=(c1, c2))


@dataclass
class Policy:
    """Feedback policy: argmin control at (x, z(t, x), u(t, x))."""

    problem: ControlProblem
    noise: LevyModel
    tables: ControlTables
    z_at: Callable  # (t, x) -> (n, d)
    u_at: Callable  # (t, x) -> (n, m)
    label: str = "ebsde-argmin"

    def control_indices(self, t: float, x: np.ndarray) -> np.ndarray:
        x2 = np.atleast_2d(x)
        z = self.z_at(t, x2)
        u = self.u_at(t, x2)
        _, idx = hamiltonian(self.problem, self.noise, x2, z, u, self.tables)
        return np.atleast_1d(idx)


@dataclass
class ConstantPolicy:
    """Fixed control, for benchmarking against the optimal average."""

    problem: ControlProblem
    noise: LevyModel
    index: int

    @property
    def label(self) -> str:
        return f"constant[{self.problem.controls[self.index]!r}]"

    def control_indices(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.full(np.atleast_2d(x).shape[0], self.index, dtype=int)


def solve_ergodic_control(
    problem: ControlProblem,
    coeffs: PeriodicCoefficients,
    noise: LevyModel,
    numerics: Numerics,
    alpha_schedule: Sequence[float] = (0.4, 0.2, 0.1, 0.05),
    probe_points=None,
    epsilon_trunc: float | None = None,
):
    """Ergodic control via the Hamiltonian EBSDE: returns (result, policy)."""
    driver = hamiltonian_driver(problem, noise)
    if probe_points is None:
        probe_points = [(0.0, np.zeros(noise.dim))]
    result = vanishing_discount(
        driver, coeffs, noise, alpha_schedule, probe_points, numerics,
        epsilon_trunc=epsilon_trunc,
    )
    tables = build_tables(problem, noise)
    policy = Policy(
        problem=problem,
        noise=noise,
        tables=tables,
        z_at=result.surfaces.z_at,
        u_at=result.surfaces.u_at,
    )
    return result, policy


@dataclass(frozen=True)
class PolicyEvaluation:
    j_hat: float
    stderr: float
    effective_samples: float
    horizon: float
    burn_in: float
    n_paths: int


def evaluate_policy(
    problem: ControlProblem,
    policy,
    coeffs: PeriodicCoefficients,
    noise: LevyModel,
    horizon: float,
    dt: float,
    n_paths: int,
    seed: int,
    burn_in: float = 0.0,
    x0=None,
) -> PolicyEvaluation:
    """Long-run average cost of a policy under the tilted dynamics.

    Per step the control is frozen on [t_n, t_{n+1}); the drift gains
    ``G(t) R(c)`` and jump intensities are tilted by ``(1 + gamma)`` while
    the compensator stays at base rates, which is the pathwise image of
    the defining measure change.  The average is over ``[burn_in,
    horizon]`` and over paths; the standard error comes from independent
    path averages, and an autocorrelation-based effective sample size of
    the time dimension is reported alongside.
    """
    if horizon <= burn_in:
        raise ValueError("horizon must exceed burn_in")
    d = noise.dim
    tables = build_tables(problem, noise)
    x = np.zeros(d) if x0 is None else np.atleast_1d(np.asarray(x0, float))
    x = np.broadcast_to(x, (n_paths, d)).copy()
    n_steps = int(round((horizon - 0.0) / dt))
    comp = compensator_drift(noise)
    base_lam = noise.intensities * dt
    cost_acc = np.zeros(n_paths)
    mean_cost_series = []
    n_keep = 0

    for n in range(n_steps):
        t = n * dt
        c_idx = np.asarray(policy.control_indices(t % coeffs.period, x), dtype=int)
        a_mat = np.asarray(coeffs.A(t), float)
        g_mat = np.asarray(coeffs.G(t), float)
        dw = gaussian_increment_rows(noise, dt, seed, n, n_paths)
        if noise.n_marks:
            lam = base_lam * (1.0 + tables.gamma_mat[c_idx])
            counts = rng.poisson_rows(seed, n, n_paths, lam)
            jump = counts @ noise.marks - comp * dt
        else:
            jump = 0.0
        if t >= burn_in:
            step_cost = _cost_by_group(problem, x, c_idx)
            cost_acc += step_cost * dt
            mean_cost_series.append(step_cost.mean())
            n_keep += 1
        drift = x @ a_mat.T + _eval_f(coeffs, t, x) + tables.r_mat[c_idx] @ g_mat.T
        x = x + drift * dt + (dw + jump) @ g_mat.T

    window = horizon - burn_in
    j_paths = cost_acc / window
    j_hat = float(j_paths.mean())
    stderr = float(j_paths.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else float("nan")
    ess = _effective_samples(np.asarray(mean_cost_series)) * n_paths
    return PolicyEvaluation(
        j_hat=j_hat, stderr=stderr, effective_samples=float(ess),
        horizon=float(horizon), burn_in=float(burn_in), n_paths=n_paths,
    )


def _cost_by_group(problem: ControlProblem, x: np.ndarray, c_idx: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[0])
    for ci in np.unique(c_idx):
        sel = c_idx == ci
        out[sel] = np.asarray(problem.L(x[sel], problem.controls[ci]), float)
    return out


def _effective_samples(series: np.ndarray) -> float:
    """ESS of the time dimension from the integrated autocorrelation time."""
    n = len(series)
    if n < 8:
        return float(n)
    x = series - series.mean()
    var = float(np.dot(x, x) / n)
    if var <= 0:
        return float(n)
    tau = 1.0
    for lag in range(1, min(n // 4, 2000)):
        rho = float(np.dot(x[:-lag], x[lag:]) / ((n - lag) * var))
        if rho < 0.05:
            break
        tau += 2.0 * rho
    return n / tau
