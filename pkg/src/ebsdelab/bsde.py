"""Finite-horizon BSDEs with jumps by backward least-squares regression.

The solver walks a simulated ensemble backwards, estimating conditional
expectations by global polynomial least squares:

* ``Z_n``: regress ``Y_{n+1} dW_n^T`` on ``X_n``, divide by ``dt`` and
  right-multiply by the pseudo-inverse of the diffusion covariance, so the
  stored surface is the integrand against the driving Wiener noise (the
  same object the 1-D integro-PDE oracle feeds the driver as ``u_x G``),
* ``U_n`` (per mark): regress ``Y_{n+1} (dN_i - intensity_i dt)`` and
  divide by ``intensity_i dt``,
* ``Y_n``: regress ``Y_{n+1}``, then ``Y_n = (1 - discount dt) E[Y_{n+1}|X_n]
  + f(X_n, Z_n, U_n) dt`` (discount = 0 for the plain finite-horizon
  problem; the explicit discount factor is what the discounted module
  uses).

Paths may be split into independent batches: each batch runs its own
backward recursion with its own coefficients (sharing only the basis
normalization), so cross-batch spread is an honest standard error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .forward_sde import PathEnsemble, PeriodicCoefficients
from .levy_model import LevyModel

COND_WARN = 1e10


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Driver:
    """BSDE driver f(x, z, u) with regularity metadata.

    ``f`` is vectorized: it maps ``(x, z, u)`` with shapes
    ``(n, d), (n, d), (n, m)`` to ``(n,)``.  ``lipschitz_K`` bounds the
    sensitivity in (z, u); ``monotone_alpha`` is the one-sided constant of
    the (absent here, explicit elsewhere) y-dependence; ``zero_bound``
    dominates ``|f(x, 0, 0)|`` on the relevant state region;
    ``jump_bounds = (C1, C2)`` with ``-1 < C1 <= 0 <= C2`` bound the jump
    comparison weights.
    """

    f: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    lipschitz_K: float
    monotone_alpha: float = 0.0
    zero_bound: float = np.inf
    jump_bounds: tuple = (0.0, 0.0)

    def __post_init__(self):
        c1, c2 = self.jump_bounds
        if not (-1.0 < c1 <= 0.0 <= c2):
            raise ValueError("jump_bounds must satisfy -1 < C1 <= 0 <= C2")


def driver_from_state(fn, zero_bound: float, lipschitz_K: float = 0.0) -> Driver:
    """Driver depending on the state only: f(x, z, u) = fn(x)."""
    return Driver(f=lambda x, z, u: np.asarray(fn(x), float), lipschitz_K=lipschitz_K,
                  zero_bound=zero_bound)


def driver_constant(c: float) -> Driver:
    return Driver(f=lambda x, z, u: np.full(x.shape[0], float(c)), lipschitz_K=0.0,
                  zero_bound=abs(float(c)))


def driver_linear(a=None, b=None, c=None, const: float = 0.0, zero_bound: float | None = None,
                  jump_bounds: tuple = (0.0, 0.0)) -> Driver:
    """f(x, z, u) = a.x + b.z + c.u + const (any of a, b, c may be None)."""

    def f(x, z, u):
        out = np.full(x.shape[0], float(const))
        if a is not None:
            out = out + x @ np.asarray(a, float)
        if b is not None:
            out = out + z @ np.asarray(b, float)
        if c is not None and u.shape[1]:
            out = out + u @ np.asarray(c, float)
        return out

    k = 0.0
    if b is not None:
        k += float(np.linalg.norm(np.asarray(b, float)))
    if c is not None:
        k += float(np.linalg.norm(np.asarray(c, float)))
    return Driver(f=f, lipschitz_K=k, zero_bound=np.inf if zero_bound is None else zero_bound,
                  jump_bounds=jump_bounds)


@dataclass(frozen=True)
class DriverCheck:
    """Sampled verification of a driver's declared metadata."""

    zero_bound_estimate: float
    zero_bound_violations: int
    lipschitz_estimate: float
    lipschitz_violations: int


def verify_driver(driver: Driver, ensemble: PathEnsemble, n_probe: int = 256, seed: int = 0) -> DriverCheck:
    """Spot-check zero_bound and the (z, u) Lipschitz constant by sampling.

    Violations are reported, not raised: the declared constants steer
    horizon selection and comparison tests, and a report keeps the caller
    in charge of how strict to be.
    """
    g = np.random.Generator(np.random.Philox(key=seed))
    m = ensemble.model.n_marks
    d = ensemble.states.shape[2]
    flat = ensemble.states.reshape(-1, d)
    idx = g.integers(0, flat.shape[0], size=min(n_probe, flat.shape[0]))
    x = flat[idx]
    zeros_z = np.zeros((len(x), d))
    zeros_u = np.zeros((len(x), m))
    f0 = np.abs(driver.f(x, zeros_z, zeros_u))
    zb_est = float(f0.max())
    zb_viol = int(np.sum(f0 > driver.zero_bound * (1 + 1e-12)))

    z1, z2 = g.standard_normal((2, len(x), d))
    u1, u2 = g.standard_normal((2, len(x), m)) if m else (zeros_u, zeros_u)
    df = np.abs(driver.f(x, z1, u1) - driver.f(x, z2, u2))
    nu = ensemble.model.intensities
    du_norm = np.sqrt(((u1 - u2) ** 2 * nu).sum(axis=1)) if m else np.zeros(len(x))
    denom = np.linalg.norm(z1 - z2, axis=1) + du_norm
    ratio = df / np.where(denom > 0, denom, 1.0)
    lip_est = float(ratio.max())
    lip_viol = int(np.sum(ratio > driver.lipschitz_K * (1 + 1e-9) + 1e-12))
    return DriverCheck(zb_est, zb_viol, lip_est, lip_viol)


# ---------------------------------------------------------------------------
# Regression basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial regression basis.

    ``family="polynomial"`` uses all monomials of total degree <= degree;
    ``family="tensor-polynomial"`` uses per-coordinate degrees <= degree.
    With ``normalize=True`` coordinates are centered and scaled per step
    from the pooled sample before monomials are formed.
    """

    family: str = "polynomial"
    degree: int = 3
    normalize: bool = True

    def __post_init__(self):
        if self.family not in ("polynomial", "tensor-polynomial"):
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")

    def exponents(self, dim: int) -> np.ndarray:
        if dim == 1:
            return np.arange(self.degree + 1).reshape(-1, 1)
        grids = np.meshgrid(*[np.arange(self.degree + 1)] * dim, indexing="ij")
        exps = np.stack([g.ravel() for g in grids], axis=1)
        if self.family == "polynomial":
            exps = exps[exps.sum(axis=1) <= self.degree]
        # Deterministic order: by total degree, then lexicographic.
        order = np.lexsort(tuple(exps.T[::-1]) + (exps.sum(axis=1),))
        return exps[order]

    def design(self, x: np.ndarray, center: np.ndarray, scale: np.ndarray) -> np.ndarray:
        xn = (x - center) / scale
        exps = self.exponents(x.shape[1])
        cols = [np.prod(xn**e, axis=1) for e in exps]
        return np.column_stack(cols)

    def normalization(self, x: np.ndarray):
        if not self.normalize:
            return np.zeros(x.shape[1]), np.ones(x.shape[1])
        center = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return center, scale


@dataclass(frozen=True)
class StepFit:
    """Regression coefficients for one grid step (averaged over batches)."""

    t: float
    center: np.ndarray
    scale: np.ndarray
    coef_cont: np.ndarray  # (B,) continuation E[Y_{n+1} | X_n = .]
    coef_z: np.ndarray  # (B, d)
    coef_u: np.ndarray  # (B, m)
    cond: float


@dataclass
class BsdeSolution:
    """Backward-regression solution surfaces plus realized path values."""

    grid: np.ndarray
    basis: RegressionBasis
    fits: list  # StepFit per step 0..N-1
    driver: Driver
    discount: float
    terminal_label: str
    y0: np.ndarray  # realized Y at t0 per path
    max_abs_y: float
    max_cond: float
    realized_y: np.ndarray | None = None  # (M, N+1)
    realized_z: np.ndarray | None = None  # (M, N, d)
    realized_u: np.ndarray | None = None  # (M, N, m)
    dt: float = field(init=False)

    def __post_init__(self):
        self.dt = float(self.grid[1] - self.grid[0]) if len(self.grid) > 1 else 0.0

    def _step_of(self, t: float) -> int:
        n = int(round((t - self.grid[0]) / self.dt)) if self.dt else 0
        n = min(max(n, 0), len(self.fits) - 1)
        if self.fits[n] is None:
            raise ValueError(f"no stored surface at t={t:.6g} (step fits were truncated)")
        return n

    def z_at(self, t: float, x: np.ndarray) -> np.ndarray:
        fit = self.fits[self._step_of(t)]
        phi = self.basis.design(np.atleast_2d(x), fit.center, fit.scale)
        return phi @ fit.coef_z

    def u_at(self, t: float, x: np.ndarray) -> np.ndarray:
        fit = self.fits[self._step_of(t)]
        phi = self.basis.design(np.atleast_2d(x), fit.center, fit.scale)
        return phi @ fit.coef_u

    def y_at(self, t: float, x: np.ndarray) -> np.ndarray:
        """y(t, x) with t snapped to the grid.

        Composes the continuation surface with the driver exactly as the
        backward step does, so realized path values satisfy
        ``Y_n = y_at(t_n, X_n)`` up to the terminal step.
        """
        x = np.atleast_2d(x)
        fit = self.fits[self._step_of(t)]
        phi = self.basis.design(x, fit.center, fit.scale)
        cont = phi @ fit.coef_cont
        z = phi @ fit.coef_z
        u = phi @ fit.coef_u
        return (1.0 - self.discount * self.dt) * cont + self.driver.f(x, z, u) * self.dt


def solve_finite_horizon(
    driver: Driver,
    ensemble: PathEnsemble,
    terminal: Callable[[np.ndarray], np.ndarray],
    basis: RegressionBasis,
    discount: float = 0.0,
    n_batches: int = 1,
    store_realized: bool = True,
    terminal_label: str = "terminal",
    n_stored_steps: int | None = None,
) -> BsdeSolution:
    """Backward least-squares solve of the finite-horizon BSDE.

    ``n_batches`` independent path batches produce independent coefficient
    sets; stored surfaces average them.  ``n_stored_steps`` limits how many
    early-step fits are kept (None keeps all).
    """
    if not ensemble.has_increments:
        raise ValueError("ensemble must retain increments (snapshot_stride == 1)")
    model = ensemble.model
    M, n_times, d = ensemble.states.shape
    n_steps = n_times - 1
    m = model.n_marks
    dt = ensemble.dt
    if M % n_batches:
        raise ValueError(f"n_paths = {M} must be divisible by n_batches = {n_batches}")
    bs = M // n_batches
    q_pinv = model.diffusion_cov_pinv()
    nu_dt = model.intensities * dt

    y = np.asarray(terminal(ensemble.states[:, -1, :]), float)
    if y.shape != (M,):
        raise ValueError("terminal must map (n, d) states to (n,) values")

    fits: list[StepFit | None] = [None] * n_steps
    realized_y = np.empty((M, n_times)) if store_realized else None
    realized_z = np.empty((M, n_steps, d)) if store_realized else None
    realized_u = np.empty((M, n_steps, m)) if store_realized else None
    if store_realized:
        realized_y[:, -1] = y
    max_abs_y = float(np.abs(y).max(initial=0.0))
    max_cond = 1.0

    for n in range(n_steps - 1, -1, -1):
        x = ensemble.states[:, n, :]
        dw, counts = ensemble.step_increments(n)
        center, scale = basis.normalization(x)
        phi_full = basis.design(x, center, scale)
        # Drop columns the sample cannot identify (zero spread), keeping
        # the intercept; point-mass steps then regress on the mean only.
        col_std = phi_full.std(axis=0)
        keep = np.ones(phi_full.shape[1], dtype=bool)
        const_like = col_std < 1e-13
        if const_like.any():
            first_const = int(np.argmax(const_like))
            keep[const_like] = False
            keep[first_const] = True
        phi = phi_full[:, keep]
        b_eff = phi.shape[1]

        phi_b = phi.reshape(n_batches, bs, b_eff)
        gram = np.einsum("kmb,kmc->kbc", phi_b, phi_b)
        try:
            gram_inv = np.linalg.inv(gram)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular regression matrix at step {n} (t={ensemble.grid[n]:.6g})") from exc
        svals = np.linalg.svd(gram, compute_uv=False)
        cond = float(np.sqrt((svals[:, 0] / np.maximum(svals[:, -1], 1e-300)).max()))
        if cond > COND_WARN:
            warnings.warn(f"regression condition number {cond:.3g} at step {n}", RuntimeWarning)
        max_cond = max(max_cond, cond)

        def regress(tgt):
            tgt_b = tgt.reshape(n_batches, bs, -1)
            rhs = np.einsum("kmb,kmt->kbt", phi_b, tgt_b)
            coef = gram_inv @ rhs  # (K, B, T)
            fitted = np.einsum("kmb,kbt->kmt", phi_b, coef).reshape(M, -1)
            return coef, fitted

        # Stage 1: pilot continuation, to center the martingale targets.
        coef_y0, fitted_y0 = regress(y[:, None])
        resid = y - fitted_y0[:, 0]
        # Stage 2: Z and U from the centered targets (same conditional
        # expectations as the raw products, far less noise).
        targets = np.empty((M, d + m))
        targets[:, :d] = resid[:, None] * dw
        if m:
            targets[:, d:] = resid[:, None] * (counts - nu_dt)
        coef_zu, fitted_zu = regress(targets)
        z = (fitted_zu[:, :d] / dt) @ q_pinv
        u = fitted_zu[:, d:] / nu_dt if m else np.zeros((M, 0))
        # Stage 3: continuation with the fitted martingale increments as a
        # control variate (same conditional expectation, the one-step
        # innovation removed from the target).
        y_cv = y - np.einsum("md,md->m", z, dw)
        if m:
            y_cv = y_cv - np.einsum("mi,mi->m", u, counts - nu_dt)
        coef_cont, fitted_cont = regress(y_cv[:, None])
        cont = fitted_cont[:, 0]
        y = (1.0 - discount * dt) * cont + driver.f(x, z, u) * dt

        max_abs_y = max(max_abs_y, float(np.abs(y).max()))
        if store_realized:
            realized_y[:, n] = y
            realized_z[:, n] = z
            realized_u[:, n] = u
        if n_stored_steps is None or n < n_stored_steps:
            coef_mean = np.concatenate([coef_cont.mean(axis=0), coef_zu.mean(axis=0)], axis=1)
            full = np.zeros((phi_full.shape[1], coef_mean.shape[1]))
            full[keep] = coef_mean
            fits[n] = StepFit(
                t=float(ensemble.grid[n]),
                center=center,
                scale=scale,
                coef_cont=full[:, 0],
                coef_z=(full[:, 1 : 1 + d] / dt) @ q_pinv,
                coef_u=full[:, 1 + d :] / nu_dt if m else full[:, 1 + d :],
                cond=cond,
            )

    if not np.all(np.isfinite(y)):
        raise SolverError("non-finite regressed values at the initial step")

    return BsdeSolution(
        grid=ensemble.grid,
        basis=basis,
        fits=fits,
        driver=driver,
        discount=discount,
        terminal_label=terminal_label,
        y0=y,
        max_abs_y=max_abs_y,
        max_cond=max_cond,
        realized_y=realized_y,
        realized_z=realized_z,
        realized_u=realized_u,
    )


def martingale_residuals(solution: BsdeSolution, ensemble: PathEnsemble):
    """Per-step mean and stderr of the one-step martingale residual.

    residual_n = Y_{n+1} - Y_n + (f - discount*Y~) dt - Z_n.dW_n
                 - sum_i U_n,i (dN_i - nu_i dt)
    which should be mean-zero at every step.
    """
    if solution.realized_y is None:
        raise ValueError("solution was computed without realized paths")
    model = ensemble.model
    dt = ensemble.dt
    n_steps = ensemble.n_steps
    means = np.empty(n_steps)
    stderrs = np.empty(n_steps)
    for n in range(n_steps):
        x = ensemble.states[:, n, :]
        dw, counts = ensemble.step_increments(n)
        z = solution.realized_z[:, n]
        u = solution.realized_u[:, n]
        fval = solution.driver.f(x, z, u)
        cont = (solution.realized_y[:, n] - fval * dt) / (1.0 - solution.discount * dt)
        resid = (
            solution.realized_y[:, n + 1]
            - solution.realized_y[:, n]
            + (fval - solution.discount * cont) * dt
            - np.einsum("md,md->m", z, dw)
        )
        if model.n_marks:
            resid -= np.einsum("mi,mi->m", u, counts - model.intensities * dt)
        means[n] = resid.mean()
        stderrs[n] = resid.std(ddof=1) / np.sqrt(len(resid))
    return means, stderrs


# ---------------------------------------------------------------------------
# 1-D integro-PDE oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PideSolution:
    t_grid: np.ndarray
    space_grid: np.ndarray
    values: np.ndarray  # (n_t, n_x)

    def at(self, t: float, x) -> np.ndarray:
        i = int(np.argmin(np.abs(self.t_grid - t)))
        return np.interp(np.atleast_1d(x), self.space_grid, self.values[i])


def _interp_linear_extrap(xq: np.ndarray, grid: np.ndarray, vals: np.ndarray) -> np.ndarray:
    out = np.interp(xq, grid, vals)
    lo, hi = grid[0], grid[-1]
    slope_lo = (vals[1] - vals[0]) / (grid[1] - grid[0])
    slope_hi = (vals[-1] - vals[-2]) / (grid[-1] - grid[-2])
    below = xq < lo
    above = xq > hi
    if below.any():
        out[below] = vals[0] + slope_lo * (xq[below] - lo)
    if above.any():
        out[above] = vals[-1] + slope_hi * (xq[above] - hi)
    return out


def pide_oracle_1d(
    driver: Driver,
    coeffs: PeriodicCoefficients,
    noise: LevyModel,
    terminal: Callable[[np.ndarray], np.ndarray],
    space_grid: np.ndarray,
    t_grid: np.ndarray,
    discount: float = 0.0,
) -> PideSolution:
    """Explicit finite-difference backward march of the 1-D nonlocal PDE.

    Solves ``u_t + L u - discount*u + f(x, u_x G, jump differences) = 0``
    with ``u(T, .) = terminal`` on the given grids, where ``L`` combines
    drift, diffusion ``(1/2) G^2 Q`` and the compensated jump part.  Jump
    shifts ``x + G(t) mark`` are evaluated by linear interpolation with
    linear extrapolation at the boundary.  Raises ValueError when the time
    step violates the explicit-scheme stability (CFL) limit, reporting the
    admissible dt.
    """
    if noise.dim != 1:
        raise ValueError("pide_oracle_1d requires d = 1")
    xg = np.asarray(space_grid, float)
    tg = np.asarray(t_grid, float)
    dx = xg[1] - xg[0]
    if not np.allclose(np.diff(xg), dx):
        raise ValueError("space_grid must be uniform")
    dt = tg[1] - tg[0]
    if not np.allclose(np.diff(tg), dt):
        raise ValueError("t_grid must be uniform")

    q = float(noise.diffusion_cov[0, 0])
    marks = noise.marks[:, 0] if noise.n_marks else np.zeros(0)
    nus = noise.intensities
    comp = float(nus @ marks) if noise.n_marks else 0.0

    # CFL bound over the time grid: diffusion + drift + jump intensity (+ discount).
    worst = 0.0
    for t in tg:
        g = float(np.asarray(coeffs.G(t), float)[0, 0])
        drift = np.asarray(coeffs.A(t), float)[0, 0] * xg + _f_scalar(coeffs, t, xg) - g * comp
        worst = max(
            worst,
            g * g * q / dx**2 + np.abs(drift).max() / dx + float(nus.sum()) + discount,
        )
    dt_adm = 1.0 / worst if worst > 0 else np.inf
    if dt > dt_adm:
        raise ValueError(f"explicit scheme unstable: dt = {dt:.3g} exceeds admissible {dt_adm:.3g}")

    u = np.asarray(terminal(xg.reshape(-1, 1)), float).reshape(-1)
    values = np.empty((len(tg), len(xg)))
    values[-1] = u
    n_x = len(xg)
    x_col = xg.reshape(-1, 1)

    for i in range(len(tg) - 2, -1, -1):
        t = tg[i]
        g = float(np.asarray(coeffs.G(t), float)[0, 0])
        a_xx = 0.5 * g * g * q
        drift = np.asarray(coeffs.A(t), float)[0, 0] * xg + _f_scalar(coeffs, t, xg) - g * comp

        ghost_lo = 2 * u[0] - u[1]
        ghost_hi = 2 * u[-1] - u[-2]
        ext = np.concatenate([[ghost_lo], u, [ghost_hi]])
        u_x = (ext[2:] - ext[:-2]) / (2 * dx)
        u_xx = (ext[2:] - 2 * ext[1:-1] + ext[:-2]) / dx**2

        if noise.n_marks:
            shifts = np.stack(
                [_interp_linear_extrap(xg + g * mk, xg, u) for mk in marks], axis=1
            )  # (n_x, m)
            jump_diff = shifts - u[:, None]
            nonlocal_term = jump_diff @ nus
        else:
            jump_diff = np.zeros((n_x, 0))
            nonlocal_term = 0.0

        z_arg = (u_x * g).reshape(-1, 1)
        fval = driver.f(x_col, z_arg, jump_diff)
        u = u + dt * (a_xx * u_xx + drift * u_x + nonlocal_term - discount * u + fval)
        values[i] = u

    return PideSolution(t_grid=tg, space_grid=xg, values=values)


def _f_scalar(coeffs: PeriodicCoefficients, t: float, xg: np.ndarray) -> np.ndarray:
    out = np.asarray(coeffs.F(t, xg.reshape(-1, 1)), float)
    if out.ndim == 2:
        out = out[:, 0]
    return np.broadcast_to(out, xg.shape)
