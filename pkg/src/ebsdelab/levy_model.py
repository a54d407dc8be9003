"""Driving noise: Brownian motion plus a finite-activity compound Poisson part.

A :class:`LevyModel` is the martingale noise ``W + (compensated jumps)`` in
R^d: a mean-zero Gaussian component with covariance ``Q`` and a finite list
of jump marks, each firing as an independent Poisson stream.  Restricting
the jump measure to finite discrete support keeps the compensator exact and
makes the BSDE's jump unknown a finite vector (one entry per mark).

Truncating an infinite-activity jump measure into marks is the caller's
responsibility at construction time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng

_PSD_TOL = 1e-10


@dataclass(frozen=True)
class LevyModel:
    """Immutable specification of the driving noise in R^d.

    Attributes:
        dim: state dimension d.
        diffusion_cov: d x d symmetric positive-semidefinite covariance of
            the Gaussian part (state^2 per unit time).
        jump_marks: sequence of ``(mark, intensity)`` pairs; each mark is a
            nonzero vector in R^d, each intensity a positive rate per unit
            time.
    """

    dim: int
    diffusion_cov: np.ndarray
    jump_marks: tuple = ()
    # Derived, filled in __post_init__: (n_marks, d) and (n_marks,) arrays
    # plus a factor S with S S^T = Q used for Gaussian sampling.
    marks: np.ndarray = field(init=False, repr=False)
    intensities: np.ndarray = field(init=False, repr=False)
    _gauss_factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = int(self.dim)
        if d < 1:
            raise ValueError("dim must be a positive integer")
        q = np.array(self.diffusion_cov, dtype=float)
        if q.shape != (d, d):
            raise ValueError(f"diffusion_cov must be {d}x{d}, got {q.shape}")
        if not np.allclose(q, q.T, atol=_PSD_TOL):
            raise ValueError("diffusion_cov must be symmetric")
        w, v = np.linalg.eigh(0.5 * (q + q.T))
        if w.min(initial=0.0) < -_PSD_TOL:
            raise ValueError(f"diffusion_cov not positive-semidefinite (min eig {w.min():.3e})")
        factor = v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))

        pairs = []
        for mark, intensity in self.jump_marks:
            mark = np.asarray(mark, dtype=float).reshape(d)
            intensity = float(intensity)
            if intensity <= 0:
                raise ValueError("every jump intensity must be > 0")
            if not np.any(mark != 0.0):
                raise ValueError("jump marks must be nonzero vectors")
            pairs.append((mark, intensity))
        marks = np.array([m for m, _ in pairs], dtype=float).reshape(len(pairs), d)
        intensities = np.array([i for _, i in pairs], dtype=float)
        # Finite second moment of the jump measure; automatic for finite
        # mark lists but asserted as the square-integrability contract.
        second_moment = float(np.sum(intensities * np.sum(marks**2, axis=1)))
        if not np.isfinite(second_moment):
            raise ValueError("jump measure second moment is not finite")

        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "diffusion_cov", q)
        object.__setattr__(self, "jump_marks", tuple((m.copy(), i) for m, i in pairs))
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "intensities", intensities)
        object.__setattr__(self, "_gauss_factor", factor)

    @property
    def n_marks(self) -> int:
        return self.marks.shape[0]

    def jump_second_moment(self) -> float:
        return float(np.sum(self.intensities * np.sum(self.marks**2, axis=1)))

    def diffusion_cov_pinv(self) -> np.ndarray:
        return np.linalg.pinv(self.diffusion_cov, hermitian=True)


def compensator_drift(model: LevyModel) -> np.ndarray:
    """Mean jump flux sum_i intensity_i * mark_i.

    Subtracting ``compensator_drift(model) * dt`` from a raw jump sum turns
    the jump part into a martingale increment.
    """
    if model.n_marks == 0:
        return np.zeros(model.dim)
    return model.intensities @ model.marks


def sample_increment(model: LevyModel, dt: float, stream: rng.RandomStream):
    """One noise increment for a single path at a single step.

    Returns ``(dW, jump_counts)``: a Gaussian vector with covariance
    ``Q * dt`` and independent Poisson counts with means
    ``intensity_i * dt``.  Deterministic in ``(stream.seed, stream.path,
    stream.step)`` and bit-identical to the row the vectorized sampler
    produces for that path.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    block_start = (stream.path // rng.BLOCK) * rng.BLOCK
    row = stream.path - block_start
    dw, counts = sample_increment_rows(
        model, dt, stream.seed, stream.step, row + 1, row_start=block_start
    )
    return dw[row], counts[row]


def sample_increment_rows(
    model: LevyModel, dt: float, seed: int, step: int, n_paths: int, row_start: int = 0
):
    """Vectorized increments for paths ``row_start..row_start+n_paths-1``.

    ``row_start`` must be a multiple of the RNG block size.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    z = rng.normal_rows(seed, step, n_paths, model.dim, row_start)
    dw = (z @ model._gauss_factor.T) * np.sqrt(dt)
    if model.n_marks == 0:
        counts = np.zeros((n_paths, 0), dtype=np.int64)
    else:
        counts = rng.poisson_rows(seed, step, n_paths, model.intensities * dt, row_start)
    return dw, counts


def gaussian_increment_rows(
    model: LevyModel, dt: float, seed: int, step: int, n_paths: int, row_start: int = 0
) -> np.ndarray:
    """Gaussian part only, for callers that tilt the jump rates themselves."""
    z = rng.normal_rows(seed, step, n_paths, model.dim, row_start)
    return (z @ model._gauss_factor.T) * np.sqrt(dt)


def tilt(model: LevyModel, gamma) -> LevyModel:
    """Jump-intensity tilt: intensity_i -> intensity_i * (1 + gamma_i).

    This is the jump side of an equivalent measure change; the diffusion
    covariance is unchanged.  Requires ``1 + gamma_i > 0`` for every mark,
    otherwise the change of measure is degenerate.
    """
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (model.n_marks,))
    if np.any(1.0 + gamma <= 0.0):
        raise ValueError("tilt factors must satisfy 1 + gamma > 0")
    new_pairs = tuple(
        (mark, intensity * (1.0 + g))
        for (mark, intensity), g in zip(model.jump_marks, gamma)
    )
    return LevyModel(model.dim, model.diffusion_cov, new_pairs)
