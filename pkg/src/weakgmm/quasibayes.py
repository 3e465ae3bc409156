"""Quasi-Bayes posterior means and default priors.

The CUE objective ``Q(theta|g)`` is used as a quasi log-likelihood
``-Q/2``. Posterior means are computed on a discrete theta grid whose prior
masses come from the trapezoid rule. The invariant prior has density
proportional to ``sqrt(i(theta))`` where ``i`` is the variance of the score
``(1/2) dQ/dtheta`` of the objective under ``G ~ GP(0, Sigma)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .estimators import CUE, GridObjective, as_batch, grid_objective
from .model import FiniteThetaModel, IvDesign, sigma_diag, sigma_kernel

Kernel = Callable[[float, float], np.ndarray]


def trapezoid_masses(grid) -> np.ndarray:
    """Trapezoid-rule quadrature weights on ``grid``, normalised to sum to one."""
    grid = np.asarray(grid, dtype=float)
    d = np.diff(grid)
    w = np.zeros_like(grid)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w / w.sum()


@dataclass(frozen=True, eq=False)
class Prior:
    """Discretised prior: probability masses on an increasing grid."""

    grid: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float)
        w = np.array(self.weights, dtype=float)
        if grid.ndim != 1 or grid.shape != w.shape or grid.size < 2:
            raise ValueError(f"grid and weights must be 1-D of equal length >= 2, got {grid.shape} and {w.shape}")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("prior grid must be strictly increasing")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("prior weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"prior weights sum to {w.sum()!r}, not 1")
        grid.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "weights", w)

    def density(self) -> np.ndarray:
        """Density values at the grid points (weights divided by quadrature masses)."""
        m = trapezoid_masses(self.grid)
        span = self.grid[-1] - self.grid[0]
        return self.weights / (m * span)


def _design_grid(design: IvDesign, grid_points: int) -> np.ndarray:
    if grid_points < 3:
        raise ValueError("grid_points must be at least 3")
    return np.linspace(design.theta_lower, design.theta_upper, grid_points)


def flat_prior(design: IvDesign, grid_points: int = 2001) -> Prior:
    grid = _design_grid(design, grid_points)
    return Prior(grid, trapezoid_masses(grid))


def invariant_info(design: IvDesign, theta):
    """Closed-form ``i(theta)`` for the linear IV kernel.

    ``tr(V^-1 [O11 - (O10 - O11 t) V^-1 (O01 - O11 t)])`` with
    ``V = Sigma(t, t)``. Accepts a scalar or an array of thetas.
    """
    t = np.asarray(theta, dtype=float)
    tt = np.atleast_1d(t)
    V = sigma_diag(design, tt)
    A = design.omega10[None] - tt[:, None, None] * design.omega11[None]
    At = design.omega01[None] - tt[:, None, None] * design.omega11[None]
    try:
        Vi_A = np.linalg.solve(V, A)
        Vi_O = np.linalg.solve(V, np.broadcast_to(design.omega11, V.shape))
        Vi_At = np.linalg.solve(V, At)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"Var(g(theta)) is singular on the requested thetas: {exc}") from None
    info = np.trace(Vi_O, axis1=1, axis2=2) - np.einsum("nab,nba->n", Vi_A, Vi_At)
    return float(info[0]) if t.ndim == 0 else info


def invariant_info_general(kernel: Kernel, theta: float, fd_step: float) -> np.ndarray:
    """``tr(S^-1 (d2S/dt dt~ - dS/dt S^-1 dS/dt~))`` at ``t = t~ = theta``.

    Kernel derivatives use central differences with step ``fd_step``.
    Returns a 1x1 matrix (scalar theta).
    """
    h = float(fd_step)
    t = float(theta)
    K = lambda a, b: np.atleast_2d(np.asarray(kernel(a, b), dtype=float))
    S = K(t, t)
    d1 = (K(t + h, t) - K(t - h, t)) / (2 * h)
    d2 = (K(t, t + h) - K(t, t - h)) / (2 * h)
    d12 = (K(t + h, t + h) - K(t + h, t - h) - K(t - h, t + h) + K(t - h, t - h)) / (4 * h * h)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ValueError(f"Sigma({t!r}, {t!r}) is not positive definite") from None
    solve = lambda M: np.linalg.solve(L.T, np.linalg.solve(L, M))
    return np.atleast_2d(np.trace(solve(d12 - d1 @ solve(d2))))


def alternative_invariant_density(kernel: Kernel, theta: float, fd_step: float) -> float:
    """Unnormalised ``|S|^-1/2 |d2S/dt dt~ - dS/dt S^-1 dS/dt~|^1/2``."""
    h = float(fd_step)
    t = float(theta)
    K = lambda a, b: np.atleast_2d(np.asarray(kernel(a, b), dtype=float))
    S = K(t, t)
    d1 = (K(t + h, t) - K(t - h, t)) / (2 * h)
    d2 = (K(t, t + h) - K(t, t - h)) / (2 * h)
    d12 = (K(t + h, t + h) - K(t + h, t - h) - K(t - h, t + h) + K(t - h, t - h)) / (4 * h * h)
    M = d12 - d1 @ np.linalg.solve(S, d2)
    return float(np.sqrt(abs(np.linalg.det(M))) / np.sqrt(np.linalg.det(S)))


def iv_kernel(design: IvDesign) -> Kernel:
    return lambda a, b: sigma_kernel(design, a, b)


def prior_from_density(grid, density) -> Prior:
    w = np.asarray(density, dtype=float) * trapezoid_masses(grid)
    return Prior(grid, w / w.sum())


@lru_cache(maxsize=64)
def invariant_prior(design: IvDesign, grid_points: int = 2001) -> Prior:
    grid = _design_grid(design, grid_points)
    return prior_from_density(grid, np.sqrt(invariant_info(design, grid)))


def cue_objective(draw, design: IvDesign, theta: float) -> float:
    """``g(theta)' Sigma(theta, theta)^-1 g(theta)`` via a Cholesky solve."""
    xi, _ = as_batch(draw, design.k)
    k = design.k
    g = xi[0, :k] - theta * xi[0, k:]
    try:
        L = np.linalg.cholesky(sigma_kernel(design, theta, theta))
    except np.linalg.LinAlgError:
        raise ValueError(f"Sigma(theta, theta) is not positive definite at theta={theta!r}") from None
    y = np.linalg.solve(L, g)
    return float(y @ y)


def posterior_weights(Q: np.ndarray, prior_weights: np.ndarray) -> np.ndarray:
    """Normalised ``pi_j exp(-(Q_j - min Q)/2)`` along the last axis."""
    Q = np.asarray(Q, dtype=float)
    qmin = np.min(Q, axis=-1, keepdims=True)
    w = prior_weights * np.exp(-0.5 * (Q - qmin))
    den = np.add.reduce(w, axis=-1, keepdims=True)
    assert np.all(den > 0), "quasi-posterior normaliser vanished"
    return w / den


def qb_from_objective(Q, prior_weights, r_values) -> np.ndarray:
    """Quasi-Bayes mean of ``r`` given objective values on a finite grid.

    ``r_values`` has shape ``(s,)`` or ``(s, p)``; result has shape
    ``Q.shape[:-1] + (p,)`` for 2-D ``r_values``.
    """
    w = posterior_weights(Q, np.asarray(prior_weights, dtype=float))
    r = np.asarray(r_values, dtype=float)
    if r.ndim == 1:
        return np.add.reduce(w * r, axis=-1)
    return np.einsum("...j,jp->...p", w, r)


def qb_mean(draw, design: IvDesign, prior: Prior, functional=None, objective: GridObjective | None = None):
    """Quasi-Bayes posterior mean of ``functional(theta)`` on ``prior.grid``.

    Works for a single draw or a batch of rows. ``objective`` may be passed to
    reuse the CUE weights tabulated on the prior grid.
    """
    xi, single = as_batch(draw, design.k)
    if objective is None:
        G = prior.grid.size
        if np.array_equal(prior.grid, _design_grid(design, G)):
            objective = grid_objective(design, CUE, G)
        else:
            objective = GridObjective(design, CUE, prior.grid)
    Q = objective.values(xi)
    r = prior.grid if functional is None else np.asarray(functional(prior.grid), dtype=float)
    out = qb_from_objective(Q, prior.weights, r)
    return float(out[0]) if single else out


def finite_objective(g, model: FiniteThetaModel) -> np.ndarray:
    """``Q(theta_j|g) = g_j' Sigma_jj^-1 g_j`` for every grid point; batch in leading axes."""
    g = np.asarray(g, dtype=float)
    gb = g.reshape(g.shape[:-1] + (model.s, model.k))
    Sinv = np.stack([np.linalg.inv(model.sigma_block(j)) for j in range(model.s)])
    return np.einsum("...ja,jab,...jb->...j", gb, Sinv, gb)


def qb_mean_finite(g, model: FiniteThetaModel, prior_weights):
    """Exact finite-sum quasi-Bayes mean on a finite parameter space."""
    pw = np.asarray(prior_weights, dtype=float)
    if pw.shape != (model.s,) or np.any(pw < 0) or abs(pw.sum() - 1) > 1e-12:
        raise ValueError("prior_weights must be a probability vector over the grid")
    out = qb_from_objective(finite_objective(g, model), pw, model.r_values)
    return out
