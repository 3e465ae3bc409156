"""GMM estimators in the limit experiment.

TSLS has a closed form. CUE and LIML minimise ``g(theta)' W(theta) g(theta)``
over a uniform grid on the parameter space, polish the best grid point with
three rounds of a local parabola fit, and finish with two slope-based steps
on the analytic derivative ``dQ/dtheta``. Function values alone pin the
minimiser down only to about ``sqrt(eps)``; the slope steps bring it to near
machine precision, which keeps the estimate reproducible when ``g`` is
rescaled. Every estimator accepts a
single :class:`~weakgmm.model.MomentDraw`, a stacked ``(2k,)`` vector, or a
batch of draws as rows of an ``(n, 2k)`` array.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .model import FiniteThetaModel, IvDesign, MomentDraw, sigma_diag

TSLS, CUE, LIML, FINITE_GMM = "tsls", "cue", "liml", "finite_gmm"
LOWEST_THETA = "lowest_theta"
REFINE_ROUNDS = 3
REFINE_SHRINK = 100.0
POLISH_ROUNDS = 2


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str = CUE
    grid_points: int = 2001
    tie_break: str = LOWEST_THETA

    def __post_init__(self):
        if self.kind not in (TSLS, CUE, LIML, FINITE_GMM):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.grid_points < 3:
            raise ValueError("grid_points must be at least 3")
        if self.tie_break != LOWEST_THETA:
            raise ValueError(f"unsupported tie-break rule {self.tie_break!r}")


def as_batch(draw, k: int | None = None) -> tuple[np.ndarray, bool]:
    """Return draws as a C-contiguous ``(n, 2k)`` array and whether the input was a single draw."""
    if isinstance(draw, MomentDraw):
        return draw.stacked[None, :], True
    xi = np.ascontiguousarray(draw, dtype=float)
    single = xi.ndim == 1
    xi = np.atleast_2d(xi)
    if xi.shape[1] % 2 or (k is not None and xi.shape[1] != 2 * k):
        raise ValueError(f"draws must have 2k={2 * k if k else '2k'} columns, got {xi.shape[1]}")
    return xi, single


def _unbatch(x, single: bool):
    return float(x[0]) if single else x


def _quad(a, W, b):
    return np.einsum("na,ab,nb->n", a, W, b)


def tsls(draw, design: IvDesign):
    """``min{theta_U, max{xi1'W xi0 / xi1'W xi1, theta_L}}`` with ``W = qzz_inv``.

    A zero denominator returns ``theta_L``.
    """
    xi, single = as_batch(draw, design.k)
    k = design.k
    xi0, xi1 = xi[:, :k], xi[:, k:]
    num = _quad(xi1, design.qzz_inv, xi0)
    den = _quad(xi1, design.qzz_inv, xi1)
    lo, hi = design.theta_bounds
    ratio = np.divide(num, den, out=np.full_like(num, lo), where=den > 0)
    return _unbatch(np.minimum(hi, np.maximum(ratio, lo)), single)


class GridObjective:
    """``Q(theta) = g(theta)' W(theta) g(theta)`` tabulated on a theta grid.

    ``kind`` selects the weight: ``"cue"`` uses ``Sigma(theta, theta)^-1``,
    ``"liml"`` uses ``qzz_inv / (su2 - 2 suv theta + sv2 theta^2)``.
    Grid points where ``Sigma(theta, theta)`` is numerically singular are
    skipped; ``skipped`` counts them.
    """

    def __init__(self, design: IvDesign, kind: str, grid):
        if kind not in (CUE, LIML):
            raise ValueError(f"grid objective needs kind 'cue' or 'liml', got {kind!r}")
        self.design = design
        self.kind = kind
        self.theta = np.ascontiguousarray(grid, dtype=float)
        self.W, self.valid = self.weight_at(self.theta)
        self.skipped = int(np.count_nonzero(~self.valid))
        if self.skipped == self.theta.size:
            raise ValueError(f"design {design.id!r}: weight matrix singular at every grid point")

    def weight_at(self, theta) -> tuple[np.ndarray, np.ndarray]:
        d = self.design
        theta = np.asarray(theta, dtype=float)
        if self.kind == LIML:
            s = d.sigma_u2 - 2.0 * d.sigma_uv * theta + d.sigma_v2 * theta * theta
            assert np.all(s > 0), "LIML scalar weight must be positive"
            W = d.qzz_inv[None, :, :] / s[:, None, None]
            return np.ascontiguousarray(W), np.ones(theta.shape, dtype=bool)
        S = sigma_diag(d, theta)
        if d.k == 1:
            valid = S[:, 0, 0] > 1e-12 * np.max(np.abs(d.omega))
            W = np.divide(1.0, S, out=np.zeros_like(S), where=valid[:, None, None])
            return W, valid
        eig = np.linalg.eigvalsh(S)
        valid = eig[:, 0] > 1e-12 * np.maximum(eig[:, -1], 1e-300)
        S = np.where(valid[:, None, None], S, np.eye(d.k))
        return np.ascontiguousarray(np.linalg.inv(S)), valid

    def slope_weight_at(self, theta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``W(theta)``, ``dW/dtheta`` and the validity mask."""
        d = self.design
        theta = np.asarray(theta, dtype=float)
        W, valid = self.weight_at(theta)
        if self.kind == LIML:
            s = d.sigma_u2 - 2.0 * d.sigma_uv * theta + d.sigma_v2 * theta * theta
            ds = 2.0 * (d.sigma_v2 * theta - d.sigma_uv)
            return W, W * (-ds / s)[:, None, None], valid
        dS = (-(d.omega01 + d.omega10))[None] + 2.0 * theta[:, None, None] * d.omega11[None]
        dW = -np.einsum("nab,nbc,ncd->nad", W, dS, W)
        return W, dW, valid

    def slope(self, draw, theta) -> np.ndarray:
        """``dQ/dtheta`` of each draw at its own ``theta``."""
        xi, _ = as_batch(draw, self.design.k)
        theta = np.ascontiguousarray(np.broadcast_to(np.asarray(theta, dtype=float), (xi.shape[0],)))
        W, dW, valid = self.slope_weight_at(theta)
        return _kernels.point_slopes(xi, self.design.k, theta, W, np.ascontiguousarray(dW), valid)

    def values(self, draw) -> np.ndarray:
        xi, _ = as_batch(draw, self.design.k)
        return _kernels.grid_values(xi, self.design.k, self.theta, self.W, self.valid)

    def at(self, draw, theta) -> np.ndarray:
        """Objective of each draw at its own ``theta`` (broadcast if scalar)."""
        xi, _ = as_batch(draw, self.design.k)
        theta = np.ascontiguousarray(np.broadcast_to(np.asarray(theta, dtype=float), (xi.shape[0],)))
        W, valid = self.weight_at(theta)
        return _kernels.point_values(xi, self.design.k, theta, W, valid)

    def minimize(self, draw):
        """Grid argmin (lowest theta on ties), parabola refinement, slope polish."""
        xi, single = as_batch(draw, self.design.k)
        idx, fbest = _kernels.grid_argmin(xi, self.design.k, self.theta, self.W, self.valid)
        theta = self.theta
        G = theta.size
        c = theta[idx]
        lo = np.maximum(theta[np.maximum(idx - 1, 0)], self.design.theta_lower)
        hi = np.minimum(theta[np.minimum(idx + 1, G - 1)], self.design.theta_upper)
        h = (theta[-1] - theta[0]) / (G - 1)
        for _ in range(REFINE_ROUNDS):
            fm = self.at(xi, c - h)
            fp = self.at(xi, c + h)
            curv = fp - 2.0 * fbest + fm
            ok = np.isfinite(curv) & (curv > 0)
            step = np.divide(fp - fm, 2.0 * curv, out=np.zeros_like(curv), where=ok)
            v = np.clip(c - h * step, lo, hi)
            fv = self.at(xi, v)
            better = ok & (fv < fbest)
            c = np.where(better, v, c)
            fbest = np.where(better, fv, fbest)
            h /= REFINE_SHRINK
        # Newton step on the slope with a differenced curvature, kept in the bracket
        hd = 1e-3 * (theta[-1] - theta[0]) / (G - 1)
        for _ in range(POLISH_ROUNDS):
            d0 = self.slope(xi, c)
            den = self.slope(xi, c + hd) - self.slope(xi, c - hd)
            ok = np.isfinite(den) & (den > 0) & np.isfinite(d0)
            step = np.divide(2.0 * hd * d0, den, out=np.zeros_like(den), where=ok)
            c = np.where(ok, np.clip(c - step, lo, hi), c)
        return _unbatch(c, single)


@lru_cache(maxsize=128)
def grid_objective(design: IvDesign, kind: str, grid_points: int = 2001) -> GridObjective:
    lo, hi = design.theta_bounds
    return GridObjective(design, kind, np.linspace(lo, hi, grid_points))


def cue(draw, design: IvDesign, spec: EstimatorSpec | None = None):
    """Continuously updated GMM: weight ``Sigma(theta, theta)^-1``."""
    spec = spec or EstimatorSpec(CUE)
    if spec.kind != CUE:
        raise ValueError("cue() needs an EstimatorSpec of kind 'cue'")
    return grid_objective(design, CUE, spec.grid_points).minimize(draw)


def liml(draw, design: IvDesign, spec: EstimatorSpec | None = None):
    """LIML as GMM with the design's true error variances in the scalar weight."""
    spec = spec or EstimatorSpec(LIML)
    if spec.kind != LIML:
        raise ValueError("liml() needs an EstimatorSpec of kind 'liml'")
    return grid_objective(design, LIML, spec.grid_points).minimize(draw)


def estimate(spec: EstimatorSpec, draw, design: IvDesign):
    if spec.kind == TSLS:
        return tsls(draw, design)
    if spec.kind == CUE:
        return cue(draw, design, spec)
    if spec.kind == LIML:
        return liml(draw, design, spec)
    raise ValueError("finite_gmm works on a FiniteThetaModel; call finite_gmm() directly")


def finite_gmm(g, model: FiniteThetaModel):
    """Index of the grid point minimising ``g(theta_j)' W(theta_j) g(theta_j)``.

    Ties go to the lowest index. ``g`` may be one ``(s*k,)`` vector or a batch.
    """
    g = np.asarray(g, dtype=float)
    single = g.ndim == 1
    gb = np.atleast_2d(g).reshape(-1, model.s, model.k)
    W = np.stack(model.weights)
    q = np.einsum("nja,jab,njb->nj", gb, W, gb)
    idx = np.argmin(q, axis=1)
    return int(idx[0]) if single else idx


def plug_in(theta_hat, functional):
    return functional(theta_hat)
