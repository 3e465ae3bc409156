"""Numerical probes of Lipschitz continuity and scale invariance.

Everything here is a check on estimator maps ``g -> delta(g)``: empirical
Lipschitz ratios over sampled pairs of moment realisations, the posterior-mean
bound for finitely supported priors, and scale invariance of estimators.
Estimators are passed as vectorised callables taking draws as rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import FiniteThetaModel, IvDesign
from .quasibayes import qb_mean_finite

Estimator = Callable[[np.ndarray], np.ndarray]
PairSampler = Callable[[int], tuple]

LOCAL_EPS = (1e-2, 1e-4, 1e-6)


def sup_norm(d: np.ndarray) -> np.ndarray:
    return np.max(np.abs(d), axis=-1)


def iv_sup_norm(design: IvDesign) -> Callable[[np.ndarray], np.ndarray]:
    """``sup_theta |dxi0 - dxi1 theta|`` over the design's parameter space.

    The map is linear in theta, so the sup is attained at an endpoint.
    """
    k, lo, hi = design.k, design.theta_lower, design.theta_upper

    def norm(d):
        d0, d1 = d[..., :k], d[..., k:]
        return np.maximum(np.abs(d0 - d1 * lo), np.abs(d0 - d1 * hi)).max(axis=-1)

    return norm


@dataclass
class LipschitzReport:
    max_ratio: float
    pair_count: int
    bound: float | None = None
    violated: bool = field(init=False)
    ratios: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.violated = self.bound is not None and self.max_ratio > self.bound * (1 + 1e-8)

    @property
    def median_ratio(self) -> float:
        return float(np.median(self.ratios)) if self.ratios is not None and self.ratios.size else 0.0


def empirical_lipschitz(delta: Estimator, sampler: PairSampler, pairs: int, norm=sup_norm,
                        bound: float | None = None) -> LipschitzReport:
    """Largest ``||delta(g) - delta(g')|| / ||g - g'||`` over sampled pairs.

    Pairs at zero distance are skipped and not counted.
    """
    if pairs < 1:
        raise ValueError("pairs must be at least 1")
    g, gp = sampler(pairs)
    g, gp = np.atleast_2d(g), np.atleast_2d(gp)
    dist = norm(g - gp)
    keep = dist > 0
    a = np.asarray(delta(g[keep]), dtype=float)
    b = np.asarray(delta(gp[keep]), dtype=float)
    diff = np.abs(a - b) if a.ndim == 1 else np.linalg.norm(a - b, axis=-1)
    ratios = diff / dist[keep]
    mx = float(ratios.max()) if ratios.size else 0.0
    return LipschitzReport(mx, int(keep.sum()), bound, ratios)


# -- pair samplers ----------------------------------------------------------


def gaussian_pairs(mean, chol, rng: np.random.Generator) -> PairSampler:
    """Independent pairs ``g, g' ~ N(mean, L L')``."""
    mean = np.asarray(mean, dtype=float)
    L = np.asarray(chol, dtype=float)

    def sample(n):
        z = rng.standard_normal((2, n, mean.size))
        g = mean + z @ L.T
        return g[0], g[1]

    return sample


def local_pairs(base: PairSampler, eps: float, rng: np.random.Generator) -> PairSampler:
    """``g' = g + eps * u`` with ``u`` uniform on the sup-norm unit sphere."""

    def sample(n):
        g, _ = base(n)
        u = rng.uniform(-1.0, 1.0, size=g.shape)
        u /= np.max(np.abs(u), axis=-1, keepdims=True)
        return g, g + eps * u

    return sample


def straddle_pairs(design: IvDesign, distance: float, rng: np.random.Generator) -> PairSampler:
    """Pairs on either side of ``xi1 = 0`` in a k=1 design.

    ``xi0`` is drawn away from zero and the pair differs only in ``xi1``, by
    an amount chosen so the IV sup-norm distance equals ``distance``.
    """
    if design.k != 1:
        raise ValueError("straddle pairs are defined for k=1 designs")
    h = distance / max(abs(design.theta_lower), abs(design.theta_upper))

    def sample(n):
        x0 = rng.choice((-1.0, 1.0), size=n) * rng.uniform(0.5, 2.0, size=n) * math.sqrt(design.omega[0, 0])
        x1 = rng.uniform(-0.5, 0.5, size=n) * h
        return np.column_stack([x0, x1 - h / 2]), np.column_stack([x0, x1 + h / 2])

    return sample


# -- finite priors and the posterior-mean bound -----------------------------


@dataclass(frozen=True, eq=False)
class FinitePrior:
    """Finitely supported prior over ``(theta_j, m)`` pairs.

    ``support`` holds ``(theta_index, m, weight)`` triples; each ``m`` must
    vanish on its own theta block.
    """

    support: tuple

    def __post_init__(self):
        sup = tuple((int(j), np.asarray(m, dtype=float).reshape(-1), float(w)) for j, m, w in self.support)
        if not sup:
            raise ValueError("prior needs at least one support point")
        w = np.array([s[2] for s in sup])
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("support weights must be positive and sum to 1")
        object.__setattr__(self, "support", sup)

    def validate(self, model: FiniteThetaModel) -> None:
        for j, m, _ in self.support:
            if not 0 <= j < model.s or m.shape != (model.s * model.k,):
                raise ValueError(f"support point ({j}, m) does not fit the model")
            if np.any(np.abs(m[model.block(j)]) > 1e-12 * max(1.0, np.max(np.abs(m)))):
                raise ValueError(f"support point for theta index {j} has m(theta_j) != 0")

    @property
    def indices(self) -> np.ndarray:
        return np.array([s[0] for s in self.support])

    @property
    def means(self) -> np.ndarray:
        return np.stack([s[1] for s in self.support])

    @property
    def weights(self) -> np.ndarray:
        return np.array([s[2] for s in self.support])


def _sigma_solve(model: FiniteThetaModel, M: np.ndarray) -> np.ndarray:
    L = model.chol
    return np.linalg.solve(L.T, np.linalg.solve(L, M))


def finite_prior_posterior_mean(g, model: FiniteThetaModel, prior: FinitePrior) -> np.ndarray:
    """Posterior mean of ``r`` under a finitely supported prior.

    Weight of support point ``j`` is ``pi_j exp(m_j' S^-1 g - m_j' S^-1 m_j / 2)``.
    ``g`` may be a single vector or a batch in rows; output has trailing
    dimension ``p``.
    """
    prior.validate(model)
    M = prior.means
    A = _sigma_solve(model, M.T).T  # rows S^-1 m_j
    g = np.asarray(g, dtype=float)
    logw = np.log(prior.weights) - 0.5 * np.einsum("jd,jd->j", A, M) + g @ A.T
    logw -= np.max(logw, axis=-1, keepdims=True)
    w = np.exp(logw)
    w /= np.add.reduce(w, axis=-1, keepdims=True)
    return w @ model.r_values[prior.indices]


def identification_strength(model: FiniteThetaModel, prior: FinitePrior) -> float:
    """``max_j ||S^-1 m_j||_1`` over the prior's support."""
    A = _sigma_solve(model, prior.means.T)
    return float(np.max(np.sum(np.abs(A), axis=0)))


def theorem1_bound_check(model: FiniteThetaModel, prior: FinitePrior, W_bound: float, pairs: int,
                         rng: np.random.Generator | None = None) -> LipschitzReport:
    """Probe the posterior-mean Lipschitz bound ``K = r_bar sqrt(p) W_bound``.

    Half the pairs are independent draws from the prior predictive, half are
    local perturbations of such draws at the scales in ``LOCAL_EPS``.
    """
    prior.validate(model)
    strength = identification_strength(model, prior)
    if strength > W_bound * (1 + 1e-12):
        raise ValueError(f"prior has identification strength {strength:.6g} > W_bound {W_bound:.6g}")
    rng = rng or np.random.default_rng(0)
    D = model.s * model.k

    def predictive(n):
        j = rng.choice(len(prior.support), size=(2, n), p=prior.weights)
        z = rng.standard_normal((2, n, D)) @ model.chol.T
        g = prior.means[j] + z
        return g[0], g[1]

    n_far = pairs // 2
    parts = [predictive(n_far)]
    rest = pairs - n_far
    for i, eps in enumerate(LOCAL_EPS):
        n = rest // len(LOCAL_EPS) + (1 if i < rest % len(LOCAL_EPS) else 0)
        parts.append(local_pairs(predictive, eps, rng)(n))
    g = np.concatenate([p[0] for p in parts])
    gp = np.concatenate([p[1] for p in parts])
    K = model.r_bar * math.sqrt(model.p) * W_bound
    return empirical_lipschitz(lambda x: finite_prior_posterior_mean(x, model, prior),
                               lambda n: (g, gp), pairs, bound=K)


def two_point_model(theta=(0.0, 1.0)) -> FiniteThetaModel:
    return FiniteThetaModel(np.asarray(theta, dtype=float), 1, np.zeros(2), np.eye(2))


def two_point_strength_prior(C: float) -> FinitePrior:
    """Equal mass on ``(theta_1, m=(0, C))`` and ``(theta_2, m=(C, 0))``."""
    return FinitePrior(((0, (0.0, C), 0.5), (1, (C, 0.0), 0.5)))


def random_finite_prior(model: FiniteThetaModel, rng: np.random.Generator, n_support: int = 4,
                        scale: float = 2.0) -> FinitePrior:
    sup = []
    w = rng.dirichlet(np.ones(n_support))
    for i in range(n_support):
        j = int(rng.integers(model.s))
        m = scale * rng.standard_normal(model.s * model.k)
        m[model.block(j)] = 0.0
        sup.append((j, m, w[i]))
    w_sum = sum(s[2] for s in sup)
    return FinitePrior(tuple((j, m, wi / w_sum) for j, m, wi in sup))


def random_finite_model(rng: np.random.Generator, s: int | None = None, k: int | None = None) -> FiniteThetaModel:
    s = s or int(rng.integers(2, 6))
    k = k or int(rng.integers(1, 3))
    A = rng.standard_normal((s * k, s * k))
    sigma = A @ A.T / (s * k) + 0.5 * np.eye(s * k)
    return FiniteThetaModel(np.sort(rng.uniform(-2, 2, s)), k, np.zeros(s * k), sigma,
                            r_values=rng.uniform(-1, 1, (s, 1)))


# -- quasi-Bayes on the two-point example -----------------------------------


def two_point_qb(g) -> np.ndarray:
    """Flat-prior quasi-Bayes mean on ``Theta = {0, 1}``, ``Sigma = I``."""
    g = np.atleast_2d(np.asarray(g, dtype=float))
    return qb_mean_finite(g, two_point_model(), np.array([0.5, 0.5]))[:, 0]


def two_point_gradient_norm(g0, g1) -> np.ndarray:
    """``||grad delta||_1 = p (1 - p) (|g0| + |g1|)`` for the two-point estimator."""
    g0, g1 = np.asarray(g0, dtype=float), np.asarray(g1, dtype=float)
    x = 0.5 * g1 * g1 - 0.5 * g0 * g0
    # p (1 - p) with p = 1 / (1 + e^x), in log space to avoid overflow
    pq = np.exp(-np.logaddexp(0.0, x) - np.logaddexp(0.0, -x))
    return pq * (np.abs(g0) + np.abs(g1))


def two_point_region_constant(C: float, n: int = 4001, span: float = 40.0) -> float:
    """Sup of the sup-norm Lipschitz modulus on ``{min_j g_j^2 <= C}``.

    By symmetry it suffices to take ``|g0| <= sqrt(C)`` and ``g1 >= 0``.
    """
    a = np.linspace(0.0, math.sqrt(C), n)[:, None]
    b = np.linspace(0.0, span, n)[None, :]
    return float(np.max(two_point_gradient_norm(a, b)))


def two_point_region_pairs(C: float, eps: float, rng: np.random.Generator) -> PairSampler:
    """Local pairs with both endpoints in ``{min_j g_j^2 <= C}``."""

    def sample(n):
        g = np.empty((0, 4))
        while g.shape[0] < n:
            cand = rng.uniform(-8.0, 8.0, size=(2 * n, 2))
            u = rng.uniform(-1.0, 1.0, size=cand.shape)
            u /= np.max(np.abs(u), axis=1, keepdims=True)
            gp = cand + eps * u
            ok = (np.min(cand**2, axis=1) <= C) & (np.min(gp**2, axis=1) <= C)
            g = np.concatenate([g, np.column_stack([cand[ok], gp[ok]])])
        g = g[:n]
        return g[:, :2], g[:, 2:]

    return sample


# -- scale invariance -------------------------------------------------------


def scale_invariance_check(delta: Estimator, draws: np.ndarray, scales: Sequence[float], tol: float = 0.0) -> bool:
    """True iff ``delta(c * g)`` matches ``delta(g)`` for every draw and scale.

    ``tol`` is relative to ``max(1, |delta(g)|)``; zero demands exact equality.
    """
    scales = [float(c) for c in scales]
    if any(c <= 0 for c in scales):
        raise ValueError("scales must be positive")
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    ref = np.asarray(delta(draws), dtype=float)
    for c in scales:
        got = np.asarray(delta(c * draws), dtype=float)
        if np.any(np.abs(got - ref) > tol * np.maximum(1.0, np.abs(ref))):
            return False
    return True
