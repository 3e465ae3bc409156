"""Verification checks run by ``weakgmm verify`` and the acceptance tests.

Each ``check_*`` function is deterministic given its seed and returns a
:class:`CheckResult` with the quantity compared against its tolerance.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import estimators as est
from .bagging import BagConfig, bag_many
from .lipschitz_lab import (
    two_point_model, two_point_strength_prior, empirical_lipschitz, finite_prior_posterior_mean,
    identification_strength, iv_sup_norm, random_finite_model, random_finite_prior,
    scale_invariance_check, straddle_pairs, theorem1_bound_check,
)
from .model import FiniteThetaModel, IvDesign, RngStream, draw_iv_many, homoskedastic_omega
from .montecarlo import generate_synthetic_designs
from .quasibayes import (
    invariant_info, invariant_info_general, invariant_prior, iv_kernel, qb_from_objective,
    qb_mean_finite, trapezoid_masses,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def __post_init__(self):
        self.passed = bool(self.passed)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.details}"

    def to_dict(self) -> dict:
        return asdict(self)


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def homoskedastic_design(sigma_uv=0.5, sigma_u2=1.0, sigma_v2=1.0, k=1, pi_scale=1.0, bound_mult=20.0,
                         omega_tilde=None) -> IvDesign:
    Qzz = np.eye(k) if omega_tilde is None else np.asarray(omega_tilde, dtype=float)
    half = bound_mult * abs(sigma_uv / sigma_v2)
    return IvDesign(
        id="homoskedastic", k=k, pi_star=pi_scale * np.ones(k), theta_star=0.0,
        omega=homoskedastic_omega(sigma_u2, sigma_v2, sigma_uv, Qzz),
        sigma_u2=sigma_u2, sigma_v2=sigma_v2, sigma_uv=sigma_uv, qzz_inv=np.linalg.inv(Qzz),
        se_ref=1.0, theta_bounds=(-half, half),
    )


# -- criterion 1 ------------------------------------------------------------


@_timed
def check_two_point_derivative(g0: float = 8.0, step: float = 1e-4) -> CheckResult:
    """Central difference of the two-point quasi-Bayes mean at ``g(0) = g(1)``."""
    m = two_point_model()
    w = np.array([0.5, 0.5])
    up = qb_mean_finite(np.array([g0 + step, g0]), m, w)[0]
    dn = qb_mean_finite(np.array([g0 - step, g0]), m, w)[0]
    fd = (up - dn) / (2 * step)
    return CheckResult("two_point_qb_derivative", abs(fd - g0 / 4) <= 1e-3,
                       {"finite_difference": fd, "expected": g0 / 4})


# -- criterion 2 ------------------------------------------------------------


@_timed
def check_qb_objective_lipschitz(pairs: int = 10_000, s: int = 20, seed: int = 0) -> CheckResult:
    """``|delta(Q) - delta(Q')| <= r_bar sqrt(p) / 2 * ||Q - Q'||_inf`` on random pairs."""
    rng = np.random.default_rng(seed)
    r = rng.uniform(-1.0, 1.0, s)
    r[rng.integers(s)] = rng.choice((-1.0, 1.0))
    r_bar = float(np.max(np.abs(r)))
    prior = rng.dirichlet(np.ones(s))
    Q = rng.chisquare(1, size=(pairs, s)) * rng.uniform(0.1, 10.0, size=(pairs, 1))
    scale = 10.0 ** rng.uniform(-6, 1, size=(pairs, 1))
    Qp = np.abs(Q + scale * rng.standard_normal((pairs, s)))
    d = np.abs(qb_from_objective(Q, prior, r) - qb_from_objective(Qp, prior, r))
    dist = np.max(np.abs(Q - Qp), axis=1)
    bound = 0.5 * r_bar * dist
    ratio = d / dist
    violations = int(np.count_nonzero(d > bound))
    return CheckResult("qb_lipschitz_in_objective", violations == 0,
                       {"violations": violations, "max_ratio": float(ratio.max()), "K": 0.5 * r_bar, "pairs": pairs})


# -- criterion 3 ------------------------------------------------------------


def half_score_variance(design: IvDesign, theta: float, n: int, seed: int, fd_step: float | None = None) -> float:
    """Monte Carlo ``Var((1/2) dQ(theta|G)/dtheta)`` for ``G ~ GP(0, Sigma)``."""
    h = fd_step or 1e-5 * (design.theta_upper - design.theta_lower)
    centred = design.replace(pi_star=np.zeros(design.k))
    xi = draw_iv_many(centred, RngStream(seed, (3,)), n)
    obj = est.GridObjective(centred, est.CUE, np.array([design.theta_lower, design.theta_upper]))
    score = 0.5 * (obj.at(xi, theta + h) - obj.at(xi, theta - h)) / (2 * h)
    return float(np.var(score, ddof=1))


@_timed
def check_invariant_prior(n_points: int = 5, draws: int = 200_000, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    rel = []
    for i in range(n_points):
        k = int(rng.integers(1, 4))
        d = generate_synthetic_designs(k, 10.0, 1, hetero=True, seed=int(rng.integers(2**31)))[0]
        theta = float(rng.uniform(d.theta_lower, d.theta_upper))
        mc = half_score_variance(d, theta, draws, seed + i)
        rel.append(abs(mc / invariant_info(d, theta) - 1))
    a_ok = max(rel) <= 0.02

    d = homoskedastic_design(sigma_uv=0.5, sigma_v2=1.0)
    prior = invariant_prior(d, 2001)
    step = prior.grid[1] - prior.grid[0]
    mode = float(prior.grid[np.argmax(prior.density())])
    b_ok = abs(mode - d.sigma_uv / d.sigma_v2) <= step

    inv_sqrt = 1.0 / np.sqrt(invariant_info(d, prior.grid))
    coef = np.polyfit(prior.grid, inv_sqrt, 2)
    resid = float(np.max(np.abs(np.polyval(coef, prior.grid) - inv_sqrt)) / np.max(np.abs(inv_sqrt)))
    c_ok = resid < 1e-6
    return CheckResult("invariant_prior", a_ok and b_ok and c_ok, {
        "max_rel_err_mc": max(rel), "mode": mode, "mode_target": d.sigma_uv / d.sigma_v2,
        "grid_step": step, "quadratic_fit_rel_resid": resid,
    })


# -- criterion 4 ------------------------------------------------------------


def reparameterization_tv(design: IvDesign, grid_points: int = 2001) -> float:
    """Total variation between the pushforward of the theta prior under arctan
    and the invariant prior built directly from the reparameterised kernel."""
    lo, hi = math.atan(design.theta_lower), math.atan(design.theta_upper)
    psi = np.linspace(lo, hi, grid_points)
    kernel = iv_kernel(design)
    kh = lambda a, b: kernel(math.tan(a), math.tan(b))
    fd = 1e-4 * (hi - lo)
    dens_h = np.sqrt([invariant_info_general(kh, p, fd)[0, 0] for p in psi])
    dens_h /= np.sum(dens_h * trapezoid_masses(psi)) * (hi - lo)

    theta = np.linspace(design.theta_lower, design.theta_upper, grid_points)
    z = np.sum(np.sqrt(invariant_info(design, theta)) * trapezoid_masses(theta)) * (theta[-1] - theta[0])
    t = np.tan(psi)
    push = np.sqrt(invariant_info(design, t)) / z / np.cos(psi) ** 2
    return float(0.5 * np.sum(np.abs(push - dens_h) * trapezoid_masses(psi)) * (hi - lo))


def moment_transform_rel_diff(design: IvDesign, thetas, seed: int = 0) -> float:
    """Relative change in the general information under ``g -> B(theta) g``."""
    rng = np.random.default_rng(seed)
    k = design.k
    L = design.theta_upper - design.theta_lower
    A0 = rng.standard_normal((k, k)) + 3 * np.eye(k)
    A1, A2 = 0.3 * rng.standard_normal((2, k, k))
    B = lambda t: A0 + math.sin(t / L) * A1 + (t / L) ** 2 * A2
    kernel = iv_kernel(design)
    kb = lambda a, b: B(a) @ kernel(a, b) @ B(b).T
    fd = 1e-4 * L
    out = 0.0
    for t in thetas:
        i0 = invariant_info_general(kernel, t, fd)[0, 0]
        i1 = invariant_info_general(kb, t, fd)[0, 0]
        out = max(out, abs(i1 / i0 - 1))
    return out


@_timed
def check_invariance(seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    tv = []
    rel = []
    for hetero, k in ((False, 1), (True, 1), (True, 2)):
        d = generate_synthetic_designs(k, 10.0, 1, hetero=hetero, seed=int(rng.integers(2**31)))[0]
        tv.append(reparameterization_tv(d))
        rel.append(moment_transform_rel_diff(d, rng.uniform(d.theta_lower, d.theta_upper, 5), seed))
    return CheckResult("prior_invariance", max(tv) <= 1e-4 and max(rel) <= 1e-6,
                       {"max_tv_reparam": max(tv), "max_rel_diff_transform": max(rel)})


# -- criterion 5 ------------------------------------------------------------

SCALES = (0.5, 1.0, 2.0, 100.0)
CLOSED_FORM_RTOL = 1e-14
GRID_RTOL = 1e-10


@_timed
def check_scale_invariance_and_witness(draws: int = 200, pairs: int = 200, seed: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    invariant = {}
    for k in (1, 2, 3):
        d = generate_synthetic_designs(k, 5.0, 1, hetero=True, seed=int(rng.integers(2**31)))[0]
        xi = draw_iv_many(d, RngStream(seed, (k,)), draws)
        invariant[f"tsls_k{k}"] = scale_invariance_check(lambda x: est.tsls(x, d), xi, SCALES, CLOSED_FORM_RTOL)
        invariant[f"cue_k{k}"] = scale_invariance_check(lambda x: est.cue(x, d), xi, SCALES, GRID_RTOL)
        invariant[f"liml_k{k}"] = scale_invariance_check(lambda x: est.liml(x, d), xi, SCALES, GRID_RTOL)
        fm = FiniteThetaModel(np.linspace(-1, 1, 5), k, np.zeros(5 * k),
                              np.kron(np.eye(5), d.omega[:k, :k]))
        g = rng.standard_normal((draws, 5 * k))
        invariant[f"finite_gmm_k{k}"] = scale_invariance_check(lambda x: est.finite_gmm(x, fm).astype(float), g, SCALES, 0.0)

    d = generate_synthetic_designs(1, 5.0, 1, hetero=False, seed=seed)[0]
    rng_span = d.theta_upper - d.theta_lower
    norm = iv_sup_norm(d)
    raw = empirical_lipschitz(lambda x: est.tsls(x, d), straddle_pairs(d, 1e-6, np.random.default_rng(seed)), pairs, norm)
    stream = RngStream(seed, (0, 0))
    cfg = BagConfig(400)
    bagged = empirical_lipschitz(
        lambda x: bag_many(est.tsls, x, d, cfg, [stream] * len(x)),
        straddle_pairs(d, 1e-6, np.random.default_rng(seed)), pairs, norm,
    )
    raw_ok = raw.max_ratio > 1e4 * rng_span
    bag_ok = bagged.max_ratio < 100 * bagged.median_ratio
    return CheckResult("scale_invariance_and_witness", all(invariant.values()) and raw_ok and bag_ok, {
        "scale_invariant": invariant, "tsls_straddle_ratio": raw.max_ratio, "threshold": 1e4 * rng_span,
        "bagged_max_ratio": bagged.max_ratio, "bagged_median_ratio": bagged.median_ratio,
    })


# -- criterion 6 ------------------------------------------------------------


@_timed
def check_posterior_mean_bound(priors: int = 20, pairs: int = 100_000, seed: int = 6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    violated = 0
    for _ in range(priors):
        m = random_finite_model(rng)
        p = random_finite_prior(m, rng, n_support=int(rng.integers(1, 6)), scale=float(rng.uniform(0.2, 3.0)))
        rep = theorem1_bound_check(m, p, identification_strength(m, p), pairs, rng)
        violated += int(rep.violated)
        worst = max(worst, rep.max_ratio / rep.bound if rep.bound else 0.0)
    return CheckResult("finite_prior_posterior_mean_bound", violated == 0,
                       {"priors_violated": violated, "max_ratio_over_K": worst, "pairs_per_prior": pairs})


# -- criterion 7 ------------------------------------------------------------


@_timed
def check_strength_limit(Cs=(0.0, 5.0, 10.0, 20.0, 50.0)) -> CheckResult:
    m = two_point_model()
    g = np.array([0.0, 1.0])
    vals = [float(finite_prior_posterior_mean(g, m, two_point_strength_prior(C))[0]) for C in Cs]
    mono = all(b < a for a, b in zip(vals, vals[1:]))
    return CheckResult("strength_limit", mono and vals[-1] <= 1e-6, {"C": list(Cs), "delta": vals})


# -- criterion 8 ------------------------------------------------------------


def golden_section(f, a, b, iters: int = 120):
    """Golden-section minimiser in extended precision, vectorised over problems.

    ``f`` maps a ``longdouble`` array of points (one per problem) to values.
    """
    a = np.asarray(a, dtype=np.longdouble).copy()
    b = np.asarray(b, dtype=np.longdouble).copy()
    invphi = (np.sqrt(np.longdouble(5)) - 1) / 2
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        nc = np.where(left, b - invphi * (b - a), d)
        nd = np.where(left, c, a + invphi * (b - a))
        fnew = f(np.where(left, nc, nd))
        fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
        c, d = nc, nd
    return ((a + b) / 2).astype(float)


def tsls_objective_ld(xi: np.ndarray, design: IvDesign):
    """Batch TSLS objective ``(xi0 - t xi1)' W (xi0 - t xi1)`` in long double."""
    k = design.k
    x0, x1 = xi[:, :k].astype(np.longdouble), xi[:, k:].astype(np.longdouble)
    W = design.qzz_inv.astype(np.longdouble)

    def q(t):
        e = x0 - t[:, None] * x1
        return np.einsum("na,ab,nb->n", e, W, e)

    return q


@_timed
def check_oracles(draws: int = 1000, dense_points: int = 1_000_001, seed: int = 8) -> CheckResult:
    rng = np.random.default_rng(seed)
    tsls_err = 0.0
    grid_err = {est.CUE: 0.0, est.LIML: 0.0}
    grid_tol = 0.0
    per_k = {1: draws - 2 * (draws // 3), 2: draws // 3, 3: draws // 3}
    for k, n in per_k.items():
        d = generate_synthetic_designs(k, float(rng.uniform(2, 20)), 1, hetero=True, seed=int(rng.integers(2**31)))[0]
        xi = draw_iv_many(d, RngStream(seed, (k,)), n)
        t = est.tsls(xi, d)
        ref = golden_section(tsls_objective_ld(xi, d), np.full(n, d.theta_lower), np.full(n, d.theta_upper))
        tsls_err = max(tsls_err, float(np.max(np.abs(t - ref))))
        for kind in grid_err:
            dense = est.GridObjective(d, kind, np.linspace(d.theta_lower, d.theta_upper, dense_points))
            step = dense.theta[1] - dense.theta[0]
            grid_tol = max(grid_tol, step)
            idx, _ = _dense_argmin(dense, xi)
            got = est.grid_objective(d, kind).minimize(xi)
            grid_err[kind] = max(grid_err[kind], float(np.max(np.abs(got - dense.theta[idx]) / step)))
    ok = tsls_err <= 1e-8 and all(v <= 1.0 for v in grid_err.values())
    return CheckResult("closed_form_and_grid_oracles", ok, {
        "tsls_max_abs_err": tsls_err, "cue_err_in_dense_steps": grid_err[est.CUE],
        "liml_err_in_dense_steps": grid_err[est.LIML],
    })


def _dense_argmin(obj: est.GridObjective, xi):
    from . import _kernels

    return _kernels.grid_argmin(xi, obj.design.k, obj.theta, obj.W, obj.valid)


CHECKS = (
    check_two_point_derivative, check_qb_objective_lipschitz, check_invariant_prior, check_invariance,
    check_scale_invariance_and_witness, check_posterior_mean_bound, check_strength_limit, check_oracles,
)


def run_all(quick: bool = False) -> list[CheckResult]:
    """Run criteria 1-8. ``quick`` shrinks sample sizes for smoke runs."""
    if not quick:
        return [c() for c in CHECKS]
    return [
        check_two_point_derivative(), check_qb_objective_lipschitz(pairs=1000), check_invariant_prior(n_points=2, draws=200_000),
        check_invariance(), check_scale_invariance_and_witness(draws=50, pairs=50), check_posterior_mean_bound(priors=3, pairs=5000),
        check_strength_limit(), check_oracles(draws=60, dense_points=200_001),
    ]
