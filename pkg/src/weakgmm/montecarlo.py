"""Monte Carlo comparison of estimators across calibrated IV designs.

Replication ``r`` of specification ``s`` draws its moments from stream
``(seed, (s, r))`` and its bagging noise from ``(seed, (s, r, 0))``. Work is
split into fixed-size chunks of replications that do not depend on the number
of worker threads, and per-replication results are reduced in index order, so
output is bitwise identical for any thread count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import estimators as est
from .bagging import BagConfig, bag_noise, pairwise_mean
from .functionals import ENDOG_CORR, IDENTITY, FunctionalSpec
from .model import IvDesign, RngStream, draw_iv, homoskedastic_omega, sigma_kernel
from .quasibayes import flat_prior, invariant_prior, qb_from_objective

ESTIMATORS = ("tsls", "cue", "liml", "btsls", "bcue", "qb-flat", "qb-inv")
FUNCTIONALS = (IDENTITY, ENDOG_CORR)
CSV_HEADER = ("spec_id", "estimator", "functional", "rmse_normalized", "mean_eff_f", "k", "replications", "seed")

EFF_F, K_BINS = "f", "k"
F_EDGES = (10.0, 20.0, 50.0)
F_LABELS = ("F<=10", "10<F<=20", "20<F<=50", "F>50")
K_LABELS = ("k=1", "k=2", "k=3", "k>=4")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    replications: int = 10_000
    bag_draws: int = 400
    master_seed: int = 0
    estimators: tuple = ESTIMATORS
    functionals: tuple = (IDENTITY,)
    grid_points: int = 2001
    workers: int = 1
    chunk_size: int = 20
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.bag_draws < 1:
            raise ValueError("bag_draws must be at least 1")
        if self.grid_points < 3:
            raise ValueError("grid_points must be at least 3")
        if self.workers < 1 or self.chunk_size < 1:
            raise ValueError("workers and chunk_size must be positive")
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "functionals", tuple(self.functionals))
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad or not self.estimators:
            raise ValueError(f"unknown estimators {bad}; choose from {ESTIMATORS}")
        bad = [f for f in self.functionals if f not in FUNCTIONALS]
        if bad or not self.functionals:
            raise ValueError(f"unknown functionals {bad}; choose from {FUNCTIONALS}")


@dataclass(frozen=True)
class SimReport:
    spec_id: str
    estimator: str
    functional: str
    rmse_normalized: float
    mean_eff_f: float
    k: int
    replications: int
    seed: int

    def __post_init__(self):
        if not math.isfinite(self.rmse_normalized) or self.rmse_normalized < 0:
            raise ValueError(f"rmse_normalized must be finite and nonnegative, got {self.rmse_normalized!r}")
        if not self.mean_eff_f >= 0:
            raise ValueError(f"mean_eff_f must be nonnegative, got {self.mean_eff_f!r}")


def effective_f(draw, design: IvDesign):
    """``xi1' W xi1 / tr(W Omega_11)`` with ``W = qzz_inv``; batch-aware."""
    xi, single = est.as_batch(draw, design.k)
    xi1 = xi[:, design.k:]
    num = np.einsum("na,ab,nb->n", xi1, design.qzz_inv, xi1)
    out = num / np.trace(design.qzz_inv @ design.omega11)
    return float(out[0]) if single else out


# -- per-chunk evaluation ---------------------------------------------------


class _Evaluator:
    """Evaluates every configured estimator on a block of replications."""

    def __init__(self, design: IvDesign, cfg: SimConfig, spec_index: int):
        self.design = design
        self.cfg = cfg
        self.spec_index = spec_index
        self.funcs = {f: FunctionalSpec(f, design) for f in cfg.functionals}
        self.bag_cfg = BagConfig(cfg.bag_draws, cfg.noise_scale)
        G = cfg.grid_points
        self.objectives = {}
        if {"cue", "bcue", "qb-flat", "qb-inv"} & set(cfg.estimators):
            self.objectives[est.CUE] = est.grid_objective(design, est.CUE, G)
        if "liml" in cfg.estimators:
            self.objectives[est.LIML] = est.grid_objective(design, est.LIML, G)
        self.priors = {}
        if "qb-flat" in cfg.estimators:
            self.priors["qb-flat"] = flat_prior(design, G).weights
        if "qb-inv" in cfg.estimators:
            self.priors["qb-inv"] = invariant_prior(design, G).weights
        grid = np.linspace(design.theta_lower, design.theta_upper, G)
        self.r_grid = {f: np.asarray(spec(grid), dtype=float) for f, spec in self.funcs.items()}

    def stream(self, r: int) -> RngStream:
        return RngStream(self.cfg.master_seed, (self.spec_index, r))

    def _theta(self, name: str, xi: np.ndarray) -> np.ndarray:
        if name in ("tsls", "btsls"):
            return est.tsls(xi, self.design)
        kind = est.CUE if name in ("cue", "bcue") else est.LIML
        return self.objectives[kind].minimize(xi)

    def _one(self, name: str, xi, noise, Q) -> dict:
        out = {}
        if name in ("tsls", "cue", "liml"):
            th = self._theta(name, xi)
            for f, spec in self.funcs.items():
                out[f] = np.asarray(spec(th), dtype=float)
        elif name in ("btsls", "bcue"):
            n, B = noise.shape[:2]
            th = self._theta(name, (xi[:, None, :] + noise).reshape(n * B, -1))
            for f, spec in self.funcs.items():
                out[f] = pairwise_mean(np.asarray(spec(th), dtype=float).reshape(n, B))
        else:
            for f in self.funcs:
                out[f] = qb_from_objective(Q, self.priors[name], self.r_grid[f])
        return out

    def run_chunk(self, r0: int, r1: int):
        d = self.design
        xi = np.stack([draw_iv(d, self.stream(r)).stacked for r in range(r0, r1)])
        noise = None
        if {"btsls", "bcue"} & set(self.cfg.estimators):
            noise = np.stack([bag_noise(d, self.bag_cfg, self.stream(r)) for r in range(r0, r1)])
        Q = None
        if {"qb-flat", "qb-inv"} & set(self.cfg.estimators):
            Q = self.objectives[est.CUE].values(xi)
        results = {}
        for name in self.cfg.estimators:
            try:
                vals = self._one(name, xi, noise, Q)
                for v in vals.values():
                    if not np.all(np.isfinite(v)):
                        raise FloatingPointError("non-finite estimate")
            except Exception as exc:
                r = self._locate(name, r0, r1)
                raise SimulationError(f"spec {d.id!r}, replication {r}, estimator {name}: {exc}") from exc
            for f, v in vals.items():
                results[name, f] = v
        return results, effective_f(xi, d)

    def _locate(self, name: str, r0: int, r1: int) -> int:
        """First replication in ``[r0, r1)`` on which ``name`` fails on its own."""
        d = self.design
        for r in range(r0, r1):
            xi = draw_iv(d, self.stream(r)).stacked[None, :]
            noise = bag_noise(d, self.bag_cfg, self.stream(r))[None] if name in ("btsls", "bcue") else None
            Q = self.objectives[est.CUE].values(xi) if name.startswith("qb") else None
            try:
                vals = self._one(name, xi, noise, Q)
                if all(np.all(np.isfinite(v)) for v in vals.values()):
                    continue
            except Exception:
                pass
            return r
        return r0


def simulate_estimates(design: IvDesign, cfg: SimConfig, spec_index: int = 0):
    """Per-replication estimates.

    Returns
    -------
    estimates : dict
        ``(estimator, functional) -> (R,)`` array in replication order.
    eff_f : (R,) array
        Effective F of each replication's draw.
    """
    ev = _Evaluator(design, cfg, spec_index)
    R, c = cfg.replications, cfg.chunk_size
    bounds = [(a, min(a + c, R)) for a in range(0, R, c)]
    if cfg.workers == 1:
        parts = [ev.run_chunk(a, b) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(lambda ab: ev.run_chunk(*ab), bounds))
    keys = [(e, f) for e in cfg.estimators for f in cfg.functionals]
    estimates = {key: np.concatenate([p[0][key] for p in parts]) for key in keys}
    eff_f = np.concatenate([p[1] for p in parts])
    return estimates, eff_f


def run_spec(design: IvDesign, cfg: SimConfig, spec_index: int = 0) -> list[SimReport]:
    """Normalised RMSE of every (estimator, functional) pair for one design."""
    estimates, eff_f = simulate_estimates(design, cfg, spec_index)
    mean_f = float(pairwise_mean(eff_f))
    reports = []
    for (name, f), vals in estimates.items():
        spec = FunctionalSpec(f, design)
        err = vals - spec.target
        rmse = math.sqrt(float(pairwise_mean(err * err))) / spec.reference_se
        reports.append(SimReport(design.id, name, f, rmse, mean_f, design.k, cfg.replications, cfg.master_seed))
    return reports


def run_specs(designs: Sequence[IvDesign], cfg: SimConfig) -> list[SimReport]:
    out = []
    for i, d in enumerate(designs):
        out.extend(run_spec(d, cfg, i))
    return out


# -- tables -----------------------------------------------------------------


@dataclass
class Table:
    """Mean normalised RMSE per (estimator, functional) row and bin column."""

    binning: str
    labels: tuple
    rows: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)


def f_bin(mean_eff_f: float) -> int:
    for i, edge in enumerate(F_EDGES):
        if mean_eff_f <= edge:
            return i
    return len(F_EDGES)


def k_bin(k: int) -> int:
    return min(int(k), 4) - 1


def aggregate(reports: Sequence[SimReport], binning: str = EFF_F) -> Table:
    if not reports:
        raise ValueError("no reports to aggregate")
    if binning not in (EFF_F, K_BINS):
        raise ValueError(f"binning must be {EFF_F!r} or {K_BINS!r}")
    labels = F_LABELS if binning == EFF_F else K_LABELS
    which = (lambda r: f_bin(r.mean_eff_f)) if binning == EFF_F else (lambda r: k_bin(r.k))
    cells: dict = {}
    for rep in reports:
        cells.setdefault((rep.estimator, rep.functional), [[] for _ in labels])[which(rep)].append(rep.rmse_normalized)
    table = Table(binning, labels)
    for key, bins in cells.items():
        table.rows[key] = tuple(math.fsum(b) / len(b) if b else None for b in bins)
        table.counts[key] = tuple(len(b) for b in bins)
    return table


def write_table(table: Table, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("estimator", "functional") + table.labels)
        for (e, f), cells in table.rows.items():
            w.writerow((e, f) + tuple("" if c is None else repr(c) for c in cells))
        seen = []
        for (e, f), counts in table.counts.items():
            if f not in seen:
                seen.append(f)
                w.writerow(("n_specs", f) + counts)


# -- report CSV -------------------------------------------------------------


def write_reports(reports: Iterable[SimReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow((r.spec_id, r.estimator, r.functional, repr(r.rmse_normalized), repr(r.mean_eff_f), r.k, r.replications, r.seed))


def read_reports(path) -> list[SimReport]:
    """Parse a report CSV; malformed rows raise ``ValueError`` naming the line."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}")
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise ValueError(f"{path}: line {i}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        try:
            out.append(SimReport(row[0], row[1], row[2], float(row[3]), float(row[4]), int(row[5]), int(row[6]), int(row[7])))
        except ValueError as exc:
            raise ValueError(f"{path}: line {i}: {exc}") from None
    if not out:
        raise ValueError(f"{path}: no report rows")
    return out


# -- synthetic calibrations -------------------------------------------------


def strong_id_se(design: IvDesign) -> float:
    """Strong-identification TSLS standard error ``sqrt(pi'W S W pi) / pi'W pi``."""
    pi, W = design.pi_star, design.qzz_inv
    a = W @ pi
    return float(math.sqrt(a @ sigma_kernel(design, design.theta_star, design.theta_star) @ a) / (pi @ a))


def generate_synthetic_designs(k: int, target_f: float, n: int, hetero: bool = False, seed: int = 0,
                               bound_mult: float = 20.0) -> list[IvDesign]:
    """Random linear-IV designs whose expected effective F equals ``target_f``.

    ``pi*`` is scaled so that ``E[F] = 1 + pi*'W pi* / tr(W Omega_11)`` hits the
    target. Homoskedastic designs use ``Omega = S kron Q`` with ``W = Q^-1``;
    heteroskedastic ones add a random positive semi-definite perturbation.
    """
    if k < 1 or n < 1:
        raise ValueError("k and n must be positive")
    if not target_f > 1:
        raise ValueError("target_f must exceed 1 (E[F] = 1 when pi* = 0)")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        su2, sv2 = np.exp(rng.normal(0.0, 0.5, size=2))
        rho = rng.uniform(0.2, 0.9) * rng.choice((-1.0, 1.0))
        suv = rho * math.sqrt(su2 * sv2)
        A = rng.normal(size=(k, k))
        Qzz = A @ A.T / k + np.eye(k)
        omega = homoskedastic_omega(su2, sv2, suv, Qzz)
        if hetero:
            P = rng.normal(size=(2 * k, 2 * k))
            omega = omega + 0.5 * (P @ P.T) / (2 * k) * float(np.mean(np.diag(omega)))
        W = np.linalg.inv(Qzz)
        W = 0.5 * (W + W.T)
        direction = rng.normal(size=k)
        scale = math.sqrt((target_f - 1.0) * np.trace(W @ omega[k:, k:]) / (direction @ W @ direction))
        ols = suv / sv2
        theta_star = ols * rng.uniform(-2.0, 2.0)
        half = bound_mult * abs(ols)
        d = IvDesign(
            id=f"syn-k{k}-f{target_f:g}-{'het' if hetero else 'hom'}-{i}",
            k=k, pi_star=scale * direction, theta_star=theta_star, omega=omega,
            sigma_u2=su2, sigma_v2=sv2, sigma_uv=suv, qzz_inv=W, se_ref=1.0,
            theta_bounds=(-half, half),
        )
        out.append(d.replace(se_ref=strong_id_se(d)))
    return out
