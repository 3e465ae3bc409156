"""Gaussian limit experiments for moment-condition models.

Two specialisations are supported:

* linear IV, where the moment process is ``g(theta) = xi0 - xi1 * theta`` and
  ``(xi0, xi1) ~ N((pi* theta*, pi*), Omega)``;
* a finite parameter grid, where ``g`` is an ``s*k`` Gaussian vector
  ``N(m, Sigma)``.

Designs are validated on construction and immutable afterwards, so they can be
shared freely between worker threads.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_BOUND_MULT = 20.0

_DESIGN_FIELDS = {
    "id", "k", "pi_star", "theta_star", "omega", "sigma_u2", "sigma_v2",
    "sigma_uv", "qzz_inv", "se_ref", "theta_bounds", "theta_bound_mult",
}


class DesignError(ValueError):
    """Raised when a design or calibration record is invalid."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_pd(mat: np.ndarray, what: str) -> None:
    """Reject matrices that are not numerically positive definite.

    A matrix whose smallest eigenvalue is below ``1e-10 * ||mat||`` is
    treated as degenerate.
    """
    if not np.all(np.isfinite(mat)):
        raise DesignError(f"{what} has non-finite entries")
    scale = np.max(np.abs(mat))
    if scale == 0.0:
        raise DesignError(f"{what} is identically zero")
    if np.max(np.abs(mat - mat.T)) > 1e-10 * scale:
        raise DesignError(f"{what} is not symmetric")
    eig = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    norm = np.max(np.abs(eig))
    if eig[0] <= 1e-10 * norm:
        raise DesignError(
            f"{what} is not positive definite: smallest eigenvalue "
            f"{eig[0]:.6g} (index 0 of {len(eig)}) vs norm {norm:.6g}"
        )


@dataclass(frozen=True, eq=False)
class IvDesign:
    """One calibrated linear-IV limit experiment.

    ``omega`` is the ``2k x 2k`` covariance of ``(xi0, xi1)`` in that block
    order. ``qzz_inv`` is the TSLS weight matrix and defaults to the identity.
    """

    id: str
    k: int
    pi_star: np.ndarray
    theta_star: float
    omega: np.ndarray
    sigma_u2: float
    sigma_v2: float
    sigma_uv: float
    se_ref: float
    theta_bounds: tuple[float, float]
    qzz_inv: np.ndarray | None = None

    def __post_init__(self):
        k = int(self.k)
        if k < 1:
            raise DesignError(f"design {self.id!r}: k must be positive, got {k}")
        object.__setattr__(self, "k", k)
        pi = _frozen(self.pi_star).reshape(-1)
        if pi.shape != (k,):
            raise DesignError(f"design {self.id!r}: pi_star must have length {k}")
        object.__setattr__(self, "pi_star", pi)
        omega = np.array(self.omega, dtype=float)
        if omega.size != 4 * k * k:
            raise DesignError(f"design {self.id!r}: omega must have {4 * k * k} entries")
        omega = omega.reshape(2 * k, 2 * k)
        _check_pd(omega, f"design {self.id!r}: omega")
        object.__setattr__(self, "omega", _frozen(0.5 * (omega + omega.T)))
        if self.qzz_inv is None:
            w = np.eye(k)
        else:
            w = np.array(self.qzz_inv, dtype=float)
            if w.size != k * k:
                raise DesignError(f"design {self.id!r}: qzz_inv must have {k * k} entries")
            w = w.reshape(k, k)
            _check_pd(w, f"design {self.id!r}: qzz_inv")
            w = 0.5 * (w + w.T)
        object.__setattr__(self, "qzz_inv", _frozen(w))

        su2, sv2, suv = float(self.sigma_u2), float(self.sigma_v2), float(self.sigma_uv)
        if not (su2 > 0 and sv2 > 0):
            raise DesignError(f"design {self.id!r}: sigma_u2 and sigma_v2 must be positive")
        if suv * suv > su2 * sv2:
            raise DesignError(f"design {self.id!r}: sigma_uv^2 exceeds sigma_u2*sigma_v2")
        object.__setattr__(self, "sigma_u2", su2)
        object.__setattr__(self, "sigma_v2", sv2)
        object.__setattr__(self, "sigma_uv", suv)

        se = float(self.se_ref)
        if not se > 0:
            raise DesignError(f"design {self.id!r}: se_ref must be positive")
        object.__setattr__(self, "se_ref", se)
        lo, hi = (float(b) for b in self.theta_bounds)
        if not lo < hi:
            raise DesignError(f"design {self.id!r}: theta_bounds must satisfy lower < upper")
        object.__setattr__(self, "theta_bounds", (lo, hi))
        ts = float(self.theta_star)
        if not lo <= ts <= hi:
            raise DesignError(
                f"design {self.id!r}: theta_star {ts} outside bounds [{lo}, {hi}]"
            )
        object.__setattr__(self, "theta_star", ts)

    # Omega blocks, named Cov(xi_a, xi_b).
    @property
    def omega00(self) -> np.ndarray:
        return self.omega[: self.k, : self.k]

    @property
    def omega01(self) -> np.ndarray:
        return self.omega[: self.k, self.k:]

    @property
    def omega10(self) -> np.ndarray:
        return self.omega[self.k:, : self.k]

    @property
    def omega11(self) -> np.ndarray:
        return self.omega[self.k:, self.k:]

    @property
    def theta_lower(self) -> float:
        return self.theta_bounds[0]

    @property
    def theta_upper(self) -> float:
        return self.theta_bounds[1]

    @cached_property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor of ``omega``, computed once."""
        L = np.linalg.cholesky(self.omega)
        L.setflags(write=False)
        return L

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate([self.pi_star * self.theta_star, self.pi_star])

    def replace(self, **changes) -> "IvDesign":
        fields = {
            "id": self.id, "k": self.k, "pi_star": self.pi_star,
            "theta_star": self.theta_star, "omega": self.omega,
            "sigma_u2": self.sigma_u2, "sigma_v2": self.sigma_v2,
            "sigma_uv": self.sigma_uv, "se_ref": self.se_ref,
            "theta_bounds": self.theta_bounds, "qzz_inv": self.qzz_inv,
        }
        fields.update(changes)
        return IvDesign(**fields)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "k": self.k,
            "pi_star": self.pi_star.tolist(),
            "theta_star": self.theta_star,
            "omega": self.omega.reshape(-1).tolist(),
            "sigma_u2": self.sigma_u2,
            "sigma_v2": self.sigma_v2,
            "sigma_uv": self.sigma_uv,
            "qzz_inv": self.qzz_inv.reshape(-1).tolist(),
            "se_ref": self.se_ref,
            "theta_bounds": list(self.theta_bounds),
        }


@dataclass(frozen=True, eq=False)
class MomentDraw:
    """One realisation ``(xi0, xi1)`` of the linear-IV limit experiment."""

    xi0: np.ndarray
    xi1: np.ndarray

    def __post_init__(self):
        xi0 = _frozen(self.xi0).reshape(-1)
        xi1 = _frozen(self.xi1).reshape(-1)
        if xi0.shape != xi1.shape:
            raise ValueError("xi0 and xi1 must have the same length")
        if not (np.all(np.isfinite(xi0)) and np.all(np.isfinite(xi1))):
            raise ValueError("moment draw must be finite")
        object.__setattr__(self, "xi0", xi0)
        object.__setattr__(self, "xi1", xi1)

    @property
    def k(self) -> int:
        return self.xi0.shape[0]

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.xi0, self.xi1])

    @classmethod
    def from_vector(cls, xi) -> "MomentDraw":
        xi = np.asarray(xi, dtype=float).reshape(-1)
        k = xi.shape[0] // 2
        return cls(xi[:k], xi[k:])

    def scaled(self, c: float) -> "MomentDraw":
        return MomentDraw(c * self.xi0, c * self.xi1)


@dataclass(frozen=True)
class RngStream:
    """Addressable random stream derived from ``(master_seed, path)``.

    Each path maps to its own Philox counter-based generator through
    :class:`numpy.random.SeedSequence`, so stream ``(s, r)`` can be produced
    without generating any other stream first.
    """

    master_seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        seed = int(self.master_seed)
        if not 0 <= seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        path = tuple(int(p) for p in self.path)
        if any(not 0 <= p < 2**64 for p in path):
            raise ValueError("path entries must be 64-bit unsigned integers")
        object.__setattr__(self, "master_seed", seed)
        object.__setattr__(self, "path", path)

    def child(self, *index: int) -> "RngStream":
        return RngStream(self.master_seed, self.path + tuple(index))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.master_seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    def standard_normal(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)


def correlate(z: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Map standard normals ``z`` (rows) to ``chol @ z``.

    Uses an explicit einsum so each row is computed the same way whatever the
    batch size.
    """
    return np.einsum("ij,...j->...i", chol, z)


def draw_iv(design: IvDesign, rng: RngStream, noise_scale: float = 1.0) -> MomentDraw:
    """Draw ``(xi0, xi1) = mean + noise_scale * L z``."""
    z = rng.standard_normal(2 * design.k)
    return MomentDraw.from_vector(design.mean + noise_scale * correlate(z, design.chol))


def draw_iv_many(design: IvDesign, rng: RngStream, n: int, noise_scale: float = 1.0) -> np.ndarray:
    """``n`` independent draws as rows of an ``(n, 2k)`` array, from a single stream."""
    z = rng.standard_normal((n, 2 * design.k))
    return design.mean + noise_scale * correlate(z, design.chol)


def g_eval(draw: MomentDraw, theta: float) -> np.ndarray:
    return draw.xi0 - draw.xi1 * theta


def sigma_kernel(design: IvDesign, theta: float, theta_tilde: float) -> np.ndarray:
    """``Cov(g(theta), g(theta_tilde))`` implied by ``omega``."""
    return (
        design.omega00
        - design.omega01 * theta_tilde
        - theta * design.omega10
        + theta * theta_tilde * design.omega11
    )


def sigma_diag(design: IvDesign, theta) -> np.ndarray:
    """``Sigma(theta, theta)`` for an array of ``theta``; shape ``(..., k, k)``."""
    t = np.asarray(theta, dtype=float)[..., None, None]
    return (
        design.omega00
        - t * (design.omega01 + design.omega10)
        + (t * t) * design.omega11
    )


@dataclass(frozen=True, eq=False)
class FiniteThetaModel:
    """Limit experiment on a finite grid ``theta_1 < ... < theta_s``.

    ``m`` and the rows/columns of ``sigma`` are stacked by grid point, each
    block having length ``k``. ``r_values`` holds ``r(theta_j)`` with shape
    ``(s, p)``.
    """

    theta_values: np.ndarray
    k: int
    m: np.ndarray
    sigma: np.ndarray
    weights: tuple = None
    r_values: np.ndarray = None
    loss_weight: np.ndarray = None

    def __post_init__(self):
        theta = _frozen(self.theta_values).reshape(-1)
        s, k = theta.shape[0], int(self.k)
        if s < 2:
            raise DesignError("finite model needs at least two grid points")
        object.__setattr__(self, "theta_values", theta)
        object.__setattr__(self, "k", k)
        m = _frozen(self.m).reshape(-1)
        if m.shape != (s * k,):
            raise DesignError(f"m must have length {s * k}")
        object.__setattr__(self, "m", m)
        sigma = np.array(self.sigma, dtype=float).reshape(s * k, s * k)
        _check_pd(sigma, "sigma")
        object.__setattr__(self, "sigma", _frozen(0.5 * (sigma + sigma.T)))
        for j in range(s):
            _check_pd(self.sigma_block(j), f"Sigma(theta_{j}, theta_{j})")
        if self.weights is None:
            w = tuple(_frozen(np.linalg.inv(self.sigma_block(j))) for j in range(s))
        else:
            if len(self.weights) != s:
                raise DesignError("need one weight matrix per grid point")
            w = tuple(_frozen(np.asarray(wj, dtype=float).reshape(k, k)) for wj in self.weights)
        object.__setattr__(self, "weights", w)
        r = theta[:, None] if self.r_values is None else np.asarray(self.r_values, dtype=float)
        r = r.reshape(s, -1)
        object.__setattr__(self, "r_values", _frozen(r))
        lw = np.eye(r.shape[1]) if self.loss_weight is None else np.asarray(self.loss_weight, dtype=float)
        if lw.shape != (r.shape[1], r.shape[1]):
            raise DesignError(f"loss_weight must be {r.shape[1]}x{r.shape[1]}")
        _check_pd(lw, "loss_weight")
        object.__setattr__(self, "loss_weight", _frozen(lw))

    @property
    def s(self) -> int:
        return self.theta_values.shape[0]

    @property
    def p(self) -> int:
        return self.r_values.shape[1]

    def block(self, j: int) -> slice:
        return slice(j * self.k, (j + 1) * self.k)

    def sigma_block(self, j: int) -> np.ndarray:
        b = self.block(j)
        return self.sigma[b, b]

    @cached_property
    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.sigma)

    @property
    def r_bar(self) -> float:
        return float(np.max(np.linalg.norm(self.r_values, axis=1)))


def draw_finite(model: FiniteThetaModel, rng: RngStream, noise_scale: float = 1.0, size=None) -> np.ndarray:
    shape = (model.s * model.k,) if size is None else (size, model.s * model.k)
    z = rng.standard_normal(shape)
    return model.m + noise_scale * correlate(z, model.chol)


# ---------------------------------------------------------------------------
# Calibration files
# ---------------------------------------------------------------------------

def _field(rec: dict, name: str, idx: int):
    if name not in rec:
        raise DesignError(f"record {idx}: missing field {name!r}")
    return rec[name]


def design_from_record(rec: dict, idx: int = 0, bound_mult: float | None = None) -> IvDesign:
    """Build a design from one calibration record.

    ``theta_bounds`` may be replaced by ``theta_bound_mult`` (default 20),
    giving ``[-mult*|sigma_uv/sigma_v2|, +mult*|sigma_uv/sigma_v2|]``.
    """
    if not isinstance(rec, dict):
        raise DesignError(f"record {idx}: expected an object, got {type(rec).__name__}")
    unknown = sorted(set(rec) - _DESIGN_FIELDS)
    if unknown:
        logger.warning("record %d: ignoring unknown fields %s", idx, ", ".join(unknown))
    try:
        k = int(_field(rec, "k", idx))
        sv2 = float(_field(rec, "sigma_v2", idx))
        suv = float(_field(rec, "sigma_uv", idx))
        if "theta_bounds" in rec:
            lo, hi = (float(b) for b in rec["theta_bounds"])
        else:
            mult = float(rec.get("theta_bound_mult", bound_mult or DEFAULT_BOUND_MULT))
            half = mult * abs(suv / sv2)
            lo, hi = -half, half
        return IvDesign(
            id=str(rec.get("id", f"spec{idx}")),
            k=k,
            pi_star=_field(rec, "pi_star", idx),
            theta_star=float(_field(rec, "theta_star", idx)),
            omega=_field(rec, "omega", idx),
            sigma_u2=float(_field(rec, "sigma_u2", idx)),
            sigma_v2=sv2,
            sigma_uv=suv,
            qzz_inv=rec.get("qzz_inv"),
            se_ref=float(_field(rec, "se_ref", idx)),
            theta_bounds=(lo, hi),
        )
    except DesignError as exc:
        if str(exc).startswith("record"):
            raise
        raise DesignError(f"record {idx}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise DesignError(f"record {idx}: {exc}") from None


def load_designs(path: str | Path) -> list[IvDesign]:
    """Read a calibration JSON file.

    The document is either an array of records or an object with a
    ``"designs"`` array. Records whose ``theta_star`` falls outside the
    parameter space are skipped with a warning.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DesignError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    records = doc.get("designs") if isinstance(doc, dict) else doc
    if not isinstance(records, list):
        raise DesignError(f"{path}: expected an array of design records")
    designs = []
    for i, rec in enumerate(records):
        try:
            designs.append(design_from_record(rec, i))
        except DesignError as exc:
            if "outside bounds" in str(exc):
                logger.warning("%s: skipping %s", path, exc)
                continue
            raise
    if not designs:
        raise DesignError(f"{path}: no usable design records")
    return designs


def dump_designs(designs: Iterable[IvDesign], path: str | Path) -> None:
    Path(path).write_text(json.dumps([d.to_record() for d in designs], indent=1) + "\n")


def homoskedastic_omega(sigma_u2: float, sigma_v2: float, sigma_uv: float, omega_tilde: Sequence) -> np.ndarray:
    """``[[su2, suv], [suv, sv2]] kron omega_tilde``."""
    s = np.array([[sigma_u2, sigma_uv], [sigma_uv, sigma_v2]])
    return np.kron(s, np.atleast_2d(np.asarray(omega_tilde, dtype=float)))
