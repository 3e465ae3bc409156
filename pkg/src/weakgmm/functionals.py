"""Estimands r(theta) for the linear-IV design."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import IvDesign

IDENTITY = "identity"
ENDOG_CORR = "endog_corr"
KINDS = (IDENTITY, ENDOG_CORR)


class FunctionalError(ValueError):
    pass


def endog_corr(design: IvDesign, theta):
    """Correlation between the structural error ``u - theta v`` and ``v``."""
    t = np.asarray(theta, dtype=float)
    su2, sv2, suv = design.sigma_u2, design.sigma_v2, design.sigma_uv
    rad = su2 - 2.0 * t * suv + t * t * sv2
    if np.any(rad <= 1e-14 * su2):
        raise FunctionalError(
            f"design {design.id!r}: structural error variance vanishes near theta="
            f"{np.atleast_1d(t)[np.argmin(np.atleast_1d(rad))]:.6g}; design is near-degenerate"
        )
    return (suv - t * sv2) / (np.sqrt(sv2) * np.sqrt(rad))


def endog_corr_derivative(design: IvDesign, theta):
    t = np.asarray(theta, dtype=float)
    su2, sv2, suv = design.sigma_u2, design.sigma_v2, design.sigma_uv
    rad = su2 - 2.0 * t * suv + t * t * sv2
    return -(su2 * sv2 - suv * suv) / (np.sqrt(sv2) * rad ** 1.5)


@dataclass(frozen=True, eq=False)
class FunctionalSpec:
    """A scalar estimand bound to a design.

    ``r_bar`` is ``sup |r(theta)|`` over the design's parameter space, found
    on a dense grid of 10^4 points (exact for the identity).
    """

    kind: str
    design: IvDesign
    r_bar: float = field(init=False)

    p = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FunctionalError(f"unknown functional {self.kind!r}; expected one of {KINDS}")
        lo, hi = self.design.theta_bounds
        if self.kind == IDENTITY:
            r_bar = max(abs(lo), abs(hi))
        else:
            r_bar = float(np.max(np.abs(self(np.linspace(lo, hi, 10_000)))))
        object.__setattr__(self, "r_bar", r_bar)

    def __call__(self, theta):
        if self.kind == IDENTITY:
            return np.asarray(theta, dtype=float) * 1.0
        return endog_corr(self.design, theta)

    def derivative(self, theta):
        if self.kind == IDENTITY:
            return np.ones_like(np.asarray(theta, dtype=float))
        return endog_corr_derivative(self.design, theta)

    @property
    def target(self) -> float:
        """r(theta*) for the design."""
        return float(self(self.design.theta_star))

    @property
    def reference_se(self) -> float:
        """Normalising standard error: ``se_ref`` scaled by ``|r'(theta*)|``."""
        return float(abs(self.derivative(self.design.theta_star)) * self.design.se_ref)


def make_functional(kind: str, design: IvDesign) -> FunctionalSpec:
    return FunctionalSpec(kind, design)


def evaluate(spec: FunctionalSpec, theta):
    return spec(theta)
