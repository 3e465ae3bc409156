"""Bootstrap aggregation in the limit experiment.

The bagged estimator averages a base estimator over Gaussian perturbations
``xi + tau * nu_b`` with ``nu_b ~ N(0, Omega)``. Noise for a replication is
read from the child stream ``rng.child(0)``: row ``b`` of that stream is
bootstrap draw ``b``. Reusing the same stream across estimators and across
nearby ``xi`` gives common random numbers, so the bagged map is a fixed,
deterministic function of the draw.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .estimators import as_batch
from .model import IvDesign, RngStream, correlate

# base(xi_batch (n, 2k), design) -> theta_hat (n,)
BaseEstimator = Callable[[np.ndarray, IvDesign], np.ndarray]

NOISE_CHILD = 0


@dataclass(frozen=True)
class BagConfig:
    draws: int = 400
    noise_scale: float = 1.0

    def __post_init__(self):
        if int(self.draws) < 1:
            raise ValueError("draws must be at least 1")
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive")


def bag_noise(design: IvDesign, cfg: BagConfig, rng: RngStream) -> np.ndarray:
    """``(B, 2k)`` array of ``tau * nu_b`` for one replication stream."""
    z = rng.child(NOISE_CHILD).standard_normal((cfg.draws, 2 * design.k))
    return cfg.noise_scale * correlate(z, design.chol)


def pairwise_mean(x: np.ndarray) -> np.ndarray:
    """Mean over the last axis with numpy's pairwise summation.

    Each row is reduced on its own contiguous buffer, so the result does not
    depend on how many rows are processed together.
    """
    x = np.ascontiguousarray(x)
    return np.add.reduce(x, axis=-1) / x.shape[-1]


def bag_many(
    base: BaseEstimator,
    xi: np.ndarray,
    design: IvDesign,
    cfg: BagConfig,
    rngs: Sequence[RngStream] | None = None,
    functional: Callable | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Bagged estimates for a batch of draws.

    Parameters
    ----------
    base : callable
        ``base(xi_batch, design)`` returning one theta per row.
    xi : (n, 2k) array
        Draws, one per row.
    rngs : sequence of RngStream, optional
        Replication stream per row; noise comes from each stream's child 0.
    functional : callable, optional
        Applied to every bootstrap estimate before averaging.
    noise : (n, B, 2k) array, optional
        Precomputed perturbations, used instead of ``rngs``.

    Returns
    -------
    (n,) array
    """
    xi, _ = as_batch(xi, design.k)
    n = xi.shape[0]
    if noise is None:
        if rngs is None or len(rngs) != n:
            raise ValueError("need one RngStream per draw")
        noise = np.stack([bag_noise(design, cfg, r) for r in rngs])
    B = noise.shape[1]
    pert = (xi[:, None, :] + noise).reshape(n * B, -1)
    est = np.asarray(base(pert, design), dtype=float)
    if functional is not None:
        est = np.asarray(functional(est), dtype=float)
    return pairwise_mean(est.reshape(n, B))


def bag(base: BaseEstimator, draw, design: IvDesign, cfg: BagConfig, rng: RngStream, functional=None) -> float:
    """``(1/B) sum_b r(theta_hat(xi + tau nu_b))`` for a single draw."""
    xi, _ = as_batch(draw, design.k)
    return float(bag_many(base, xi, design, cfg, [rng], functional)[0])
