"""Estimators and diagnostics for weakly identified GMM in the Gaussian limit experiment."""

from .bagging import BagConfig, bag, bag_many
from .estimators import EstimatorSpec, GridObjective, cue, estimate, finite_gmm, liml, plug_in, tsls
from .functionals import ENDOG_CORR, IDENTITY, FunctionalSpec, make_functional
from .model import (
    DesignError, FiniteThetaModel, IvDesign, MomentDraw, RngStream, draw_finite, draw_iv, g_eval,
    load_designs, sigma_kernel,
)
from .montecarlo import SimConfig, SimReport, aggregate, effective_f, generate_synthetic_designs, run_spec
from .quasibayes import (
    Prior, cue_objective, flat_prior, invariant_info, invariant_info_general, invariant_prior, qb_mean,
    qb_mean_finite,
)

__version__ = "0.1.0"

__all__ = [
    "BagConfig", "bag", "bag_many", "EstimatorSpec", "GridObjective", "cue", "estimate", "finite_gmm",
    "liml", "plug_in", "tsls", "ENDOG_CORR", "IDENTITY", "FunctionalSpec", "make_functional",
    "DesignError", "FiniteThetaModel", "IvDesign", "MomentDraw", "RngStream", "draw_finite", "draw_iv",
    "g_eval", "load_designs", "sigma_kernel", "SimConfig", "SimReport", "aggregate", "effective_f",
    "generate_synthetic_designs", "run_spec", "Prior", "cue_objective", "flat_prior", "invariant_info",
    "invariant_info_general", "invariant_prior", "qb_mean", "qb_mean_finite",
]
