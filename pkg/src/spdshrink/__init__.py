"""Empirical-Bayes shrinkage for fields of symmetric positive-definite matrices.

Log-Euclidean geometry, SURE-tuned shrinkage of per-site Fréchet means and
covariances, Tweedie-adjusted non-centrality estimates for two-group
comparisons, and the simulation harness that exercises them.
"""

from . import errors
from .errors import *  # noqa: F401,F403
from .geometry import (
    dist_le,
    exp_vec,
    frechet_mean_le,
    log_vec,
    sym_exp,
    sym_log,
    ve,
    ve_inv,
)
from .shrinkage import (
    Hyperparams,
    ShrinkageResult,
    SiteStats,
    estimate_fm_known_var,
    estimate_full,
    minimize_sure,
    mle_estimates,
    site_stats,
    sure_full,
)
from .tweedie import (
    FStatistics,
    GroupData,
    NoncentralityMap,
    TweedieConfig,
    hotelling_t2,
    lindsey_fit,
    mom_noncentrality,
    to_f_stats,
    tweedie_chi2,
    tweedie_iterate,
)

__version__ = "0.1.0"

__all__ = [
    "dist_le",
    "exp_vec",
    "frechet_mean_le",
    "log_vec",
    "sym_exp",
    "sym_log",
    "ve",
    "ve_inv",
    "Hyperparams",
    "ShrinkageResult",
    "SiteStats",
    "estimate_fm_known_var",
    "estimate_full",
    "minimize_sure",
    "mle_estimates",
    "site_stats",
    "sure_full",
    "FStatistics",
    "GroupData",
    "NoncentralityMap",
    "TweedieConfig",
    "hotelling_t2",
    "lindsey_fit",
    "mom_noncentrality",
    "to_f_stats",
    "tweedie_chi2",
    "tweedie_iterate",
    *errors.__all__,
]
