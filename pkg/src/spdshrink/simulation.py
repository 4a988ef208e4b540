"""Synthetic data generators and experiment drivers.

Every random draw is taken from a per-(seed, replication, site) Philox
stream, so datasets are identical no matter how replications are spread
over worker threads. Worker count comes from ``SPDSHRINK_THREADS``
(default: machine parallelism).
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, TypeVar

import numpy as np
from numpy.typing import NDArray

from .distributions import RngStream, bartlett_factor
from .errors import ConfigError, SpdShrinkError
from .geometry import exp_vec, log_vec, q_from_dim, symmetrize
from .shrinkage import (
    GroundTruth,
    Hyperparams,
    ShrinkageResult,
    estimate_fm_known_var,
    estimate_full,
    loss_le,
    mle_estimates,
    site_stats,
)
from .tweedie import (
    GroupData,
    NoncentralityMap,
    TweedieConfig,
    hotelling_t2,
    select_top,
    to_f_stats,
    tweedie_iterate,
)

__all__ = [
    "ESTIMATORS",
    "RiskExperimentConfig",
    "RiskRow",
    "RiskTable",
    "GroupExperimentConfig",
    "GroupMetrics",
    "worker_count",
    "parallel_map",
    "site_stream",
    "gen_hier_dataset",
    "run_risk_replicate",
    "run_risk_experiment",
    "quarter_region",
    "gen_group_images",
    "run_group_experiment",
    "f1_score",
]

log = logging.getLogger(__name__)

ESTIMATORS = ("FM.LE", "SURE-FM", "SURE.Full-FM", "MLE-Cov", "SURE.Full-Cov")

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    raw = os.environ.get("SPDSHRINK_THREADS", "").strip()
    if raw:
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigError(f"SPDSHRINK_THREADS must be an integer, got {raw!r}") from exc
        return max(1, value)
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int | None = None) -> list[R]:
    """Order-preserving map over a thread pool (serial when one worker)."""
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def site_stream(seed: int, rep: int, site: int) -> RngStream:
    return RngStream(seed, (rep << 32) | site)


# ---------------------------------------------------------------------------
# Hierarchical (LNIW) risk experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RiskExperimentConfig:
    p_grid: tuple[int, ...] = (50, 100, 200, 500)
    n: int = 10
    reps: int = 200
    prior: Hyperparams = field(
        default_factory=lambda: Hyperparams(lam=10.0, mu=np.eye(3), psi=np.eye(6), nu=15.0)
    )
    estimators: tuple[str, ...] = ESTIMATORS
    seed: int = 0

    def __post_init__(self) -> None:
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if not self.p_grid or min(self.p_grid) < 2:
            raise ConfigError("p_grid needs site counts of at least 2")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ConfigError(f"unknown estimators: {sorted(unknown)}")
        if self.prior.psi is None:
            raise ConfigError("prior needs psi and nu")
        q = q_from_dim(self.prior.mu.shape[0])
        full = {"SURE.Full-FM", "SURE.Full-Cov"} & set(self.estimators)
        if full and self.n <= q + 2:
            raise ConfigError(f"SURE.Full estimators need n > q + 2 = {q + 2}")


def gen_hier_dataset(
    cfg: RiskExperimentConfig, p: int, rep: int = 0
) -> tuple[NDArray[np.float64], GroundTruth]:
    """Draw one dataset from the LNIW hierarchy.

    ``Sigma_i ~ Inv-Wishart(psi, nu)``, ``M_i ~ LN(mu, Sigma_i / lam)`` and
    ``X_ij ~ LN(M_i, Sigma_i)``. Returns the data, shape (p, n, N, N), and
    the true parameters.
    """
    prior = cfg.prior
    n = cfg.n
    mu_vec = prior.mu_vec
    q = mu_vec.shape[0]
    chol_psi_inv = np.linalg.cholesky(np.linalg.inv(prior.psi))
    bart = np.empty((p, q, q))
    z_mean = np.empty((p, q))
    z_obs = np.empty((p, n, q))
    for i in range(p):
        gen = site_stream(cfg.seed, rep, i).generator()
        bart[i] = bartlett_factor(q, prior.nu, gen)
        z_mean[i] = gen.standard_normal(q)
        z_obs[i] = gen.standard_normal((n, q))
    w_factor = chol_psi_inv @ bart
    sigma = symmetrize(np.linalg.inv(w_factor @ np.swapaxes(w_factor, 1, 2)))
    chol_sigma = np.linalg.cholesky(sigma)
    m_vec = mu_vec + np.einsum("pab,pb->pa", chol_sigma, z_mean) / math.sqrt(prior.lam)
    x_vec = m_vec[:, None, :] + np.einsum("pab,pjb->pja", chol_sigma, z_obs)
    truth = GroundTruth(means=exp_vec(m_vec), covs=sigma)
    return exp_vec(x_vec), truth


@dataclass(frozen=True)
class RiskRow:
    estimator: str
    p: int
    mean_loss: float
    se: float
    runtime: float
    failures: int = 0
    iterations_max: int = 0


@dataclass(frozen=True, eq=False)
class RiskTable:
    rows: tuple[RiskRow, ...]
    losses: dict[tuple[str, int], NDArray[np.float64]] = field(repr=False)
    iterations: dict[int, NDArray[np.int64]] = field(repr=False, default_factory=dict)

    def row(self, estimator: str, p: int) -> RiskRow:
        for r in self.rows:
            if r.estimator == estimator and r.p == p:
                return r
        raise KeyError((estimator, p))


def _estimate(name: str, stats, cache: dict) -> ShrinkageResult:
    if name in ("FM.LE", "MLE-Cov"):
        key = "mle"
        if key not in cache:
            cache[key] = mle_estimates(stats)
    elif name == "SURE-FM":
        key = "known"
        if key not in cache:
            cache[key] = estimate_fm_known_var(stats, warn=False)
    else:
        key = "full"
        if key not in cache:
            cache[key] = estimate_full(stats, warn=False)
    return cache[key]


def run_risk_replicate(
    cfg: RiskExperimentConfig, p: int, rep: int
) -> tuple[dict[str, float], dict[str, float], int]:
    """One replication: per-estimator loss, per-estimator runtime, and
    iterations used by the full SURE minimizer (-1 if not run)."""
    data, truth = gen_hier_dataset(cfg, p, rep)
    stats = site_stats(data)
    cache: dict = {}
    losses: dict[str, float] = {}
    times: dict[str, float] = {}
    for name in cfg.estimators:
        t0 = time.perf_counter()
        try:
            res = _estimate(name, stats, cache)
            l1, l2 = loss_le(res, truth)
            losses[name] = l2 if name.endswith("-Cov") else l1
        except SpdShrinkError as exc:
            log.warning("replicate %d, p=%d, %s failed: %s", rep, p, name, exc)
            losses[name] = float("nan")
        times[name] = time.perf_counter() - t0
    iters = cache["full"].iterations if "full" in cache else -1
    return losses, times, iters


def run_risk_experiment(cfg: RiskExperimentConfig, workers: int | None = None) -> RiskTable:
    """Average loss and standard error per (estimator, p)."""
    rows = []
    all_losses: dict[tuple[str, int], NDArray[np.float64]] = {}
    all_iters: dict[int, NDArray[np.int64]] = {}
    for p in cfg.p_grid:
        reps = parallel_map(lambda r: run_risk_replicate(cfg, p, r), range(cfg.reps), workers)
        all_iters[p] = np.array([it for _, _, it in reps], dtype=np.int64)
        for name in cfg.estimators:
            vals = np.array([loss[name] for loss, _, _ in reps])
            ok = vals[np.isfinite(vals)]
            m = ok.size
            se = float(ok.std(ddof=1) / math.sqrt(m)) if m > 1 else float("nan")
            rows.append(RiskRow(
                estimator=name,
                p=p,
                mean_loss=float(ok.mean()) if m else float("nan"),
                se=se,
                runtime=float(sum(t[name] for _, t, _ in reps)),
                failures=int(vals.size - m),
                iterations_max=int(all_iters[p].max()) if name.startswith("SURE.Full") else 0,
            ))
            all_losses[(name, p)] = vals
    return RiskTable(rows=tuple(rows), losses=all_losses, iterations=all_iters)


# ---------------------------------------------------------------------------
# Two-group image experiments
# ---------------------------------------------------------------------------

VERTICAL = np.diag([0.3, 1.0])
HORIZONTAL = np.diag([1.0, 0.3])


def quarter_region(height: int, width: int) -> NDArray[np.bool_]:
    """Top-right quarter of an image grid."""
    mask = np.zeros((height, width), dtype=bool)
    mask[: height // 2, width - width // 2 :] = True
    return mask


@dataclass(frozen=True, eq=False)
class GroupExperimentConfig:
    grid: tuple[int, int] = (20, 20)
    n1: int = 30
    n2: int = 30
    sigma_range: tuple[float, float] = (0.3, 0.8)
    changed_region: NDArray[np.bool_] | None = None
    mean_pair: tuple[NDArray[np.float64], NDArray[np.float64]] = (VERTICAL, HORIZONTAL)
    seed: int = 0
    tweedie: TweedieConfig = field(default_factory=lambda: TweedieConfig(top_fraction=0.25))

    def __post_init__(self) -> None:
        if self.changed_region is None:
            object.__setattr__(self, "changed_region", quarter_region(*self.grid))
        region = np.asarray(self.changed_region, dtype=bool)
        if region.shape != tuple(self.grid):
            raise ConfigError(f"changed_region shape {region.shape} != grid {self.grid}")
        if not region.any() or region.all():
            raise ConfigError("changed_region must be a nonempty proper subset of the grid")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ConfigError("sigma_range must satisfy 0 < lo <= hi")
        n = np.shape(self.mean_pair[0])[0]
        if self.n1 + self.n2 - 2 <= q_from_dim(n) + 1:
            raise ConfigError("n1 + n2 - 2 must exceed q + 1")

    @property
    def p(self) -> int:
        return int(self.grid[0] * self.grid[1])


@dataclass(frozen=True)
class GroupMetrics:
    f1_tweedie: float
    f1_mom: float
    mse_tweedie: float
    mse_mom: float
    mse_tweedie_changed: float
    mse_mom_changed: float
    iterations: int
    converged: bool


def gen_group_images(
    cfg: GroupExperimentConfig, rep: int = 0
) -> tuple[GroupData, NDArray[np.float64]]:
    """Two groups of SPD images with site noise ``sigma_i^2 I``.

    Both groups share the first template outside ``changed_region``; inside
    it the second group uses the second template. Also returns the true
    non-centrality of each site's T^2 statistic,
    ``|M1~ - M2~|^2 / (sigma_i^2 (1/n1 + 1/n2))``.
    """
    region = np.asarray(cfg.changed_region, dtype=bool).ravel()
    p = cfg.p
    a_vec = log_vec(cfg.mean_pair[0])
    b_vec = log_vec(cfg.mean_pair[1])
    q = a_vec.shape[0]
    m1 = np.broadcast_to(a_vec, (p, q))
    m2 = np.where(region[:, None], b_vec, a_vec)
    lo, hi = cfg.sigma_range
    sigma = np.empty(p)
    z1 = np.empty((p, cfg.n1, q))
    z2 = np.empty((p, cfg.n2, q))
    for i in range(p):
        gen = site_stream(cfg.seed, rep, i).generator()
        sigma[i] = gen.uniform(lo, hi)
        z1[i] = gen.standard_normal((cfg.n1, q))
        z2[i] = gen.standard_normal((cfg.n2, q))
    x = exp_vec(m1[:, None, :] + sigma[:, None, None] * z1)
    y = exp_vec(m2[:, None, :] + sigma[:, None, None] * z2)
    diff2 = np.sum((m1 - m2) ** 2, axis=1)
    truth = diff2 / (sigma**2 * (1.0 / cfg.n1 + 1.0 / cfg.n2))
    return GroupData(group1=x, group2=y), truth


def f1_score(selected: NDArray[np.bool_], truth: NDArray[np.bool_]) -> float:
    selected = np.asarray(selected, dtype=bool).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    tp = int(np.sum(selected & truth))
    denom = int(selected.sum() + truth.sum())
    return 2.0 * tp / denom if denom else 1.0


def run_group_experiment(
    cfg: GroupExperimentConfig, rep: int = 0
) -> tuple[NoncentralityMap, GroupMetrics]:
    """Hotelling T^2 -> F statistics -> Tweedie iteration, scored against truth."""
    data, truth = gen_group_images(cfg, rep)
    t2, _ = hotelling_t2(data)
    f = to_f_stats(t2, data.n_x, data.n_y, data.q)
    nmap = tweedie_iterate(f, cfg.tweedie)
    region = np.asarray(cfg.changed_region, dtype=bool).ravel()
    mom_sel = select_top(nmap.lambda_mom, cfg.tweedie.top_fraction)
    err_t = (nmap.lambda_tweedie - truth) ** 2
    err_m = (nmap.lambda_mom - truth) ** 2
    metrics = GroupMetrics(
        f1_tweedie=f1_score(nmap.selection, region),
        f1_mom=f1_score(mom_sel, region),
        mse_tweedie=float(err_t.mean()),
        mse_mom=float(err_m.mean()),
        mse_tweedie_changed=float(err_t[region].mean()),
        mse_mom_changed=float(err_m[region].mean()),
        iterations=nmap.iterations,
        converged=nmap.converged,
    )
    return nmap, metrics
