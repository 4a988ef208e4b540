"""SURE-based empirical-Bayes shrinkage of per-site means and covariances.

Two estimators are provided:

* the known-variance estimator, where site i has covariance ``A_i * I`` and
  the sample Fréchet means are pulled toward a common center ``mu`` with
  weight ``A_i / (n*lam + A_i)``;
* the full Log-Normal-Inverse-Wishart estimator, which shrinks both the
  Fréchet means (toward ``mu``) and the scatter matrices (toward ``psi``),
  with hyperparameters chosen by minimizing an unbiased estimate of the
  joint risk.

All per-site arithmetic happens in the Euclidean coordinates
``ve(log X)``; matrices only appear at the edges.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize

from .errors import (
    BadNError,
    DimMismatchError,
    EmptyInputError,
    OptFailedError,
    SingularScatterError,
    TooFewSamplesError,
)
from .geometry import check_spd, exp_vec, log_vec, q_from_dim, symmetrize

__all__ = [
    "LAMBDA_MIN",
    "LAMBDA_MAX",
    "NU_GAP",
    "GRAD_TOL",
    "MAX_ITERS",
    "SiteStats",
    "Hyperparams",
    "ShrinkageResult",
    "GroundTruth",
    "SureFit",
    "site_stats",
    "stats_from_log_vectors",
    "default_known_variances",
    "sure_fm_known_var",
    "posterior_fm_known_var",
    "estimate_fm_known_var",
    "sure_full",
    "sure_full_parts",
    "init_hyperparams",
    "minimize_sure",
    "posterior_estimates",
    "estimate_full",
    "mle_estimates",
    "loss_le",
]

log = logging.getLogger(__name__)

LAMBDA_MIN = 1e-8
LAMBDA_MAX = 1e8
NU_GAP = 1e-6
NU_MAX = 1e6
GRAD_TOL = 1e-6
MAX_ITERS = 200
FD_REL_STEP = 1e-6


@dataclass(frozen=True, eq=False)
class SiteStats:
    """Per-site sufficient statistics.

    Attributes
    ----------
    n : int
        Observations per site.
    xbar_vec : ndarray, shape (p, q)
        ``ve(log Xbar_i)`` for the Log-Euclidean sample Fréchet means.
    scatter : ndarray, shape (p, q, q)
        Scatter matrices ``S_i`` of the log-vectors about their means.
    """

    n: int
    xbar_vec: NDArray[np.float64]
    scatter: NDArray[np.float64]

    def __post_init__(self) -> None:
        p, q = self.xbar_vec.shape
        if self.scatter.shape != (p, q, q):
            raise DimMismatchError(
                f"scatter shape {self.scatter.shape} does not match ({p}, {q}, {q})"
            )

    @property
    def p(self) -> int:
        return self.xbar_vec.shape[0]

    @property
    def q(self) -> int:
        return self.xbar_vec.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        q = self.q
        return self.p, int(round((np.sqrt(8 * q + 1) - 1) / 2)), q

    @cached_property
    def xbar(self) -> NDArray[np.float64]:
        """Sample Fréchet means as SPD matrices, shape (p, N, N)."""
        return exp_vec(self.xbar_vec)

    @cached_property
    def tr_s(self) -> NDArray[np.float64]:
        return np.trace(self.scatter, axis1=1, axis2=2)

    @cached_property
    def tr_s2(self) -> NDArray[np.float64]:
        return np.einsum("ijk,ikj->i", self.scatter, self.scatter)

    @cached_property
    def mean_scatter(self) -> NDArray[np.float64]:
        return self.scatter.mean(axis=0)


@dataclass(frozen=True, eq=False)
class Hyperparams:
    """Prior parameters ``(lam, mu, psi, nu)``.

    ``psi`` and ``nu`` are ``None`` for the known-variance estimator, which
    has no covariance prior.
    """

    lam: float
    mu: NDArray[np.float64]
    psi: NDArray[np.float64] | None = None
    nu: float | None = None

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        check_spd(self.mu)
        if self.psi is not None:
            q = q_from_dim(np.shape(self.mu)[-1])
            if np.shape(self.psi) != (q, q):
                raise DimMismatchError(f"psi must be {q}x{q}")
            if self.nu is None or not self.nu > q + 1:
                raise ValueError(f"nu must exceed q + 1 = {q + 1}, got {self.nu}")

    @cached_property
    def mu_vec(self) -> NDArray[np.float64]:
        return log_vec(self.mu)


@dataclass(frozen=True, eq=False)
class ShrinkageResult:
    means: NDArray[np.float64]
    covs: NDArray[np.float64]
    hyper: Hyperparams | None
    sure_value: float
    iterations: int = 0
    converged: bool = True
    sure_init: float = float("nan")

    @cached_property
    def mean_vecs(self) -> NDArray[np.float64]:
        return log_vec(self.means)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    means: NDArray[np.float64]
    covs: NDArray[np.float64]

    @cached_property
    def mean_vecs(self) -> NDArray[np.float64]:
        return log_vec(self.means)


@dataclass(frozen=True, eq=False)
class SureFit:
    """Outcome of :func:`minimize_sure`."""

    hyper: Hyperparams
    sure_value: float
    sure_init: float
    iterations: int
    converged: bool
    grad_norm: float
    init: Hyperparams = field(repr=False)


# ---------------------------------------------------------------------------
# Sufficient statistics
# ---------------------------------------------------------------------------


def stats_from_log_vectors(logs: ArrayLike) -> SiteStats:
    """Sufficient statistics from log-vectors of shape (p, n, q)."""
    logs = np.asarray(logs, dtype=np.float64)
    if logs.ndim != 3:
        raise DimMismatchError(f"expected (p, n, q) log-vectors, got shape {logs.shape}")
    p, n, _ = logs.shape
    if p == 0:
        raise EmptyInputError("no sites")
    if n < 2:
        raise TooFewSamplesError(f"need at least 2 observations per site, got {n}")
    mean = logs.mean(axis=1)
    dev = logs - mean[:, None, :]
    scatter = np.einsum("pja,pjb->pab", dev, dev)
    return SiteStats(n=n, xbar_vec=mean, scatter=symmetrize(scatter))


def site_stats(data: ArrayLike) -> SiteStats:
    """Fréchet means and scatter matrices from data of shape (p, n, N, N)."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 4 or data.shape[-1] != data.shape[-2]:
        raise DimMismatchError(f"expected (p, n, N, N) data, got shape {data.shape}")
    if data.shape[1] < 2:
        raise TooFewSamplesError(f"need at least 2 observations per site, got {data.shape[1]}")
    return stats_from_log_vectors(log_vec(data))


# ---------------------------------------------------------------------------
# Known-variance estimator
# ---------------------------------------------------------------------------


def default_known_variances(stats: SiteStats) -> NDArray[np.float64]:
    """Unbiased ``A_i = tr(S_i) / ((n - 1) q)``."""
    return stats.tr_s / ((stats.n - 1) * stats.q)


def _check_a(stats: SiteStats, a: ArrayLike) -> NDArray[np.float64]:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (stats.p,):
        raise DimMismatchError(f"need one variance per site ({stats.p}), got {a.shape}")
    if np.any(a <= 0):
        raise ValueError("known variances must be positive")
    return a


def _sure_known(n, q, a, d2, lam):
    return float(np.mean(a / (n * lam + a) ** 2 * (a * d2 + q * (n**2 * lam**2 - a**2) / n)))


def sure_fm_known_var(stats: SiteStats, a: ArrayLike, lam: float, mu: ArrayLike) -> float:
    a = _check_a(stats, a)
    mu_vec = log_vec(mu)
    if mu_vec.shape != (stats.q,):
        raise DimMismatchError("mu dimension does not match the data")
    d2 = np.sum((stats.xbar_vec - mu_vec) ** 2, axis=1)
    return _sure_known(stats.n, stats.q, a, d2, lam)


def posterior_fm_known_var(
    stats: SiteStats, a: ArrayLike, lam: float, mu: ArrayLike
) -> NDArray[np.float64]:
    a = _check_a(stats, a)
    w = (stats.n * lam / (stats.n * lam + a))[:, None]
    return exp_vec(w * stats.xbar_vec + (1.0 - w) * log_vec(mu))


def _fd_grad(f, x: NDArray[np.float64]) -> NDArray[np.float64]:
    g = np.empty_like(x)
    for k in range(x.size):
        h = FD_REL_STEP * (1.0 + abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        g[k] = (f(xp) - f(xm)) / (xp[k] - xm[k])
    return g


def _projected_grad_norm(x, g, bounds) -> float:
    pg = g.copy()
    for k, (lo, hi) in enumerate(bounds):
        if lo is not None and x[k] <= lo and g[k] > 0:
            pg[k] = 0.0
        if hi is not None and x[k] >= hi and g[k] < 0:
            pg[k] = 0.0
    return float(np.max(np.abs(pg))) if pg.size else 0.0


def _lbfgsb(f, x0, bounds, grad_tol, max_iters):
    res = optimize.minimize(
        f,
        x0,
        jac=lambda x: _fd_grad(f, x),
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": max_iters, "gtol": grad_tol, "ftol": 1e-15, "maxcor": 20},
    )
    x = np.asarray(res.x, dtype=np.float64)
    gnorm = _projected_grad_norm(x, _fd_grad(f, x), bounds)
    return x, float(res.fun), int(res.nit), gnorm


def estimate_fm_known_var(
    stats: SiteStats,
    a: ArrayLike | None = None,
    *,
    grad_tol: float = GRAD_TOL,
    max_iters: int = MAX_ITERS,
    strict: bool = False,
    warn: bool = True,
) -> ShrinkageResult:
    """Known-variance SURE shrinkage of the Fréchet means.

    ``a`` defaults to :func:`default_known_variances`. Covariances in the
    result are the maximum-likelihood ``S_i / n``.
    """
    if stats.p < 2:
        raise EmptyInputError("known-variance shrinkage needs at least two sites")
    a = default_known_variances(stats) if a is None else _check_a(stats, a)
    n, q = stats.n, stats.q
    center = stats.xbar_vec.mean(axis=0)
    spread = np.mean(np.sum((stats.xbar_vec - center) ** 2, axis=1))
    lam0 = float(np.clip(spread / q - np.mean(a) / n, LAMBDA_MIN, LAMBDA_MAX))

    def objective(x):
        d2 = np.sum((stats.xbar_vec - x[1:]) ** 2, axis=1)
        return _sure_known(n, q, a, d2, np.exp(x[0]))

    x0 = np.concatenate([[np.log(lam0)], center])
    bounds = [(np.log(LAMBDA_MIN), np.log(LAMBDA_MAX))] + [(None, None)] * q
    sure0 = objective(x0)
    x, fx, nit, gnorm = _lbfgsb(objective, x0, bounds, grad_tol, max_iters)
    if fx > sure0:
        x, fx = x0, sure0
    converged = gnorm <= grad_tol
    lam = float(np.exp(x[0]))
    mu = exp_vec(x[1:])
    hyper = Hyperparams(lam=lam, mu=mu)
    result = ShrinkageResult(
        means=posterior_fm_known_var(stats, a, lam, mu),
        covs=stats.scatter / n,
        hyper=hyper,
        sure_value=fx,
        iterations=nit,
        converged=converged,
        sure_init=sure0,
    )
    if not converged:
        msg = f"known-variance SURE minimization stopped with gradient {gnorm:.2e} > {grad_tol:.0e}"
        if strict:
            raise OptFailedError(msg, best=result)
        if warn:
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return result


# ---------------------------------------------------------------------------
# Full LNIW estimator
# ---------------------------------------------------------------------------


def _require_n(stats: SiteStats, minimum: int, why: str) -> None:
    if stats.n <= minimum:
        raise BadNError(f"{why} needs n > {minimum}, got n = {stats.n}")


def _sure_full_terms(stats: SiteStats, lam, mu_vec, psi, nu):
    n, q = stats.n, stats.q
    c = nu - q - 1.0
    denom = nu + n - q - 2.0
    d2 = np.sum((stats.xbar_vec - mu_vec) ** 2, axis=1)
    mean_part = np.mean((n - lam**2 / n) / (n - 1) * stats.tr_s + lam**2 * d2) / (lam + n) ** 2
    cov_part = (
        (n - 3 + c**2) / ((n + 1) * (n - 2)) * np.mean(stats.tr_s2)
        + ((n - 1) ** 2 - c**2) / ((n - 1) * (n + 1) * (n - 2)) * np.mean(stats.tr_s**2)
        - 2.0 * c / (n - 1) * np.sum(psi * stats.mean_scatter)
        + np.sum(psi * psi)
    ) / denom**2
    return float(mean_part), float(cov_part)


def sure_full_parts(stats: SiteStats, h: Hyperparams) -> tuple[float, float]:
    """The mean and covariance components of :func:`sure_full`."""
    _require_n(stats, 2, "SURE")
    if h.psi is None:
        raise ValueError("full SURE needs psi and nu")
    if h.mu_vec.shape != (stats.q,) or np.shape(h.psi) != (stats.q, stats.q):
        raise DimMismatchError("hyperparameter dimensions do not match the data")
    return _sure_full_terms(stats, h.lam, h.mu_vec, np.asarray(h.psi), h.nu)


def sure_full(stats: SiteStats, h: Hyperparams) -> float:
    """Unbiased estimate of the joint mean + covariance risk at ``h``."""
    m, c = sure_full_parts(stats, h)
    return m + c


def init_hyperparams(stats: SiteStats) -> Hyperparams:
    """Moment-matching starting point for :func:`minimize_sure`.

    Matches the marginal moments of the hierarchical model: the Fréchet
    mean of the site means for ``mu``, the spread of the site means against
    the average within-site variance for ``lam``, and the first moments of
    ``S_i`` and ``S_i^{-1}`` for ``nu`` and ``psi``. When the spread does not
    exceed what within-site noise alone explains, ``lam`` goes to
    ``LAMBDA_MAX`` (pool everything); likewise ``nu`` is capped at
    ``NU_MAX``.
    """
    n, q, p = stats.n, stats.q, stats.p
    _require_n(stats, q + 2, "initialization")
    if p < 2:
        raise EmptyInputError("initialization needs at least two sites")

    mu_vec = stats.xbar_vec.mean(axis=0)
    spread = float(np.mean(np.sum((stats.xbar_vec - mu_vec) ** 2, axis=1)))
    within = float(np.mean(stats.tr_s)) / (n - 1)
    excess = n * spread - within
    lam = n * within / excess if excess > 0 else LAMBDA_MAX
    lam = float(np.clip(lam, LAMBDA_MIN, LAMBDA_MAX))

    try:
        chol = np.linalg.cholesky(stats.scatter)
    except np.linalg.LinAlgError as exc:
        raise SingularScatterError("a scatter matrix is singular; cannot initialize nu") from exc
    eye = np.broadcast_to(np.eye(q), stats.scatter.shape)
    inv_chol = np.linalg.solve(chol, eye)
    mean_inv = np.einsum("pki,pkj->ij", inv_chol, inv_chol) / p
    ratio = (n - q - 2) / (q * (n - 1)) * float(np.trace(stats.mean_scatter @ mean_inv))
    nu = (q + 1) / (ratio - 1.0) + q + 1 if ratio > 1.0 else NU_MAX
    nu = float(np.clip(nu, q + 1 + 2 * NU_GAP, NU_MAX))

    psi = (nu - q - 1) / (n - 1) * stats.mean_scatter
    return Hyperparams(lam=lam, mu=exp_vec(mu_vec), psi=symmetrize(psi), nu=nu)


class _FullParam:
    """Unconstrained coordinates for ``(lam, mu, psi, nu)``.

    ``x = [log lam, ve(log mu) - ve(log mu0), B, w]`` where ``B`` packs a
    lower-triangular factor with log-diagonal,
    ``nu = q + 1 + NU_GAP + exp(w)`` and
    ``psi = (nu - q - 1) / (nu0 - q - 1) * L0 B B^T L0^T`` with ``L0`` the
    Cholesky factor of the initial psi. At the initial point ``B = I``.

    Scaling psi with ``nu - q - 1`` follows the SURE-optimal psi for fixed
    nu, which is proportional to ``nu - q - 1``; without it the two are
    strongly coupled and descent is slow.
    """

    def __init__(self, init: Hyperparams, q: int):
        self.q = q
        self.mu0 = init.mu_vec
        self.chol0 = np.linalg.cholesky(init.psi)
        self.c0 = init.nu - q - 1
        self.tril = np.tril_indices(q)
        self.diag_pos = np.nonzero(self.tril[0] == self.tril[1])[0]
        self.nb = len(self.tril[0])

    @property
    def size(self) -> int:
        return 2 + self.q + self.nb

    def pack(self, h: Hyperparams) -> NDArray[np.float64]:
        scale = (h.nu - self.q - 1) / self.c0
        b = np.linalg.solve(self.chol0, np.linalg.cholesky(h.psi / scale))
        packed = b[self.tril]
        packed[self.diag_pos] = np.log(packed[self.diag_pos])
        return np.concatenate([
            [np.log(h.lam)],
            h.mu_vec - self.mu0,
            packed,
            [np.log(h.nu - self.q - 1 - NU_GAP)],
        ])

    def unpack_raw(self, x):
        q = self.q
        lam = np.exp(x[0])
        mu_vec = self.mu0 + x[1 : 1 + q]
        vals = x[1 + q : 1 + q + self.nb].copy()
        vals[self.diag_pos] = np.exp(vals[self.diag_pos])
        b = np.zeros((q, q))
        b[self.tril] = vals
        lb = self.chol0 @ b
        nu = q + 1 + NU_GAP + np.exp(x[-1])
        psi = (nu - q - 1) / self.c0 * (lb @ lb.T)
        return lam, mu_vec, psi, nu

    def unpack(self, x) -> Hyperparams:
        lam, mu_vec, psi, nu = self.unpack_raw(x)
        return Hyperparams(lam=float(lam), mu=exp_vec(mu_vec), psi=symmetrize(psi), nu=float(nu))

    def bounds(self):
        w_hi = np.log(NU_MAX)
        return (
            [(np.log(LAMBDA_MIN), np.log(LAMBDA_MAX))]
            + [(None, None)] * (self.q + self.nb)
            + [(None, w_hi)]
        )


def minimize_sure(
    stats: SiteStats,
    init: Hyperparams | None = None,
    *,
    grad_tol: float = GRAD_TOL,
    max_iters: int = MAX_ITERS,
    strict: bool = False,
    warn: bool = True,
    restarts: int = 0,
) -> SureFit:
    """Minimize :func:`sure_full` over the hyperparameters.

    Bounded quasi-Newton (L-BFGS-B) on the reparameterization described in
    :class:`_FullParam`, with central finite-difference gradients. The fit is
    marked converged when the infinity norm of the projected gradient in
    those coordinates is at most ``grad_tol``. A non-converged fit returns
    the best iterate with ``converged=False`` (and a warning unless
    ``warn`` is false), or raises :class:`OptFailedError` when ``strict``.

    ``restarts`` adds that many extra runs from the initial point with
    ``lam`` scaled by 10, 0.1, 100, 0.01, ...; the lowest SURE wins, ties
    going to the earlier run.
    """
    _require_n(stats, stats.q + 2, "SURE minimization")
    if restarts < 0:
        raise ValueError("restarts must be nonnegative")
    init = init_hyperparams(stats) if init is None else init
    param = _FullParam(init, stats.q)

    def objective(x):
        lam, mu_vec, psi, nu = param.unpack_raw(x)
        m, c = _sure_full_terms(stats, lam, mu_vec, psi, nu)
        return m + c

    x0 = param.pack(init)
    sure0 = objective(x0)
    bounds = param.bounds()
    x, fx, nit, gnorm = _lbfgsb(objective, x0, bounds, grad_tol, max_iters)
    if not fx <= sure0:
        x, fx, gnorm = x0, sure0, _projected_grad_norm(x0, _fd_grad(objective, x0), bounds)
    lo, hi = bounds[0]
    for k in range(1, restarts + 1):
        start = x0.copy()
        start[0] = np.clip(start[0] + (-1) ** (k + 1) * ((k + 1) // 2) * np.log(10.0), lo, hi)
        xk, fk, nk, gk = _lbfgsb(objective, start, bounds, grad_tol, max_iters)
        if fk < fx:
            x, fx, nit, gnorm = xk, fk, nk, gk
    fit = SureFit(
        hyper=param.unpack(x),
        sure_value=fx,
        sure_init=sure0,
        iterations=nit,
        converged=gnorm <= grad_tol,
        grad_norm=gnorm,
        init=init,
    )
    if not fit.converged:
        msg = f"SURE minimization stopped after {nit} iterations with gradient {gnorm:.2e}"
        if strict:
            raise OptFailedError(msg, best=fit)
        if warn:
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    log.debug("minimize_sure: %d iterations, SURE %.6g -> %.6g", nit, sure0, fx)
    return fit


def posterior_estimates(
    stats: SiteStats,
    h: Hyperparams,
    *,
    sure_value: float | None = None,
    iterations: int = 0,
    converged: bool = True,
    sure_init: float = float("nan"),
) -> ShrinkageResult:
    """Posterior means of ``M_i`` and ``Sigma_i`` under the LNIW prior ``h``."""
    if h.psi is None:
        raise ValueError("posterior covariance estimates need psi and nu")
    n, q = stats.n, stats.q
    if h.mu_vec.shape != (q,):
        raise DimMismatchError("mu dimension does not match the data")
    mean_vecs = (n * stats.xbar_vec + h.lam * h.mu_vec) / (h.lam + n)
    covs = (np.asarray(h.psi) + stats.scatter) / (h.nu + n - q - 2)
    if sure_value is None:
        sure_value = sure_full(stats, h) if n > 2 else float("nan")
    return ShrinkageResult(
        means=exp_vec(mean_vecs),
        covs=symmetrize(covs),
        hyper=h,
        sure_value=float(sure_value),
        iterations=iterations,
        converged=converged,
        sure_init=sure_init,
    )


def estimate_full(stats: SiteStats, **kwargs) -> ShrinkageResult:
    """SURE-minimizing LNIW shrinkage estimates of means and covariances."""
    fit = minimize_sure(stats, **kwargs)
    return posterior_estimates(
        stats,
        fit.hyper,
        sure_value=fit.sure_value,
        iterations=fit.iterations,
        converged=fit.converged,
        sure_init=fit.sure_init,
    )


def mle_estimates(stats: SiteStats) -> ShrinkageResult:
    """Maximum-likelihood baseline: Fréchet means and ``S_i / n``."""
    return ShrinkageResult(
        means=stats.xbar,
        covs=stats.scatter / stats.n,
        hyper=None,
        sure_value=float("nan"),
    )


def loss_le(
    result: ShrinkageResult | Sequence[NDArray[np.float64]],
    truth: GroundTruth,
) -> tuple[float, float]:
    """Mean squared Log-Euclidean error of the means and mean squared
    Frobenius error of the covariances, returned separately."""
    est_vecs = result.mean_vecs
    if est_vecs.shape != truth.mean_vecs.shape or np.shape(result.covs) != np.shape(truth.covs):
        raise DimMismatchError("estimate and truth dimensions differ")
    l1 = float(np.mean(np.sum((est_vecs - truth.mean_vecs) ** 2, axis=1)))
    diff = np.asarray(result.covs) - np.asarray(truth.covs)
    l2 = float(np.mean(np.sum(diff**2, axis=(1, 2))))
    return l1, l2
