"""Samplers and distribution functions.

Matrix samplers (Log-Normal on P_N, Wishart, Inverse-Wishart) draw from
counter-based :class:`RngStream` values so that Monte Carlo work split over
sites or replications is reproducible under any schedule.

The non-central chi-square and F distribution functions are Poisson
mixtures of central ones. Terms are summed on a window around the Poisson
mode that is widened until a rigorous bound on the mass outside it falls
below ``SERIES_RTOL`` relative to the sum, which keeps the series stable
for large non-centralities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from .errors import BadDofError, BadProbError, DimMismatchError, NotSpdError
from .geometry import exp_vec, log_vec, q_from_dim, symmetrize

__all__ = [
    "RngStream",
    "LogNormalParams",
    "WishartParams",
    "sample_log_normal",
    "sample_wishart",
    "sample_inv_wishart",
    "bartlett_factor",
    "nc_chi2_cdf",
    "nc_chi2_sf",
    "nc_chi2_pdf",
    "nc_chi2_quantile",
    "nc_chi2_isf",
    "nc_f_cdf",
    "nc_f_sf",
]

SERIES_RTOL = 1e-14
QUANTILE_TOL = 1e-10
_MAX_TERMS = 100_000
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Backed by Philox with the 128-bit key ``stream_id << 64 | seed``; two
    streams with the same pair produce bit-identical sequences.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = ((self.stream_id & _MASK64) << 64) | (self.seed & _MASK64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)


def _as_generator(rng: RngStream | np.random.Generator) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


@dataclass(frozen=True)
class LogNormalParams:
    """Log-Normal on P_N: ``ve(log X) ~ N(ve(log mean), cov)``."""

    mean: NDArray[np.float64]
    cov: NDArray[np.float64]

    def __post_init__(self) -> None:
        n = np.shape(self.mean)[-1]
        if np.shape(self.cov) != (q_from_dim(n),) * 2:
            raise DimMismatchError(
                f"cov must be {q_from_dim(n)}x{q_from_dim(n)} for a {n}x{n} mean"
            )


@dataclass(frozen=True)
class WishartParams:
    scale: NDArray[np.float64]
    dof: float


def _cholesky(a: NDArray[np.float64]) -> NDArray[np.float64]:
    try:
        return np.linalg.cholesky(symmetrize(a))
    except np.linalg.LinAlgError as exc:
        raise NotSpdError("covariance is not positive definite") from exc


def sample_log_normal(
    p: LogNormalParams, rng: RngStream | np.random.Generator, count: int
) -> NDArray[np.float64]:
    """Draw ``count`` Log-Normal SPD matrices, shape ``(count, N, N)``."""
    gen = _as_generator(rng)
    mvec = log_vec(p.mean)
    chol = _cholesky(np.asarray(p.cov, dtype=np.float64))
    z = gen.standard_normal((count, mvec.shape[-1]))
    return exp_vec(mvec + z @ chol.T)


def bartlett_factor(q: int, dof: float, gen: np.random.Generator) -> NDArray[np.float64]:
    """Lower-triangular A with ``A A^T ~ Wishart_q(I, dof)``."""
    a = np.zeros((q, q))
    a[np.diag_indices(q)] = np.sqrt(gen.chisquare(dof - np.arange(q)))
    il = np.tril_indices(q, k=-1)
    a[il] = gen.standard_normal(len(il[0]))
    return a


def _check_wishart(p: WishartParams, min_gap: float) -> tuple[NDArray[np.float64], int]:
    scale = np.asarray(p.scale, dtype=np.float64)
    if scale.ndim != 2 or scale.shape[0] != scale.shape[1]:
        raise DimMismatchError("Wishart scale must be square")
    q = scale.shape[0]
    if not p.dof > q + min_gap:
        raise BadDofError(f"dof {p.dof} must exceed {q + min_gap} for a {q}x{q} scale")
    return scale, q


def sample_wishart(p: WishartParams, rng: RngStream | np.random.Generator) -> NDArray[np.float64]:
    """Wishart(scale, dof) draw by the Bartlett decomposition, E[S] = dof * scale."""
    scale, q = _check_wishart(p, -1.0)
    chol = _cholesky(scale)
    la = chol @ bartlett_factor(q, p.dof, _as_generator(rng))
    return symmetrize(la @ la.T)


def sample_inv_wishart(
    p: WishartParams, rng: RngStream | np.random.Generator
) -> NDArray[np.float64]:
    """Inverse-Wishart(scale, dof) draw with mean ``scale / (dof - q - 1)``.

    Computed as the inverse of a Wishart(scale^-1, dof) draw from the same
    stream.
    """
    scale, _ = _check_wishart(p, 1.0)
    w = sample_wishart(WishartParams(np.linalg.inv(scale), p.dof), rng)
    return symmetrize(np.linalg.inv(w))


# ---------------------------------------------------------------------------
# Non-central chi-square / F
# ---------------------------------------------------------------------------


def _poisson_mixture(
    half_lam: NDArray[np.float64],
    component: Callable[[NDArray[np.float64], NDArray[np.intp]], NDArray[np.float64]],
    increasing: bool,
    density: Callable[[NDArray[np.float64], NDArray[np.intp]], NDArray[np.float64]] | None = None,
) -> tuple[NDArray[np.float64], NDArray[np.float64] | None]:
    """Sum ``sum_k Pois(k; half_lam) * component(k)`` elementwise.

    ``component`` must take values in [0, 1] and be monotone in k
    (``increasing`` tells which way); that monotonicity gives the tail bound
    used for truncation. ``density`` terms, if given, are summed over the
    same k range.

    Terms are taken on a window of k around the Poisson mode, evaluated in
    one vectorized pass; elements whose truncated tails are not yet below
    ``SERIES_RTOL`` of the partial sum are redone on a doubled window.
    """
    m = half_lam.size
    total = np.zeros(m)
    dens = np.zeros(m) if density is not None else None
    k0 = np.floor(half_lam)
    pending = np.arange(m)
    width = np.ceil(8.0 * np.sqrt(half_lam) + 16.0)
    while pending.size:
        if width[pending].max() > _MAX_TERMS:
            raise ArithmeticError("Poisson mixture series did not converge")
        redo = []
        # group by window size so small non-centralities stay cheap
        bucket = np.ceil(np.log2(width[pending])).astype(int)
        for bkt in np.unique(bucket):
            sel = pending[bucket == bkt]
            w_max = int(width[sel].max())
            below = int(min(w_max, k0[sel].max()))
            offsets = np.arange(-below, w_max + 1, dtype=np.float64)
            # keep each block near 2e6 terms
            rows = max(1, 2_000_000 // offsets.size)
            for b in range(0, sel.size, rows):
                idx = sel[b : b + rows]
                good, sums, dsum = _mixture_block(
                    half_lam[idx], k0[idx], idx, offsets, component, increasing, density
                )
                total[idx[good]] = sums[good]
                if dens is not None:
                    dens[idx[good]] = dsum[good]
                redo.append(idx[~good])
        pending = np.concatenate(redo)
        width[pending] *= 2
    return total, dens


def _mixture_block(half_lam, k0, idx, offsets, component, increasing, density):
    hl = half_lam[:, None]
    k = k0[:, None] + offsets
    valid = k >= 0
    kk = np.where(valid, k, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logw = special.xlogy(kk, hl) - hl - special.gammaln(kk + 1)
    wts = np.where(valid, np.exp(logw), 0.0)
    ii = np.broadcast_to(idx[:, None], kk.shape)
    comp = component(kk, ii)
    sums = np.sum(wts * comp, axis=1)
    # mass past either end is bounded by a geometric series in the
    # weight ratio at that end
    r_up = half_lam / (k[:, -1] + 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        up_tail = np.where(r_up < 1, wts[:, -1] * r_up / (1.0 - r_up), np.inf)
        k_lo = k[:, 0]
        r_dn = np.where(half_lam > 0, k_lo / half_lam, 0.0)
        dn_tail = np.where(k_lo > 0, wts[:, 0] * r_dn / (1.0 - r_dn), 0.0)
    up_bound = up_tail if increasing else up_tail * comp[:, -1]
    dn_bound = dn_tail * comp[:, 0] if increasing else dn_tail
    good = (up_bound <= SERIES_RTOL * sums) & (dn_bound <= SERIES_RTOL * sums)
    dsum = np.sum(wts * density(kk, ii), axis=1) if density is not None else None
    return good, sums, dsum


def _broadcast(*args: ArrayLike) -> tuple[tuple[int, ...], list[NDArray[np.float64]]]:
    arrs = np.broadcast_arrays(*[np.asarray(a, dtype=np.float64) for a in args])
    return arrs[0].shape, [a.ravel().copy() for a in arrs]


def _check_lambda(lam: NDArray[np.float64]) -> None:
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValueError("non-centrality must be finite and nonnegative")


def _chi2_parts(x, dof, lam, upper: bool, want_pdf: bool):
    shape, (x, dof, lam) = _broadcast(x, dof, lam)
    if np.any(dof <= 0):
        raise BadDofError("dof must be positive")
    _check_lambda(lam)
    xp = np.maximum(x, 0.0)
    half_x = 0.5 * xp

    def comp(k, idx):
        a = 0.5 * dof[idx] + k
        return special.gammaincc(a, half_x[idx]) if upper else special.gammainc(a, half_x[idx])

    def dens(k, idx):
        a = 0.5 * dof[idx] + k
        hx = half_x[idx]
        with np.errstate(divide="ignore"):
            logp = special.xlogy(a - 1.0, hx) - hx - special.gammaln(a)
        return 0.5 * np.exp(logp)

    total, pdf = _poisson_mixture(0.5 * lam, comp, increasing=upper,
                                  density=dens if want_pdf else None)
    neg = x < 0
    if np.any(neg):
        total[neg] = 1.0 if upper else 0.0
        if pdf is not None:
            pdf[neg] = 0.0
    total = np.clip(total, 0.0, 1.0)
    return shape, total, pdf


def _shape_out(shape, arr):
    out = arr.reshape(shape)
    return float(out) if out.ndim == 0 else out


def nc_chi2_cdf(x: ArrayLike, dof: ArrayLike, lam: ArrayLike) -> NDArray[np.float64] | float:
    """CDF of the non-central chi-square distribution (x < 0 gives 0)."""
    shape, total, _ = _chi2_parts(x, dof, lam, upper=False, want_pdf=False)
    return _shape_out(shape, total)


def nc_chi2_sf(x: ArrayLike, dof: ArrayLike, lam: ArrayLike) -> NDArray[np.float64] | float:
    """Survival function, accurate in the upper tail."""
    shape, total, _ = _chi2_parts(x, dof, lam, upper=True, want_pdf=False)
    return _shape_out(shape, total)


def nc_chi2_pdf(x: ArrayLike, dof: ArrayLike, lam: ArrayLike) -> NDArray[np.float64] | float:
    shape, _, pdf = _chi2_parts(x, dof, lam, upper=False, want_pdf=True)
    return _shape_out(shape, pdf)


def _chi2_solve(target, dof, lam, upper: bool):
    """Solve cdf(x) = target (or sf(x) = target) elementwise.

    Starts from Patnaik's scaled central chi-square approximation and runs a
    safeguarded Newton iteration: every iterate tightens a bracket, and steps
    that leave it fall back to bisection (or doubling while the bracket is
    still open above). Converged when the residual is below
    ``QUANTILE_TOL * min(1, target)`` or the bracket collapses.
    """
    m = target.size
    tol = QUANTILE_TOL * np.minimum(1.0, target)
    scale = (dof + 2.0 * lam) / (dof + lam)
    shape_dof = (dof + lam) ** 2 / (dof + 2.0 * lam)
    if upper:
        x = scale * 2.0 * special.gammainccinv(0.5 * shape_dof, target)
    else:
        x = scale * 2.0 * special.gammaincinv(0.5 * shape_dof, target)
    x = np.where(np.isfinite(x) & (x > 0), x, dof + lam)
    lo = np.zeros(m)
    hi = np.full(m, np.inf)
    active = np.arange(m)
    for _ in range(500):
        _, val, pdf = _chi2_parts(x[active], dof[active], lam[active], upper=upper, want_pdf=True)
        g = (target[active] - val) if upper else (val - target[active])
        done = np.abs(g) <= tol[active]
        pos = g > 0
        hi[active] = np.where(pos, x[active], hi[active])
        lo[active] = np.where(pos, lo[active], x[active])
        collapsed = np.isfinite(hi[active]) & (
            (hi[active] - lo[active]) <= 4e-16 * np.maximum(hi[active], 1e-300)
        )
        keep = ~(done | collapsed)
        active = active[keep]
        if active.size == 0:
            break
        g, pdf = g[keep], pdf[keep]
        a_lo, a_hi = lo[active], hi[active]
        with np.errstate(divide="ignore", invalid="ignore"):
            step = x[active] - g / pdf
        fallback = np.where(np.isfinite(a_hi), 0.5 * (a_lo + a_hi), 2.0 * x[active] + 1.0)
        ok = np.isfinite(step) & (step > a_lo) & (step < a_hi)
        x[active] = np.where(ok, step, fallback)
    return x


def _quantile_args(prob, dof, lam):
    shape, (prob, dof, lam) = _broadcast(prob, dof, lam)
    if np.any(~((prob > 0) & (prob < 1))):
        raise BadProbError("probability must lie strictly between 0 and 1")
    if np.any(dof <= 0):
        raise BadDofError("dof must be positive")
    _check_lambda(lam)
    return shape, prob, dof, lam


def nc_chi2_quantile(prob: ArrayLike, dof: ArrayLike, lam: ArrayLike) -> NDArray[np.float64] | float:
    """Inverse CDF of the non-central chi-square distribution."""
    shape, prob, dof, lam = _quantile_args(prob, dof, lam)
    out = np.empty_like(prob)
    lower = prob <= 0.5
    if lower.any():
        out[lower] = _chi2_solve(prob[lower], dof[lower], lam[lower], upper=False)
    if (~lower).any():
        u = ~lower
        out[u] = _chi2_solve(1.0 - prob[u], dof[u], lam[u], upper=True)
    return _shape_out(shape, out)


def nc_chi2_isf(prob: ArrayLike, dof: ArrayLike, lam: ArrayLike) -> NDArray[np.float64] | float:
    """Inverse survival function: x with ``nc_chi2_sf(x) == prob``."""
    shape, prob, dof, lam = _quantile_args(prob, dof, lam)
    out = np.empty_like(prob)
    upper = prob <= 0.5
    if upper.any():
        out[upper] = _chi2_solve(prob[upper], dof[upper], lam[upper], upper=True)
    if (~upper).any():
        lo = ~upper
        out[lo] = _chi2_solve(1.0 - prob[lo], dof[lo], lam[lo], upper=False)
    return _shape_out(shape, out)


def _f_parts(x, dof1, dof2, lam, upper: bool):
    shape, (x, d1, d2, lam) = _broadcast(x, dof1, dof2, lam)
    if np.any(d1 <= 0) or np.any(d2 <= 0):
        raise BadDofError("dof must be positive")
    _check_lambda(lam)
    xp = np.maximum(x, 0.0)
    u = d1 * xp / (d1 * xp + d2)
    v = d2 / (d1 * xp + d2)

    def comp(k, idx):
        a = 0.5 * d1[idx] + k
        b = 0.5 * d2[idx]
        if upper:
            return special.betainc(b, a, v[idx])
        return special.betainc(a, b, u[idx])

    total, _ = _poisson_mixture(0.5 * lam, comp, increasing=upper)
    neg = x < 0
    total[neg] = 1.0 if upper else 0.0
    return shape, np.clip(total, 0.0, 1.0)


def nc_f_cdf(x: ArrayLike, dof1: ArrayLike, dof2: ArrayLike, lam: ArrayLike) -> NDArray[np.float64] | float:
    """CDF of the non-central F distribution F(dof1, dof2, lam)."""
    shape, total = _f_parts(x, dof1, dof2, lam, upper=False)
    return _shape_out(shape, total)


def nc_f_sf(x: ArrayLike, dof1: ArrayLike, dof2: ArrayLike, lam: ArrayLike) -> NDArray[np.float64] | float:
    shape, total = _f_parts(x, dof1, dof2, lam, upper=True)
    return _shape_out(shape, total)
