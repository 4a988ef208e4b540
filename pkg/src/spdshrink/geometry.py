"""Log-Euclidean geometry on the cone of SPD matrices.

All functions accept stacks of matrices with shape ``(..., N, N)`` and
operate on the trailing two axes. Under the Log-Euclidean metric the matrix
logarithm flattens P_N onto the vector space of symmetric matrices, and
``ve`` maps that space isometrically onto R^q with q = N(N+1)/2, so most
statistics reduce to ordinary Euclidean ones on ``log_vec(X)``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import (
    BadLengthError,
    DimMismatchError,
    EmptyInputError,
    ExpOverflowError,
    NotSpdError,
)

__all__ = [
    "SPD_EPS_REL",
    "EXP_CAP",
    "symmetrize",
    "check_spd",
    "is_spd",
    "sym_log",
    "sym_exp",
    "ve",
    "ve_inv",
    "dim_from_q",
    "q_from_dim",
    "log_vec",
    "exp_vec",
    "dist_le",
    "frechet_mean_le",
    "translate",
]

SPD_EPS_REL = 1e-12
EXP_CAP = 700.0

_SQRT2 = np.sqrt(2.0)


def symmetrize(a: ArrayLike) -> NDArray[np.float64]:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimMismatchError(f"expected square matrices, got shape {a.shape}")
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _eigh_spd(x: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    s = symmetrize(x)
    if not np.all(np.isfinite(s)):
        raise NotSpdError("matrix has non-finite entries")
    w, v = np.linalg.eigh(s)
    eps = SPD_EPS_REL * np.maximum(w[..., -1], 1.0)
    bad = w[..., 0] <= eps
    if np.any(bad):
        idx = np.argwhere(np.atleast_1d(bad))[0]
        raise NotSpdError(
            f"matrix at index {tuple(int(i) for i in idx)} is not SPD "
            f"(smallest eigenvalue {np.atleast_1d(w[..., 0])[tuple(idx)]:.3e})"
        )
    return w, v


def is_spd(x: ArrayLike) -> NDArray[np.bool_] | bool:
    """Elementwise SPD test with the same threshold used by :func:`check_spd`."""
    s = symmetrize(x)
    if not np.all(np.isfinite(s)):
        return False
    w = np.linalg.eigvalsh(s)
    return w[..., 0] > SPD_EPS_REL * np.maximum(w[..., -1], 1.0)


def check_spd(x: ArrayLike) -> NDArray[np.float64]:
    """Return the symmetrized input or raise :class:`NotSpdError`."""
    _eigh_spd(x)
    return symmetrize(x)


def sym_log(x: ArrayLike) -> NDArray[np.float64]:
    """Principal matrix logarithm of SPD matrices via eigendecomposition."""
    w, v = _eigh_spd(x)
    out = (v * np.log(w)[..., None, :]) @ np.swapaxes(v, -1, -2)
    return symmetrize(out)


def sym_exp(y: ArrayLike) -> NDArray[np.float64]:
    """Matrix exponential of symmetric matrices.

    Raises :class:`ExpOverflowError` when an eigenvalue exceeds ``EXP_CAP``.
    """
    s = symmetrize(y)
    w, v = np.linalg.eigh(s)
    if np.any(w > EXP_CAP):
        raise ExpOverflowError(f"eigenvalue {w.max():.4g} exceeds exp cap {EXP_CAP}")
    out = (v * np.exp(w)[..., None, :]) @ np.swapaxes(v, -1, -2)
    return symmetrize(out)


def q_from_dim(n: int) -> int:
    return n * (n + 1) // 2


def dim_from_q(q: int) -> int:
    n = int(round((np.sqrt(8 * q + 1) - 1) / 2))
    if n < 1 or q_from_dim(n) != q:
        raise BadLengthError(f"length {q} is not of the form N(N+1)/2")
    return n


def ve(y: ArrayLike) -> NDArray[np.float64]:
    """Isometric vectorization of symmetric matrices.

    The diagonal comes first in index order, followed by the strict upper
    triangle in row-major order scaled by sqrt(2), so that
    ``norm(ve(Y)) == norm(Y, 'fro')``.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim < 2 or y.shape[-1] != y.shape[-2]:
        raise DimMismatchError(f"expected square matrices, got shape {y.shape}")
    n = y.shape[-1]
    d = np.arange(n)
    iu, ju = np.triu_indices(n, k=1)
    off = 0.5 * (y[..., iu, ju] + y[..., ju, iu])
    return np.concatenate([y[..., d, d], _SQRT2 * off], axis=-1)


def ve_inv(v: ArrayLike) -> NDArray[np.float64]:
    v = np.asarray(v, dtype=np.float64)
    q = v.shape[-1]
    n = dim_from_q(q)
    out = np.zeros(v.shape[:-1] + (n, n))
    d = np.arange(n)
    iu, ju = np.triu_indices(n, k=1)
    out[..., d, d] = v[..., :n]
    off = v[..., n:] / _SQRT2
    out[..., iu, ju] = off
    out[..., ju, iu] = off
    return out


def log_vec(x: ArrayLike) -> NDArray[np.float64]:
    """``ve(sym_log(x))``: the Euclidean coordinates of SPD matrices."""
    return ve(sym_log(x))


def exp_vec(v: ArrayLike) -> NDArray[np.float64]:
    return sym_exp(ve_inv(v))


def dist_le(x: ArrayLike, y: ArrayLike) -> NDArray[np.float64] | float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[-2:] != y.shape[-2:]:
        raise DimMismatchError(f"dimension mismatch: {x.shape[-2:]} vs {y.shape[-2:]}")
    d = np.linalg.norm(sym_log(x) - sym_log(y), axis=(-2, -1))
    return float(d) if np.ndim(d) == 0 else d


def frechet_mean_le(
    xs: Sequence[ArrayLike] | ArrayLike,
    weights: ArrayLike | None = None,
) -> NDArray[np.float64]:
    """Log-Euclidean Fréchet mean ``exp(mean_i log X_i)`` of a sample.

    ``xs`` is a sequence of N x N SPD matrices (or an array of shape
    ``(n, N, N)``). Optional nonnegative ``weights`` are normalized to sum
    to one.
    """
    arr = np.asarray(xs, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] == 0:
        if arr.ndim == 3 or arr.size == 0:
            raise EmptyInputError("Fréchet mean of an empty sample")
        raise DimMismatchError(f"expected shape (n, N, N), got {arr.shape}")
    logs = sym_log(arr)
    if weights is None:
        avg = logs.mean(axis=0)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (arr.shape[0],):
            raise DimMismatchError("weights must have one entry per matrix")
        avg = np.tensordot(w / w.sum(), logs, axes=1)
    return sym_exp(avg)


def translate(c: ArrayLike, x: ArrayLike) -> NDArray[np.float64]:
    """Log-Euclidean group action ``C ⊙ X = exp(log C + log X)``."""
    return sym_exp(sym_log(c) + sym_log(x))
