"""Text file formats: SPD tensor fields, run configurations and result CSVs.

Tensor-field files start with a header line ``SPDF1 <p> <N> <n>`` followed
by one record per observation::

    <site_id> <obs_id> <N*N row-major entries>

Records may appear in any order; they are sorted by ``(site_id, obs_id)`` on
load. Floats are written with 17 significant digits so that a write/read
round trip is bit-exact.
"""

from __future__ import annotations

import configparser
import csv
import warnings
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import BadMagicError, ConfigError, CorruptRecordError, NotSpdError
from .geometry import is_spd

__all__ = [
    "MAGIC",
    "fmt_float",
    "write_tensor_field",
    "read_tensor_field",
    "RunConfig",
    "CONFIG_SCHEMAS",
    "load_config",
    "parse_config",
    "write_csv",
    "read_csv",
]

MAGIC = "SPDF1"

PathType = str | PathLike


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


# ---------------------------------------------------------------------------
# Tensor fields
# ---------------------------------------------------------------------------


def write_tensor_field(path: PathType, data: ArrayLike) -> None:
    """Write an array of shape (p, n, N, N), or (p, N, N) for n = 1."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[-1] != arr.shape[-2]:
        raise ValueError(f"expected shape (p, n, N, N), got {arr.shape}")
    p, n, N, _ = arr.shape
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"{MAGIC} {p} {N} {n}\n")
        for i in range(p):
            for j in range(n):
                vals = " ".join(fmt_float(v) for v in arr[i, j].ravel())
                fh.write(f"{i} {j} {vals}\n")


def _parse_header(line: str) -> tuple[int, int, int]:
    parts = line.split()
    if not parts or parts[0] != MAGIC:
        raise BadMagicError(f"not a tensor-field file (expected {MAGIC!r} header)")
    try:
        p, N, n = (int(v) for v in parts[1:])
    except ValueError as exc:
        raise CorruptRecordError(f"malformed header {line.strip()!r}") from exc
    if p < 1 or N < 1 or n < 1:
        raise CorruptRecordError(f"header sizes must be positive, got p={p} N={N} n={n}")
    return p, N, n


def read_tensor_field(path: PathType, validation: str = "reject") -> NDArray[np.float64]:
    """Load a tensor-field file as an array of shape (p, n, N, N).

    ``validation`` is ``"reject"`` (raise :class:`NotSpdError` naming the
    first offending site and observation) or ``"warn"``.
    """
    if validation not in ("reject", "warn"):
        raise ValueError(f"validation must be 'reject' or 'warn', got {validation!r}")
    with open(path, encoding="ascii") as fh:
        p, N, n = _parse_header(fh.readline())
        out = np.empty((p, n, N, N))
        seen = np.zeros((p, n), dtype=bool)
        k = -1
        for k, line in enumerate(fh):
            parts = line.split()
            if len(parts) != 2 + N * N:
                raise CorruptRecordError(
                    f"record {k} has {len(parts)} fields, expected {2 + N * N}", index=k
                )
            try:
                i, j = int(parts[0]), int(parts[1])
                vals = np.array([float(v) for v in parts[2:]])
            except ValueError as exc:
                raise CorruptRecordError(f"record {k} is not numeric", index=k) from exc
            if not (0 <= i < p and 0 <= j < n):
                raise CorruptRecordError(f"record {k} has ids ({i}, {j}) out of range", index=k)
            if seen[i, j]:
                raise CorruptRecordError(f"record {k} duplicates site {i} obs {j}", index=k)
            seen[i, j] = True
            out[i, j] = vals.reshape(N, N)
    if not seen.all():
        first = int(np.flatnonzero(~seen.ravel())[0])
        i, j = divmod(first, n)
        raise CorruptRecordError(
            f"missing record {first} (site {i}, obs {j}); found {k + 1} of {p * n}", index=first
        )
    ok = np.asarray(is_spd(out)).reshape(p, n)
    if not ok.all():
        i, j = (int(v) for v in np.argwhere(~ok)[0])
        msg = f"matrix at site {i}, obs {j} is not SPD"
        if validation == "reject":
            raise NotSpdError(msg)
        warnings.warn(f"{msg} ({int((~ok).sum())} matrices in total)", RuntimeWarning, stacklevel=2)
    return out


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace("x", ",").split(",") if v.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _names(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


_TWEEDIE_KEYS: dict[str, Callable[[str], Any]] = {
    "top_fraction": float,
    "degree": int,
    "bins": int,
    "max_iters": int,
    "tol": float,
}

CONFIG_SCHEMAS: dict[str, dict[str, Callable[[str], Any]]] = {
    "estimate": {
        "known_variance": _bool,
        "grad_tol": float,
        "max_iters": int,
        "validation": str,
    },
    "groupdiff": {
        **_TWEEDIE_KEYS,
        "smooth": int,
        "grid": _ints,
        "validation": str,
    },
    "simulate-risk": {
        "seed": int,
        "output": str,
        "p_grid": _ints,
        "n": int,
        "reps": int,
        "lam": float,
        "nu": float,
        "dim": int,
        "estimators": _names,
    },
    "simulate-groups": {
        **_TWEEDIE_KEYS,
        "seed": int,
        "output": str,
        "grid": _ints,
        "n1": int,
        "n2": int,
        "sigma_range": _floats,
        "reps": int,
        "smooth": int,
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Typed key/value settings for one CLI command."""

    command: str
    values: Mapping[str, Any] = field(default_factory=dict)

    def get(self, key: str, default: Any = None) -> Any:
        if key not in CONFIG_SCHEMAS[self.command]:
            raise KeyError(key)
        return self.values.get(key, default)


def parse_config(text: str, command: str) -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments allowed).

    Unknown keys and unparsable values raise :class:`ConfigError`.
    """
    if command not in CONFIG_SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    schema = CONFIG_SCHEMAS[command]
    cp = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
        interpolation=None,
    )
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values: dict[str, Any] = {}
    for key, raw in cp["run"].items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} for {command}")
        try:
            values[key] = schema[key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return RunConfig(command=command, values=values)


def load_config(path: PathType, command: str) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, command)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_csv(path: PathType, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: PathType) -> tuple[list[str], list[list[str]]]:
    """Header and raw string rows; convert fields with ``float``/``int``."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]
