"""Dense 2-D matrix helpers with multiply-accumulate instrumentation.

Matrices are plain ``numpy.ndarray`` objects of rank 2.  Every public
operation checks shapes exactly (no broadcasting) and refuses to return
non-finite data.  A :class:`MacCounter` may be passed to the arithmetic
helpers to record how many multiply-accumulates (and, separately, plain
additions) an expression costs; the cost model in :mod:`blocklora.cost`
is verified against these counts.

Random initialisation uses numpy's PCG64 bit generator seeded through
``numpy.random.default_rng(seed)``.  Sub-streams are derived with
:func:`spawn_seeds`, which wraps ``SeedSequence.spawn``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NumericError, ShapeError

Matrix = np.ndarray

F64 = np.float64
F32 = np.float32

_DTYPES = {"f64": F64, "f32": F32}


def dtype_for(precision: str) -> type:
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ShapeError(f"unknown precision {precision!r}; expected f32 or f64") from None


@dataclass
class MacCounter:
    """Running tally of multiply-accumulates and standalone additions."""

    mac_count: int = 0
    add_count: int = 0
    enabled: bool = True

    def record_macs(self, n: int) -> None:
        if self.enabled:
            self.mac_count += n

    def record_adds(self, n: int) -> None:
        if self.enabled:
            self.add_count += n

    def reset(self) -> None:
        self.mac_count = 0
        self.add_count = 0


def _shape(m: Matrix) -> str:
    return "x".join(str(s) for s in m.shape)


def _check_2d(m: Matrix, name: str = "operand") -> None:
    if not isinstance(m, np.ndarray) or m.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array, got {getattr(m, 'shape', type(m))}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} has empty shape {_shape(m)}")


def _finite(m: Matrix) -> Matrix:
    if not np.isfinite(m).all():
        raise NumericError(f"non-finite entries in {_shape(m)} result")
    return m


def as_matrix(data, dtype=F64) -> Matrix:
    """Convert nested sequences (or a 1-D vector, as one row) to a matrix."""
    m = np.array(data, dtype=dtype)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    _check_2d(m)
    return _finite(m)


def matmul(a: Matrix, b: Matrix, counter: MacCounter | None = None) -> Matrix:
    _check_2d(a, "left")
    _check_2d(b, "right")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {_shape(a)} by {_shape(b)}")
    if counter is not None:
        counter.record_macs(a.shape[0] * a.shape[1] * b.shape[1])
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return _finite(out)


def add(a: Matrix, b: Matrix, counter: MacCounter | None = None) -> Matrix:
    _check_2d(a, "left")
    _check_2d(b, "right")
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {_shape(a)} and {_shape(b)}")
    if counter is not None:
        counter.record_adds(a.size)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a + b
    return _finite(out)


def sum_matrices(parts: Sequence[Matrix], counter: MacCounter | None = None) -> Matrix:
    """Left-to-right sum.  A single part is returned as an exact copy."""
    if not parts:
        raise ShapeError("cannot sum an empty list of matrices")
    total = parts[0].copy()
    for p in parts[1:]:
        total = add(total, p, counter)
    return total


def scale(a: Matrix, factor: float) -> Matrix:
    if factor == 1.0:
        return a
    return _finite(a * a.dtype.type(factor))


def concat_cols(parts: Sequence[Matrix]) -> Matrix:
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    for p in parts:
        _check_2d(p)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(
            "concat_cols needs equal row counts, got " + ", ".join(_shape(p) for p in parts)
        )
    return np.concatenate(parts, axis=1)


def concat_rows(parts: Sequence[Matrix]) -> Matrix:
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    for p in parts:
        _check_2d(p)
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(
            "concat_rows needs equal column counts, got " + ", ".join(_shape(p) for p in parts)
        )
    return np.concatenate(parts, axis=0)


def split_cols(m: Matrix, n: int) -> list[Matrix]:
    """Split into ``n`` equal-width column blocks, preserving order."""
    _check_2d(m)
    if n < 1 or m.shape[1] % n:
        raise ShapeError(f"cannot split {_shape(m)} into {n} column blocks")
    w = m.shape[1] // n
    return [m[:, i * w:(i + 1) * w].copy() for i in range(n)]


def split_rows(m: Matrix, n: int) -> list[Matrix]:
    _check_2d(m)
    if n < 1 or m.shape[0] % n:
        raise ShapeError(f"cannot split {_shape(m)} into {n} row blocks")
    h = m.shape[0] // n
    return [m[i * h:(i + 1) * h, :].copy() for i in range(n)]


def zeros(rows: int, cols: int, dtype=F64) -> Matrix:
    if rows < 1 or cols < 1:
        raise ShapeError(f"non-positive dimension {rows}x{cols}")
    return np.zeros((rows, cols), dtype=dtype)


def seeded_gaussian(rows: int, cols: int, seed, std: float, dtype=F64) -> Matrix:
    """Draw an i.i.d. N(0, std^2) matrix.

    ``seed`` is anything ``numpy.random.default_rng`` accepts (an int or a
    ``SeedSequence``).  Sampling always happens in float64 and is then cast,
    so the f32 matrix is the rounded f64 one.
    """
    if rows < 1 or cols < 1:
        raise ShapeError(f"non-positive dimension {rows}x{cols}")
    if not std > 0:
        raise ShapeError(f"std must be positive, got {std}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, std, size=(rows, cols)).astype(dtype)


def spawn_seeds(seed, count: int) -> list[np.random.SeedSequence]:
    """Derive ``count`` independent child seeds from ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(count)


def max_abs_diff(a: Matrix, b: Matrix) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare {_shape(a)} and {_shape(b)}")
    return float(np.max(np.abs(a - b)))
