"""Sparse formats, deterministic reductions and kernel-sized vector ops.

Dense vectors are plain one-dimensional float64 ``numpy`` arrays throughout
the library.  Matrices come in two device-style formats: canonical CSR
(strictly increasing column indices inside each row) and column-major
ELLPACK padded to the maximum row width.

Reductions run in two stages that mirror a workgroup device kernel: stage
one assigns elements to ``n_groups * group_size`` virtual lanes in a
grid-stride pattern, accumulates each lane serially and folds every
workgroup with a binary halving tree; stage two sums the per-group partial
results serially on the host.  The element-to-lane assignment and both
summation orders depend only on the input length and the context geometry,
so identical inputs give bit-identical results on every run.

Byte accounting: traced operations report the data they touch at 8 bytes
per element, counting matrix values, matrix indices (modeled as 64-bit),
vector reads and vector writes once each.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _spmvkernels
from .execmodel import DEFAULT_CONTEXT, ExecutionContext

__all__ = [
    "CsrMatrix",
    "EllMatrix",
    "WorkgroupPartials",
    "as_vector",
    "spmv_csr",
    "spmv_ell",
    "csr_to_ell",
    "ell_to_csr",
    "reduce_stage1",
    "reduce_stage2",
    "dot",
    "axpy",
    "axpy2",
    "xpay",
    "scale",
    "add_scaled",
]

FLOAT_BYTES = 8


def as_vector(x, n: int | None = None, name: str = "vector") -> np.ndarray:
    """Coerce ``x`` to a 1-D float64 array, checking its length if given."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ValueError(f"{name} has length {v.shape[0]}, expected {n}")
    return v


def _writable_vector(x, n: int, name: str) -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.dtype != np.float64 or x.ndim != 1:
        raise ValueError(f"{name} must be a 1-D float64 ndarray for in-place update")
    if x.shape[0] != n:
        raise ValueError(f"{name} has length {x.shape[0]}, expected {n}")
    return x


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Compressed sparse row matrix in canonical form.

    ``row_offsets`` has ``n_rows + 1`` non-decreasing entries starting at 0;
    column indices are strictly increasing inside each row.  Explicitly
    stored zeros are legal.
    """

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_offsets", np.asarray(self.row_offsets, dtype=np.int64))
        object.__setattr__(self, "col_indices", np.asarray(self.col_indices, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        offs, cols, vals = self.row_offsets, self.col_indices, self.values
        if self.n_rows < 0 or self.n_cols < 0:
            raise ValueError("matrix dimensions must be non-negative")
        if offs.ndim != 1 or offs.shape[0] != self.n_rows + 1:
            raise ValueError(f"row_offsets must have {self.n_rows + 1} entries")
        if offs[0] != 0:
            raise ValueError("row_offsets must start at 0")
        if np.any(np.diff(offs) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        nnz = int(offs[-1])
        if cols.shape != (nnz,) or vals.shape != (nnz,):
            raise ValueError("col_indices and values must match row_offsets[-1] entries")
        if nnz and (cols.min() < 0 or cols.max() >= self.n_cols):
            raise ValueError("column index out of range")
        if nnz > 1:
            increasing = np.diff(cols) > 0
            # Column order may only reset where a new row begins.
            row_starts = offs[1:-1]
            inside = row_starts[(row_starts > 0) & (row_starts < nnz)]
            increasing[inside - 1] = True
            if not increasing.all():
                raise ValueError("column indices must be strictly increasing within each row")

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @classmethod
    def from_coo(cls, n_rows, n_cols, rows, cols, values) -> "CsrMatrix":
        """Build canonical CSR from triplets; duplicate entries are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if not (rows.shape == cols.shape == values.shape) or rows.ndim != 1:
            raise ValueError("rows, cols and values must be 1-D and equally long")
        if rows.size:
            if rows.min() < 0 or rows.max() >= n_rows:
                raise ValueError("row index out of range")
            if cols.min() < 0 or cols.max() >= n_cols:
                raise ValueError("column index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if rows.size:
            first = np.ones(rows.size, dtype=bool)
            first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            starts = np.flatnonzero(first)
            rows, cols = rows[starts], cols[starts]
            values = np.add.reduceat(values, starts)
        counts = np.bincount(rows, minlength=n_rows)
        offsets = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return cls(n_rows, n_cols, offsets, cols, values)

    @classmethod
    def from_dense(cls, a) -> "CsrMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("dense input must be two-dimensional")
        rows, cols = np.nonzero(a)
        return cls.from_coo(a.shape[0], a.shape[1], rows, cols, a[rows, cols])

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols))
        for i in range(self.n_rows):
            lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
            out[i, self.col_indices[lo:hi]] = self.values[lo:hi]
        return out

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def equals(self, other: "CsrMatrix") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class EllMatrix:
    """ELLPACK matrix: every row padded to ``width`` slots, column-major.

    Slot ``k`` of row ``i`` lives at index ``i + k * n_rows``.  Padded slots
    store value 0 under the sentinel column index ``n_cols``.
    """

    n_rows: int
    n_cols: int
    width: int
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "col_indices", np.asarray(self.col_indices, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.n_rows < 0 or self.n_cols < 0 or self.width < 0:
            raise ValueError("matrix dimensions must be non-negative")
        total = self.n_rows * self.width
        if self.col_indices.shape != (total,) or self.values.shape != (total,):
            raise ValueError(f"col_indices and values must have {total} entries")
        if total:
            cols = self.col_indices
            if cols.min() < 0 or cols.max() > self.n_cols:
                raise ValueError("column index out of range")
            padded = cols == self.n_cols
            if np.any(self.values[padded] != 0.0):
                raise ValueError("padded slots must store value 0")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.col_indices != self.n_cols))


def csr_to_ell(a: CsrMatrix) -> EllMatrix:
    """Repack CSR as ELLPACK with width equal to the largest row count."""
    counts = a.row_nnz()
    width = int(counts.max()) if a.n_rows else 0
    cols = np.full(a.n_rows * width, a.n_cols, dtype=np.int64)
    vals = np.zeros(a.n_rows * width)
    for i in range(a.n_rows):
        lo, hi = a.row_offsets[i], a.row_offsets[i + 1]
        k = np.arange(hi - lo)
        cols[i + k * a.n_rows] = a.col_indices[lo:hi]
        vals[i + k * a.n_rows] = a.values[lo:hi]
    return EllMatrix(a.n_rows, a.n_cols, width, cols, vals)


def ell_to_csr(e: EllMatrix) -> CsrMatrix:
    """Drop ELLPACK padding and rebuild canonical CSR."""
    rows_cols = []
    offsets = np.zeros(e.n_rows + 1, dtype=np.int64)
    cols_out = []
    vals_out = []
    for i in range(e.n_rows):
        idx = i + np.arange(e.width) * e.n_rows
        keep = e.col_indices[idx] != e.n_cols
        cols_out.append(e.col_indices[idx][keep])
        vals_out.append(e.values[idx][keep])
        offsets[i + 1] = offsets[i] + int(keep.sum())
    cols = np.concatenate(cols_out) if cols_out else np.empty(0, dtype=np.int64)
    vals = np.concatenate(vals_out) if vals_out else np.empty(0)
    return CsrMatrix(e.n_rows, e.n_cols, offsets, cols, vals)


# ---------------------------------------------------------------------------
# Two-stage reductions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkgroupPartials:
    """Per-workgroup partial sums: one row per group, one column per quantity."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("partials must be two-dimensional (n_groups, n_quantities)")
        object.__setattr__(self, "data", d)

    @property
    def n_groups(self) -> int:
        return self.data.shape[0]

    @property
    def n_quantities(self) -> int:
        return self.data.shape[1]

    @property
    def nbytes(self) -> int:
        return self.data.size * FLOAT_BYTES

    @classmethod
    def stack(cls, parts: Sequence["WorkgroupPartials"]) -> "WorkgroupPartials":
        """Concatenate several partials blocks along the quantity axis."""
        if not parts:
            raise ValueError("need at least one partials block")
        groups = {p.n_groups for p in parts}
        if len(groups) > 1:
            raise ValueError("partials blocks disagree on n_groups")
        return cls(np.hstack([p.data for p in parts]))


def _stage1(contrib: np.ndarray, n_groups: int, group_size: int) -> np.ndarray:
    """Grid-stride lane accumulation plus per-group halving-tree fold.

    ``contrib`` is (n, n_quantities).  Lane ``t`` serially accumulates
    elements ``t, t + G, t + 2G, ...`` where ``G = n_groups * group_size``;
    each workgroup of ``group_size`` lanes is then folded pairwise with
    ``stride /= 2`` steps.  Both loops fix the floating-point order exactly.
    """
    n, n_q = contrib.shape
    G = n_groups * group_size
    lanes = np.zeros((G, n_q))
    for start in range(0, n, G):
        chunk = contrib[start : start + G]
        lanes[: chunk.shape[0]] += chunk
    buf = lanes.reshape(n_groups, group_size, n_q)
    stride = group_size // 2
    while stride > 0:
        buf[:, :stride] += buf[:, stride : 2 * stride]
        stride //= 2
    return buf[:, 0].copy()


def _stage2(data: np.ndarray) -> np.ndarray:
    """Serial left-to-right host sum over groups, one total per quantity."""
    n_groups, n_q = data.shape
    out = np.zeros(n_q)
    for q in range(n_q):
        total = 0.0
        for g in range(n_groups):
            total += data[g, q]
        out[q] = total
    return out


def reduce_stage1(values, ctx: ExecutionContext | None = None) -> WorkgroupPartials:
    """First reduction stage: per-element contributions to group partials.

    ``values`` is one contribution stream (1-D) or several stacked column
    streams (2-D).  Counts as one kernel launch under a traced context.
    """
    ctx = ctx or DEFAULT_CONTEXT
    contrib = np.asarray(values, dtype=np.float64)
    if contrib.ndim == 1:
        contrib = contrib[:, None]
    if contrib.ndim != 2:
        raise ValueError(f"contributions must be 1-D or 2-D, got shape {contrib.shape}")
    partials = WorkgroupPartials(_stage1(contrib, ctx.n_groups, ctx.group_size))
    ctx.record_launch(FLOAT_BYTES * contrib.size + partials.nbytes)
    return partials


def reduce_stage2(partials: WorkgroupPartials, ctx: ExecutionContext | None = None) -> np.ndarray:
    """Second stage: move partials to the host and sum them there.

    Counts as one host-device transfer of the partials buffer.  Returns one
    float64 total per quantity.
    """
    ctx = ctx or DEFAULT_CONTEXT
    ctx.record_transfer(partials.nbytes)
    return _stage2(partials.data)


def dot(x, y, ctx: ExecutionContext | None = None) -> float:
    """Two-stage inner product: one kernel launch plus one transfer.

    The launch covers forming the elementwise products and reducing them to
    per-group partials; the transfer moves the partials to the host where
    the serial second stage finishes the sum.
    """
    ctx = ctx or DEFAULT_CONTEXT
    x = as_vector(x, name="x")
    y = as_vector(y, n=x.shape[0], name="y")
    contrib = (x * y)[:, None]
    partials = _stage1(contrib, ctx.n_groups, ctx.group_size)
    ctx.record_launch(FLOAT_BYTES * (2 * x.shape[0]) + partials.size * FLOAT_BYTES)
    ctx.record_transfer(partials.size * FLOAT_BYTES)
    return float(_stage2(partials)[0])


# ---------------------------------------------------------------------------
# Sparse matrix-vector products
# ---------------------------------------------------------------------------


def spmv_csr(a: CsrMatrix, p, ctx: ExecutionContext | None = None) -> np.ndarray:
    """CSR matrix-vector product; one kernel launch under a traced context."""
    ctx = ctx or DEFAULT_CONTEXT
    p = as_vector(p, n=a.n_cols, name="p")
    out = np.empty(a.n_rows)
    _spmvkernels.csr_spmv(a.row_offsets, a.col_indices, a.values, p, out)
    ctx.record_launch(_csr_bytes(a))
    return out


def spmv_ell(e: EllMatrix, p, ctx: ExecutionContext | None = None) -> np.ndarray:
    """ELLPACK matrix-vector product; bit-identical to the CSR product."""
    ctx = ctx or DEFAULT_CONTEXT
    p = as_vector(p, n=e.n_cols, name="p")
    out = np.empty(e.n_rows)
    _spmvkernels.ell_spmv(e.col_indices, e.values, e.n_rows, e.width, e.n_cols, p, out)
    ctx.record_launch(FLOAT_BYTES * (2 * e.n_rows * e.width + e.n_cols + e.n_rows))
    return out


def _csr_bytes(a: CsrMatrix) -> int:
    # values + column indices + row offsets + input read + output write
    return FLOAT_BYTES * (2 * a.nnz + (a.n_rows + 1) + a.n_cols + a.n_rows)


# ---------------------------------------------------------------------------
# Kernel-sized vector updates (one launch each)
# ---------------------------------------------------------------------------


def axpy(y: np.ndarray, alpha: float, x, ctx: ExecutionContext | None = None) -> np.ndarray:
    """In place ``y += alpha * x``."""
    ctx = ctx or DEFAULT_CONTEXT
    n = y.shape[0] if isinstance(y, np.ndarray) else len(y)
    y = _writable_vector(y, n, "y")
    x = as_vector(x, n=n, name="x")
    y += alpha * x
    ctx.record_launch(FLOAT_BYTES * 3 * n)
    return y


def axpy2(
    y: np.ndarray, alpha: float, x, beta: float, z, ctx: ExecutionContext | None = None
) -> np.ndarray:
    """In place ``y += alpha * x + beta * z`` as a single kernel."""
    ctx = ctx or DEFAULT_CONTEXT
    n = y.shape[0] if isinstance(y, np.ndarray) else len(y)
    y = _writable_vector(y, n, "y")
    x = as_vector(x, n=n, name="x")
    z = as_vector(z, n=n, name="z")
    y += alpha * x + beta * z
    ctx.record_launch(FLOAT_BYTES * 4 * n)
    return y


def xpay(y: np.ndarray, x, beta: float, ctx: ExecutionContext | None = None) -> np.ndarray:
    """In place ``y <- x + beta * y``."""
    ctx = ctx or DEFAULT_CONTEXT
    n = y.shape[0] if isinstance(y, np.ndarray) else len(y)
    y = _writable_vector(y, n, "y")
    x = as_vector(x, n=n, name="x")
    y *= beta
    y += x
    ctx.record_launch(FLOAT_BYTES * 3 * n)
    return y


def scale(y: np.ndarray, alpha: float, ctx: ExecutionContext | None = None) -> np.ndarray:
    """In place ``y *= alpha``."""
    ctx = ctx or DEFAULT_CONTEXT
    n = y.shape[0] if isinstance(y, np.ndarray) else len(y)
    y = _writable_vector(y, n, "y")
    y *= alpha
    ctx.record_launch(FLOAT_BYTES * 2 * n)
    return y


def add_scaled(x, alpha: float, y, ctx: ExecutionContext | None = None) -> np.ndarray:
    """Fresh vector ``x + alpha * y``."""
    ctx = ctx or DEFAULT_CONTEXT
    x = as_vector(x, name="x")
    y = as_vector(y, n=x.shape[0], name="y")
    out = x + alpha * y
    ctx.record_launch(FLOAT_BYTES * 3 * x.shape[0])
    return out
