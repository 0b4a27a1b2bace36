"""Matrix Market I/O, benchmark system generators and stats CSV files."""

from __future__ import annotations

import csv
import io as _io
import warnings

import numpy as np

from .errors import MatrixMarketError
from .linalg import CsrMatrix

__all__ = [
    "read_matrix_market",
    "write_matrix_market",
    "gen_poisson2d",
    "gen_poisson3d_block",
    "gen_random_rowwise",
    "gen_system",
    "write_stats_csv",
    "read_stats_csv",
    "STATS_FIELDS",
    "STATS_VERSION",
]


# ---------------------------------------------------------------------------
# Matrix Market (coordinate format)
# ---------------------------------------------------------------------------

_FIELDS = ("real", "integer", "pattern")
_SYMMETRIES = ("general", "symmetric")


def read_matrix_market(path) -> CsrMatrix:
    """Read a coordinate-format Matrix Market file into canonical CSR.

    Supports ``real``, ``integer`` and ``pattern`` fields with ``general``
    or ``symmetric`` symmetry.  Symmetric storage is expanded (off-diagonal
    entries mirrored, the diagonal kept single) and duplicate entries are
    summed.  Malformed input raises :class:`MatrixMarketError` carrying the
    1-based line number of the offending line.
    """
    with open(path, "r", encoding="ascii", errors="replace") as f:
        return _read_mm(f)


def _read_mm(f) -> CsrMatrix:
    header = f.readline()
    if not header:
        raise MatrixMarketError("empty file", 1)
    tokens = header.strip().split()
    if len(tokens) != 5 or tokens[0] != "%%MatrixMarket":
        raise MatrixMarketError(
            "header must read '%%MatrixMarket matrix coordinate <field> <symmetry>'", 1
        )
    obj, fmt, field, symmetry = (t.lower() for t in tokens[1:])
    if obj != "matrix":
        raise MatrixMarketError(f"unsupported object {obj!r}", 1)
    if fmt != "coordinate":
        raise MatrixMarketError(f"unsupported format {fmt!r} (only coordinate)", 1)
    if field not in _FIELDS:
        raise MatrixMarketError(f"unsupported field {field!r}", 1)
    if symmetry not in _SYMMETRIES:
        raise MatrixMarketError(f"unsupported symmetry {symmetry!r}", 1)

    lineno = 1
    while True:
        line = f.readline()
        if not line:
            raise MatrixMarketError("missing size line", lineno + 1)
        lineno += 1
        stripped = line.strip()
        if stripped and not stripped.startswith("%"):
            break
    parts = stripped.split()
    if len(parts) != 3:
        raise MatrixMarketError("size line must read 'rows cols nnz'", lineno)
    try:
        n_rows, n_cols, nnz = (int(p) for p in parts)
    except ValueError:
        raise MatrixMarketError("size line must hold three integers", lineno) from None
    if n_rows < 0 or n_cols < 0 or nnz < 0:
        raise MatrixMarketError("size line entries must be non-negative", lineno)
    if symmetry == "symmetric" and n_rows != n_cols:
        raise MatrixMarketError("symmetric matrices must be square", lineno)

    rest = f.read()
    data_start = lineno + 1
    want_cols = 2 if field == "pattern" else 3
    if nnz == 0:
        data = np.empty((0, want_cols))
    else:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                data = np.loadtxt(_io.StringIO(rest), comments="%", ndmin=2)
        except ValueError:
            raise MatrixMarketError(
                "malformed entry", _locate_bad_entry(rest, data_start, want_cols)
            ) from None
    if data.size and data.shape[1] != want_cols:
        raise MatrixMarketError(
            f"entries must have {want_cols} columns for field {field!r}",
            _locate_bad_entry(rest, data_start, want_cols),
        )
    if data.shape[0] != nnz:
        raise MatrixMarketError(f"expected {nnz} entries, found {data.shape[0]}")

    rows_f, cols_f = data[:, 0], data[:, 1]
    rows = rows_f.astype(np.int64)
    cols = cols_f.astype(np.int64)
    bad = (rows != rows_f) | (cols != cols_f)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise MatrixMarketError("indices must be integers", _data_line(rest, data_start, k))
    out_of_range = (rows < 1) | (rows > n_rows) | (cols < 1) | (cols > n_cols)
    if np.any(out_of_range):
        k = int(np.flatnonzero(out_of_range)[0])
        raise MatrixMarketError(
            f"index out of range for a {n_rows} x {n_cols} matrix",
            _data_line(rest, data_start, k),
        )
    rows -= 1
    cols -= 1
    values = np.ones(nnz) if field == "pattern" else data[:, 2].copy()

    if symmetry == "symmetric":
        above = rows < cols
        if np.any(above):
            k = int(np.flatnonzero(above)[0])
            raise MatrixMarketError(
                "symmetric entries must lie on or below the diagonal",
                _data_line(rest, data_start, k),
            )
        off = rows != cols
        mirror_rows, mirror_cols = cols[off], rows[off]
        rows = np.concatenate([rows, mirror_rows])
        cols = np.concatenate([cols, mirror_cols])
        values = np.concatenate([values, values[off]])
    return CsrMatrix.from_coo(n_rows, n_cols, rows, cols, values)


def _iter_data_lines(rest: str, start: int):
    for offset, raw in enumerate(rest.splitlines()):
        stripped = raw.strip()
        if not stripped or stripped.startswith("%"):
            continue
        yield start + offset, stripped


def _locate_bad_entry(rest: str, start: int, want_cols: int) -> int:
    for lineno, stripped in _iter_data_lines(rest, start):
        parts = stripped.split()
        if len(parts) != want_cols:
            return lineno
        try:
            int(parts[0])
            int(parts[1])
            if want_cols == 3:
                float(parts[2])
        except ValueError:
            return lineno
    return start


def _data_line(rest: str, start: int, k: int) -> int:
    for seen, (lineno, _) in enumerate(_iter_data_lines(rest, start)):
        if seen == k:
            return lineno
    return start


def write_matrix_market(path, a: CsrMatrix, comment: str | None = None) -> None:
    """Write canonical CSR as a general real coordinate Matrix Market file.

    Values are printed with 17 significant digits, so a write/read cycle
    reproduces the matrix bit for bit.
    """
    if not isinstance(a, CsrMatrix):
        raise TypeError("write_matrix_market expects a CsrMatrix")
    row_ids = np.repeat(np.arange(a.n_rows, dtype=np.int64), a.row_nnz()) + 1
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("%%MatrixMarket matrix coordinate real general\n")
        if comment:
            for line in comment.splitlines():
                f.write(f"% {line}\n")
        f.write(f"{a.n_rows} {a.n_cols} {a.nnz}\n")
        f.writelines(
            f"{r} {c + 1} {v:.17g}\n"
            for r, c, v in zip(row_ids, a.col_indices, a.values)
        )


# ---------------------------------------------------------------------------
# Benchmark system generators
# ---------------------------------------------------------------------------


def gen_poisson2d(k: int) -> tuple[CsrMatrix, np.ndarray]:
    """Five-point Laplacian on a square grid with all-ones right-hand side.

    Level ``k`` uses a ``(2**(k+3) - 1)`` by ``(2**(k+3) - 1)`` grid, so the
    system size grows roughly 4x per level.  The matrix is SPD.
    """
    if k < 1:
        raise ValueError("level k must be at least 1")
    side = 2 ** (k + 3) - 1
    n = side * side
    idx = np.arange(n, dtype=np.int64)
    ix = idx % side
    iy = idx // side
    rows = [idx]
    cols = [idx]
    vals = [np.full(n, 4.0)]
    for mask, shift in (
        (ix > 0, -1),
        (ix < side - 1, 1),
        (iy > 0, -side),
        (iy < side - 1, side),
    ):
        rows.append(idx[mask])
        cols.append(idx[mask] + shift)
        vals.append(np.full(int(mask.sum()), -1.0))
    a = CsrMatrix.from_coo(
        n, n, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    )
    return a, np.ones(n)


def gen_poisson3d_block(n: int, block: int) -> tuple[CsrMatrix, np.ndarray]:
    """Seven-point Laplacian on an ``n**3`` grid with dense coupled blocks.

    Each grid entry of the Laplacian is replaced by that entry times the
    SPD block ``I + ones(block, block) / block``, giving roughly
    ``7 * block`` stored values per row, a stand-in for vector-valued
    problems with clustered unknowns.  The right-hand side is all ones.
    """
    if n < 1:
        raise ValueError("grid dimension n must be at least 1")
    if block < 1:
        raise ValueError("block size must be at least 1")
    m = n * n * n
    idx = np.arange(m, dtype=np.int64)
    ix = idx % n
    iy = (idx // n) % n
    iz = idx // (n * n)
    lrows = [idx]
    lcols = [idx]
    lvals = [np.full(m, 6.0)]
    for mask, shift in (
        (ix > 0, -1),
        (ix < n - 1, 1),
        (iy > 0, -n),
        (iy < n - 1, n),
        (iz > 0, -n * n),
        (iz < n - 1, n * n),
    ):
        lrows.append(idx[mask])
        lcols.append(idx[mask] + shift)
        lvals.append(np.full(int(mask.sum()), -1.0))
    lr = np.concatenate(lrows)
    lc = np.concatenate(lcols)
    lv = np.concatenate(lvals)

    bmat = np.eye(block) + np.ones((block, block)) / block
    bsq = block * block
    s_outer = np.repeat(np.arange(block, dtype=np.int64), block)
    t_inner = np.tile(np.arange(block, dtype=np.int64), block)
    rows = np.repeat(lr * block, bsq) + np.tile(s_outer, lr.size)
    cols = np.repeat(lc * block, bsq) + np.tile(t_inner, lc.size)
    vals = np.repeat(lv, bsq) * np.tile(bmat.ravel(), lv.size)
    a = CsrMatrix.from_coo(m * block, m * block, rows, cols, vals)
    return a, np.ones(m * block)


def gen_random_rowwise(n: int, nnz_per_row: int, seed: int = 0) -> tuple[CsrMatrix, np.ndarray]:
    """Random strictly diagonally dominant matrix with fixed row counts.

    Every row holds ``nnz_per_row`` distinct uniformly drawn columns, always
    including the diagonal.  The diagonal value is ``nnz_per_row`` and each
    off-diagonal value is drawn from ``(-1, 0)``, so row sums keep the
    matrix nonsingular.  The same seed reproduces the same system; the
    right-hand side is all ones.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 1 <= nnz_per_row <= n:
        raise ValueError("nnz_per_row must lie in [1, n]")
    rng = np.random.default_rng(seed)
    cols = np.empty(n * nnz_per_row, dtype=np.int64)
    vals = np.empty(n * nnz_per_row)
    dense_sampling = nnz_per_row > n // 2
    for i in range(n):
        if dense_sampling:
            c = np.sort(rng.permutation(n)[:nnz_per_row].astype(np.int64))
            if i not in c:
                c[0] = i
                c.sort()
        else:
            while True:
                c = np.unique(rng.integers(0, n, size=nnz_per_row))
                if c.size == nnz_per_row:
                    break
            if i not in c:
                c[0] = i
                c.sort()
        base = i * nnz_per_row
        cols[base : base + nnz_per_row] = c
        v = -(1.0 - rng.random(nnz_per_row))
        v[c == i] = float(nnz_per_row)
        vals[base : base + nnz_per_row] = v
    rows = np.repeat(np.arange(n, dtype=np.int64), nnz_per_row)
    a = CsrMatrix.from_coo(n, n, rows, cols, vals)
    return a, np.ones(n)


def gen_system(spec: str) -> tuple[CsrMatrix, np.ndarray, str]:
    """Build a generated system from a ``family:args`` string.

    Recognized forms: ``poisson2d:<k>``, ``poisson3d:<n>,<block>`` and
    ``random:<n>,<nnz_per_row>[,<seed>]``.  Returns the matrix, the
    right-hand side and a normalized label.
    """
    family, _, argstr = spec.partition(":")
    parts = [p.strip() for p in argstr.split(",") if p.strip()] if argstr else []
    try:
        if family == "poisson2d":
            (k,) = (int(p) for p in parts)
            a, b = gen_poisson2d(k)
            return a, b, f"poisson2d:{k}"
        if family == "poisson3d":
            n, block = (int(p) for p in parts)
            a, b = gen_poisson3d_block(n, block)
            return a, b, f"poisson3d:{n},{block}"
        if family == "random":
            if len(parts) == 2:
                n, nnz_per_row, seed = int(parts[0]), int(parts[1]), 0
            else:
                n, nnz_per_row, seed = (int(p) for p in parts)
            a, b = gen_random_rowwise(n, nnz_per_row, seed)
            return a, b, f"random:{n},{nnz_per_row},{seed}"
    except ValueError as exc:
        raise ValueError(f"bad generator spec {spec!r}: {exc}") from None
    raise ValueError(f"unknown generator family {family!r}")


# ---------------------------------------------------------------------------
# Stats CSV
# ---------------------------------------------------------------------------

STATS_VERSION = 1
STATS_FIELDS = [
    "version",
    "solver",
    "matrix",
    "n",
    "nnz",
    "ms_per_iter_median",
    "launches_per_iter",
    "transfers_per_iter",
    "predicted_us_per_iter",
    "final_residual",
]

_STATS_TYPES = {
    "version": int,
    "solver": str,
    "matrix": str,
    "n": int,
    "nnz": int,
    "ms_per_iter_median": float,
    "launches_per_iter": int,
    "transfers_per_iter": int,
    "predicted_us_per_iter": float,
    "final_residual": float,
}


def write_stats_csv(path, rows) -> None:
    """Write benchmark rows with the versioned column schema."""
    with open(path, "w", encoding="ascii", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=STATS_FIELDS)
        writer.writeheader()
        for row in rows:
            rec = dict(row)
            rec.setdefault("version", STATS_VERSION)
            missing = [k for k in STATS_FIELDS if k not in rec]
            if missing:
                raise ValueError(f"stats row is missing columns: {missing}")
            writer.writerow({k: rec[k] for k in STATS_FIELDS})


def read_stats_csv(path) -> list[dict]:
    """Read back a stats CSV, checking the schema and restoring types."""
    with open(path, "r", encoding="ascii", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != STATS_FIELDS:
            raise ValueError(
                f"unexpected stats columns {reader.fieldnames}, expected {STATS_FIELDS}"
            )
        out = []
        for rec in reader:
            out.append({k: _STATS_TYPES[k](rec[k]) for k in STATS_FIELDS})
        return out
