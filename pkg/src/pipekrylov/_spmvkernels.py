"""Compiled sparse matrix-vector inner loops.

Each row is accumulated left to right over its stored entries in a scalar
register, exactly like a one-thread-per-row device kernel.  That fixed
order is what makes CSR and ELLPACK products bit-identical and reruns
reproducible, so these loops must not be vectorized or reassociated.
"""

from numba import njit


@njit(cache=True)
def csr_spmv(row_offsets, col_indices, values, p, out):
    for i in range(out.shape[0]):
        acc = 0.0
        for k in range(row_offsets[i], row_offsets[i + 1]):
            acc += values[k] * p[col_indices[k]]
        out[i] = acc


@njit(cache=True)
def ell_spmv(col_indices, values, n_rows, width, n_cols, p, out):
    # Column-major layout: slot k of row i lives at i + k * n_rows.
    # Padded slots carry the sentinel column index n_cols and are skipped
    # rather than multiplied by zero, which keeps the accumulation sequence
    # identical to the CSR loop.
    for i in range(n_rows):
        acc = 0.0
        for k in range(width):
            idx = i + k * n_rows
            c = col_indices[idx]
            if c < n_cols:
                acc += values[idx] * p[c]
        out[i] = acc
