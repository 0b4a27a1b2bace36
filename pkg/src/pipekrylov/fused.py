"""Fused kernels: each call models exactly one device kernel launch.

A fused kernel chains a matrix-vector product or vector update with the
first reduction stage of whatever inner products its consumer needs, so the
operand vectors are read once and no extra launch is paid for the dots.
Scalars that a kernel needs from earlier partial results (for example the
BiCGStab step size) are finalized redundantly inside every workgroup with
the same serial group order as the host-side second stage, which makes the
in-kernel value bit-identical to what the host would compute.

All updates happen in place on the caller's arrays, mirroring buffers that
stay resident on the device.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _spmvkernels
from .errors import BreakdownError, LuckyBreakdown
from .execmodel import DEFAULT_CONTEXT, ExecutionContext
from .linalg import (
    FLOAT_BYTES,
    CsrMatrix,
    WorkgroupPartials,
    _csr_bytes,
    _stage1,
    _stage2,
    as_vector,
    _writable_vector,
)

__all__ = [
    "FusedReductionRequest",
    "DEFAULT_BREAKDOWN_TOLERANCE",
    "spmv_fused",
    "fused_cg_vector_update",
    "fused_bicgstab_s_update",
    "fused_bicgstab_xrp_update",
    "fused_gs_stage1",
    "fused_gs_update",
    "fused_gs_normalize",
]

DEFAULT_BREAKDOWN_TOLERANCE = 1e-30

WITH_INPUT = "input"
WITH_RESULT = "result"


@dataclass(frozen=True, eq=False)
class FusedReductionRequest:
    """Inner products to accumulate alongside a fused matrix-vector product.

    Each quantity is ``"input"`` (product result against the input vector),
    ``"result"`` (product result against itself) or a fixed vector to dot
    the result with.  A single kernel handles at most four quantities.
    """

    quantities: tuple

    MAX_QUANTITIES = 4

    def __init__(self, quantities: Sequence):
        quantities = tuple(quantities)
        if not 1 <= len(quantities) <= self.MAX_QUANTITIES:
            raise ValueError(
                f"request must carry 1 to {self.MAX_QUANTITIES} quantities, got {len(quantities)}"
            )
        for q in quantities:
            if isinstance(q, str):
                if q not in (WITH_INPUT, WITH_RESULT):
                    raise ValueError(f"unknown quantity kind {q!r}")
            else:
                q = as_vector(q, name="fixed dot vector")
        object.__setattr__(self, "quantities", quantities)

    def __len__(self) -> int:
        return len(self.quantities)


def spmv_fused(
    a: CsrMatrix,
    p,
    request: FusedReductionRequest,
    ctx: ExecutionContext | None = None,
) -> tuple[np.ndarray, WorkgroupPartials]:
    """Matrix-vector product fused with stage-one reductions: one launch.

    Returns the product ``q = A p`` and one partials column per requested
    quantity.  Contributions enter each lane accumulator in the order the
    product entries are produced, so the partials match a standalone
    :func:`pipekrylov.linalg.reduce_stage1` on the same products exactly.
    """
    ctx = ctx or DEFAULT_CONTEXT
    p = as_vector(p, n=a.n_cols, name="p")
    q = np.empty(a.n_rows)
    _spmvkernels.csr_spmv(a.row_offsets, a.col_indices, a.values, p, q)
    columns = []
    extra_reads = 0
    for kind in request.quantities:
        if isinstance(kind, str):
            if kind == WITH_INPUT:
                if a.n_rows != a.n_cols:
                    raise ValueError("result-with-input dot needs a square matrix")
                columns.append(q * p)
            else:
                columns.append(q * q)
        else:
            w = as_vector(kind, n=a.n_rows, name="fixed dot vector")
            columns.append(q * w)
            extra_reads += a.n_rows
    contrib = np.stack(columns, axis=1)
    partials = WorkgroupPartials(_stage1(contrib, ctx.n_groups, ctx.group_size))
    ctx.record_launch(_csr_bytes(a) + FLOAT_BYTES * extra_reads + partials.nbytes)
    return q, partials


def fused_cg_vector_update(
    x: np.ndarray,
    r: np.ndarray,
    p: np.ndarray,
    Ap,
    alpha: float,
    beta: float,
    ctx: ExecutionContext | None = None,
) -> WorkgroupPartials:
    """One-launch CG triple update emitting residual-norm partials.

    In place: ``x += alpha * p``, ``r -= alpha * Ap`` and
    ``p = r_new + beta * p_old``, where the old search direction is read
    before it is overwritten.  Returns stage-one partials of the updated
    residual's self inner product.
    """
    ctx = ctx or DEFAULT_CONTEXT
    n = x.shape[0] if isinstance(x, np.ndarray) else len(x)
    x = _writable_vector(x, n, "x")
    r = _writable_vector(r, n, "r")
    p = _writable_vector(p, n, "p")
    Ap = as_vector(Ap, n=n, name="Ap")
    x += alpha * p
    r -= alpha * Ap
    p *= beta
    p += r
    partials = WorkgroupPartials(_stage1((r * r)[:, None], ctx.n_groups, ctx.group_size))
    ctx.record_launch(FLOAT_BYTES * 7 * n + partials.nbytes)
    return partials


def fused_bicgstab_s_update(
    r,
    Ap,
    rr0_partials: WorkgroupPartials,
    Apr0_partials: WorkgroupPartials,
    ctx: ExecutionContext | None = None,
    breakdown_tolerance: float = DEFAULT_BREAKDOWN_TOLERANCE,
) -> tuple[np.ndarray, WorkgroupPartials, float]:
    """One-launch BiCGStab first half-step: ``s = r - alpha * Ap``.

    The step size ``alpha`` is finalized from the supplied partials inside
    the kernel (redundantly per workgroup, in host summation order), so no
    transfer is needed before the update.  Returns ``s``, stage-one
    partials of its self inner product, and the ``alpha`` used.
    """
    ctx = ctx or DEFAULT_CONTEXT
    r = as_vector(r, name="r")
    Ap = as_vector(Ap, n=r.shape[0], name="Ap")
    rho = _stage2(rr0_partials.data)[0]
    denom = _stage2(Apr0_partials.data)[0]
    if abs(denom) < breakdown_tolerance:
        raise BreakdownError("Apr0star", "direction lost bi-orthogonality: <Ap, r0*> ~ 0")
    alpha = rho / denom
    s = r - alpha * Ap
    partials = WorkgroupPartials(_stage1((s * s)[:, None], ctx.n_groups, ctx.group_size))
    ctx.record_launch(
        FLOAT_BYTES * 3 * r.shape[0] + rr0_partials.nbytes + Apr0_partials.nbytes + partials.nbytes
    )
    return s, partials, float(alpha)


def fused_bicgstab_xrp_update(
    x: np.ndarray,
    r: np.ndarray,
    p: np.ndarray,
    s,
    Ap,
    As,
    alpha: float,
    omega: float,
    beta: float,
    r0star,
    ctx: ExecutionContext | None = None,
) -> WorkgroupPartials:
    """One-launch BiCGStab tail update emitting ``<r_new, r0*>`` partials.

    In place: ``x += alpha * p_old + omega * s``, ``r = s - omega * As`` and
    ``p = r_new + beta * (p_old - omega * Ap)``.
    """
    ctx = ctx or DEFAULT_CONTEXT
    n = x.shape[0] if isinstance(x, np.ndarray) else len(x)
    x = _writable_vector(x, n, "x")
    r = _writable_vector(r, n, "r")
    p = _writable_vector(p, n, "p")
    s = as_vector(s, n=n, name="s")
    Ap = as_vector(Ap, n=n, name="Ap")
    As = as_vector(As, n=n, name="As")
    r0star = as_vector(r0star, n=n, name="r0star")
    x += alpha * p + omega * s
    r[:] = s - omega * As
    p -= omega * Ap
    p *= beta
    p += r
    partials = WorkgroupPartials(_stage1((r * r0star)[:, None], ctx.n_groups, ctx.group_size))
    ctx.record_launch(FLOAT_BYTES * 9 * n + partials.nbytes)
    return partials


def fused_gs_stage1(
    basis: Sequence[np.ndarray],
    v,
    ctx: ExecutionContext | None = None,
) -> WorkgroupPartials:
    """Stage-one partials of ``<basis[j], v>`` for every j: one launch.

    The launch count does not depend on how many basis vectors are handled;
    an empty basis still costs one (degenerate) launch and yields a
    zero-quantity partials block.
    """
    ctx = ctx or DEFAULT_CONTEXT
    v = as_vector(v, name="v")
    n = v.shape[0]
    vs = [as_vector(b, n=n, name="basis vector") for b in basis]
    if vs:
        contrib = np.stack([b * v for b in vs], axis=1)
    else:
        contrib = np.empty((n, 0))
    partials = WorkgroupPartials(_stage1(contrib, ctx.n_groups, ctx.group_size))
    ctx.record_launch(FLOAT_BYTES * (len(vs) + 1) * n + partials.nbytes)
    return partials


def fused_gs_update(
    v: np.ndarray,
    basis: Sequence[np.ndarray],
    partials: WorkgroupPartials,
    ctx: ExecutionContext | None = None,
) -> tuple[np.ndarray, WorkgroupPartials]:
    """One-launch classical Gram-Schmidt update with fused norm partials.

    Finalizes the projection coefficients from ``partials`` in the kernel,
    subtracts the single combined correction ``sum_j coeff_j * basis[j]``
    from ``v`` in place, and emits stage-one partials of the updated
    vector's squared norm.  Returns the coefficients and those partials.
    """
    ctx = ctx or DEFAULT_CONTEXT
    n = v.shape[0] if isinstance(v, np.ndarray) else len(v)
    v = _writable_vector(v, n, "v")
    vs = [as_vector(b, n=n, name="basis vector") for b in basis]
    if len(vs) != partials.n_quantities:
        raise ValueError(
            f"{len(vs)} basis vectors but partials carry {partials.n_quantities} quantities"
        )
    coeffs = _stage2(partials.data)
    if vs:
        w = np.zeros(n)
        for coeff, b in zip(coeffs, vs):
            w += coeff * b
        v -= w
    norm_partials = WorkgroupPartials(_stage1((v * v)[:, None], ctx.n_groups, ctx.group_size))
    ctx.record_launch(
        FLOAT_BYTES * (len(vs) + 2) * n + partials.nbytes + norm_partials.nbytes
    )
    return coeffs, norm_partials


def fused_gs_normalize(
    v: np.ndarray,
    norm_partials: WorkgroupPartials,
    r,
    ctx: ExecutionContext | None = None,
    breakdown_tolerance: float = DEFAULT_BREAKDOWN_TOLERANCE,
) -> tuple[float, WorkgroupPartials]:
    """One-launch normalization fused with the residual projection.

    Finalizes ``||v||`` from its squared-norm partials in the kernel,
    scales ``v`` to unit length in place and emits stage-one partials of
    ``<r, v>``.  Raises :class:`LuckyBreakdown` when the norm (a divisor)
    falls below the breakdown tolerance.
    """
    ctx = ctx or DEFAULT_CONTEXT
    v = _writable_vector(v, v.shape[0] if isinstance(v, np.ndarray) else len(v), "v")
    r = as_vector(r, n=v.shape[0], name="r")
    norm = math.sqrt(_stage2(norm_partials.data)[0])
    if norm < breakdown_tolerance:
        raise LuckyBreakdown(norm)
    v *= 1.0 / norm
    partials = WorkgroupPartials(_stage1((r * v)[:, None], ctx.n_groups, ctx.group_size))
    ctx.record_launch(
        FLOAT_BYTES * 3 * v.shape[0] + norm_partials.nbytes + partials.nbytes
    )
    return float(norm), partials
