"""Krylov solvers in classical (BLAS-style) and pipelined formulations.

Every method comes in two semantically equivalent variants.  The classical
drivers issue one kernel per BLAS-level operation and one host transfer per
inner product, which is how a straightforward device port looks.  The
pipelined drivers reorganize the same recurrences around fused kernels so
that each iteration costs a small fixed number of launches and at most one
transfer:

==================  =========================  ==========================
solver              launches per iteration     transfers per iteration
==================  =========================  ==========================
cg_classical        6 or more                  2
cg_pipelined        exactly 2                  exactly 1
bicgstab_classical  10 or more                 6
bicgstab_pipelined  exactly 4                  exactly 1
gmres_classical     7 or more (grows with i)   grows with i
gmres_pipelined     2 first step, 4 after      0 during orthogonalization
==================  =========================  ==========================

Counts hold from the second iteration of a run (or restart cycle) onward;
a converging final iteration may stop early and record fewer operations.
Convergence is declared when the monitored residual falls to
``tolerance * ||b||`` (absolute when ``||b|| = 0``).  All solvers monitor a
recurrence-provided residual and recompute the true residual ``||b - A x||``
once at exit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BreakdownError, LuckyBreakdown
from .execmodel import (
    DEFAULT_CONTEXT,
    FINISH,
    ITERATION,
    SETUP,
    ExecutionContext,
    ExecutionTrace,
)
from .fused import (
    DEFAULT_BREAKDOWN_TOLERANCE,
    FusedReductionRequest,
    fused_bicgstab_s_update,
    fused_bicgstab_xrp_update,
    fused_cg_vector_update,
    fused_gs_normalize,
    fused_gs_stage1,
    fused_gs_update,
    spmv_fused,
)
from .linalg import (
    FLOAT_BYTES,
    CsrMatrix,
    WorkgroupPartials,
    _stage2,
    add_scaled,
    as_vector,
    axpy,
    axpy2,
    dot,
    reduce_stage1,
    reduce_stage2,
    scale,
    spmv_csr,
    xpay,
)

__all__ = [
    "SolverConfig",
    "SolverResult",
    "UpperTriangular",
    "solve_upper_triangular",
    "orthogonalize_mgs",
    "cg_classical",
    "cg_pipelined",
    "bicgstab_classical",
    "bicgstab_pipelined",
    "gmres_classical",
    "gmres_pipelined",
    "CONVERGED",
    "MAX_ITER",
    "BREAKDOWN",
    "LUCKY_BREAKDOWN",
    "CLASSICAL_GS",
    "MODIFIED_GS",
]

CONVERGED = "converged"
MAX_ITER = "max_iter"
BREAKDOWN = "breakdown"
LUCKY_BREAKDOWN = "lucky_breakdown"

CLASSICAL_GS = "classical_gs"
MODIFIED_GS = "modified_gs"


@dataclass(frozen=True)
class SolverConfig:
    """Knobs shared by all solver drivers.

    ``fixed_iterations`` switches a run into benchmarking mode: exactly that
    many iterations are executed and convergence no longer stops the loop
    (numerical breakdown still does).
    """

    tolerance: float = 1e-8
    max_iterations: int = 500
    restart: int = 30
    orthogonalization: str = CLASSICAL_GS
    breakdown_tolerance: float = DEFAULT_BREAKDOWN_TOLERANCE
    fixed_iterations: int | None = None

    def __post_init__(self):
        if not (self.tolerance > 0):
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.restart < 1:
            raise ValueError("restart must be at least 1")
        if self.orthogonalization not in (CLASSICAL_GS, MODIFIED_GS):
            raise ValueError(f"unknown orthogonalization {self.orthogonalization!r}")
        if not (self.breakdown_tolerance > 0):
            raise ValueError("breakdown_tolerance must be positive")
        if self.fixed_iterations is not None and self.fixed_iterations < 1:
            raise ValueError("fixed_iterations must be at least 1 when set")

    @property
    def fixed(self) -> bool:
        return self.fixed_iterations is not None

    def iteration_limit(self) -> int:
        return self.fixed_iterations if self.fixed else self.max_iterations

    def loop_breakdown_tolerance(self) -> float:
        # Benchmark runs iterate past convergence where recurrence scalars
        # legitimately shrink below any absolute threshold; only nonfinite
        # values abort there.
        return 0.0 if self.fixed else self.breakdown_tolerance


@dataclass
class SolverResult:
    """Outcome of one solver run.

    ``residual_history`` holds the monitored relative residual, one entry
    per completed iteration.  ``true_final_residual`` is the recomputed
    absolute ``||b - A x||`` at exit.  ``termination`` is one of
    ``converged``, ``max_iter``, ``breakdown`` or ``lucky_breakdown``; for
    breakdowns ``breakdown_kind`` names the vanished quantity.
    """

    x: np.ndarray
    residual_history: list[float]
    true_final_residual: float
    iterations: int
    termination: str
    trace: ExecutionTrace
    breakdown_kind: str | None = None
    loop_seconds: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.termination == CONVERGED


class UpperTriangular:
    """Dense upper-triangular matrix filled column by column."""

    def __init__(self, order: int):
        if order < 0:
            raise ValueError("order must be non-negative")
        self.order = order
        self.data = np.zeros((order, order))

    def set(self, row: int, col: int, value: float) -> None:
        if not (0 <= row <= col < self.order):
            raise ValueError(f"entry ({row}, {col}) is not in the upper triangle")
        self.data[row, col] = value

    def get(self, row: int, col: int) -> float:
        if not (0 <= row <= col < self.order):
            raise ValueError(f"entry ({row}, {col}) is not in the upper triangle")
        return float(self.data[row, col])

    def leading(self, k: int) -> "UpperTriangular":
        """The leading ``k`` by ``k`` block as a new matrix."""
        if not (0 <= k <= self.order):
            raise ValueError(f"leading block size {k} out of range")
        block = UpperTriangular(k)
        block.data[:] = self.data[:k, :k]
        return block

    def entry_count(self) -> int:
        return self.order * (self.order + 1) // 2


def solve_upper_triangular(
    r: UpperTriangular,
    rhs,
    breakdown_tolerance: float = DEFAULT_BREAKDOWN_TOLERANCE,
) -> np.ndarray:
    """Back substitution on the host; raises on a vanishing diagonal."""
    rhs = as_vector(rhs, n=r.order, name="rhs")
    eta = np.zeros(r.order)
    for i in range(r.order - 1, -1, -1):
        diag = r.data[i, i]
        if abs(diag) < breakdown_tolerance:
            raise BreakdownError("singular_R", f"zero diagonal at position {i}")
        eta[i] = (rhs[i] - float(np.dot(r.data[i, i + 1 :], eta[i + 1 :]))) / diag
    return eta


def orthogonalize_mgs(
    basis: Sequence[np.ndarray],
    v: np.ndarray,
    ctx: ExecutionContext | None = None,
) -> np.ndarray:
    """Modified Gram-Schmidt sweep: project out each basis vector in turn.

    Updates ``v`` in place and returns the projection coefficients.  Each
    basis vector costs one inner product and one vector update, so the
    launch count grows with the basis size.
    """
    ctx = ctx or DEFAULT_CONTEXT
    coeffs = np.zeros(len(basis))
    for j, q in enumerate(basis):
        coeffs[j] = dot(q, v, ctx)
        axpy(v, -coeffs[j], q, ctx)
    return coeffs


def _orthogonalize_cgs(
    basis: Sequence[np.ndarray],
    v: np.ndarray,
    ctx: ExecutionContext,
) -> np.ndarray:
    """Classical Gram-Schmidt: all projections against the unmodified v."""
    coeffs = np.zeros(len(basis))
    for j, q in enumerate(basis):
        coeffs[j] = dot(q, v, ctx)
    for j, q in enumerate(basis):
        axpy(v, -coeffs[j], q, ctx)
    return coeffs


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _prepare(a: CsrMatrix, b, x0) -> tuple[np.ndarray, np.ndarray]:
    if not isinstance(a, CsrMatrix):
        raise ValueError("A must be a CsrMatrix")
    if a.n_rows != a.n_cols:
        raise ValueError(f"matrix must be square, got {a.n_rows} x {a.n_cols}")
    b = as_vector(b, n=a.n_rows, name="b").copy()
    if x0 is None:
        x = np.zeros(a.n_rows)
    else:
        x = as_vector(x0, n=a.n_rows, name="x0").copy()
    return b, x


def _run_context(context: ExecutionContext | None) -> tuple[ExecutionContext, ExecutionTrace]:
    trace = ExecutionTrace()
    return (context or DEFAULT_CONTEXT).with_trace(trace), trace


def _device_copy(v: np.ndarray, ctx: ExecutionContext) -> np.ndarray:
    """Duplicate a device-resident vector; modeled as one copy kernel."""
    ctx.record_launch(FLOAT_BYTES * 2 * v.shape[0])
    return v.copy()


def _true_residual(a: CsrMatrix, b: np.ndarray, x: np.ndarray, ctx: ExecutionContext) -> float:
    q = spmv_csr(a, x, ctx)
    resid = add_scaled(b, -1.0, q, ctx)
    return math.sqrt(dot(resid, resid, ctx))


def _result(a, b, x, ctx, trace, history, termination, kind, loop_seconds, diagnostics):
    with trace.phase(FINISH):
        true_norm = _true_residual(a, b, x, ctx)
    return SolverResult(
        x=x,
        residual_history=history,
        true_final_residual=true_norm,
        iterations=len(history),
        termination=termination,
        trace=trace,
        breakdown_kind=kind,
        loop_seconds=loop_seconds,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# Conjugate Gradient
# ---------------------------------------------------------------------------


def cg_classical(
    a: CsrMatrix,
    b,
    x0=None,
    config: SolverConfig | None = None,
    context: ExecutionContext | None = None,
    debug: bool = False,
) -> SolverResult:
    """Conjugate Gradient for SPD systems, one kernel per BLAS operation.

    Per iteration: one matrix-vector product, two inner products (each one
    launch plus one transfer) and three vector updates, six launches total.

    Parameters
    ----------
    a : CsrMatrix
        Square SPD system matrix (positive definiteness is not verified
        beyond breakdown detection).
    b : array_like
        Right-hand side.
    x0 : array_like, optional
        Initial guess, zero when omitted.
    config : SolverConfig, optional
    context : ExecutionContext, optional
        Workgroup geometry; a fresh trace is recorded per run regardless.
    debug : bool
        Collect direct-dot diagnostics (untraced) on the result.
    """
    cfg = config or SolverConfig()
    btol = cfg.loop_breakdown_tolerance()
    b, x = _prepare(a, b, x0)
    ctx, trace = _run_context(context)
    diag: dict = {"rr_direct": [], "beta": []} if debug else {}

    with trace.phase(SETUP):
        norm_b = math.sqrt(dot(b, b, ctx))
        scale_ = norm_b if norm_b > 0 else 1.0
        q0 = spmv_csr(a, x, ctx)
        r = add_scaled(b, -1.0, q0, ctx)
        p = _device_copy(r, ctx)
        rr = dot(r, r, ctx)
    if debug:
        diag["rr_direct"].append(float(np.dot(r, r)))

    history: list[float] = []
    termination, kind = MAX_ITER, None
    entry = math.sqrt(rr) / scale_
    if entry <= cfg.tolerance and (not cfg.fixed or rr == 0.0):
        termination = CONVERGED
        return _result(a, b, x, ctx, trace, history, termination, kind, 0.0, diag)

    t0 = time.perf_counter()
    for _ in range(cfg.iteration_limit()):
        with trace.phase(ITERATION):
            q = spmv_csr(a, p, ctx)
            pap = dot(p, q, ctx)
            if abs(pap) < btol:
                termination, kind = BREAKDOWN, "pAp"
                break
            alpha = rr / pap
            axpy(x, alpha, p, ctx)
            axpy(r, -alpha, q, ctx)
            rr_new = dot(r, r, ctx)
            if debug:
                diag["rr_direct"].append(float(np.dot(r, r)))
            monitored = math.sqrt(rr_new) / scale_
            history.append(monitored)
            if not math.isfinite(monitored):
                termination, kind = BREAKDOWN, "divergence"
                break
            if not cfg.fixed and monitored <= cfg.tolerance:
                termination = CONVERGED
                break
            beta = rr_new / rr
            if debug:
                diag["beta"].append(float(beta))
            xpay(p, r, beta, ctx)
            rr = rr_new
    loop_seconds = time.perf_counter() - t0
    return _result(a, b, x, ctx, trace, history, termination, kind, loop_seconds, diag)


_CG_FUSED_REQUEST = FusedReductionRequest(("input", "result"))


def cg_pipelined(
    a: CsrMatrix,
    b,
    x0=None,
    config: SolverConfig | None = None,
    context: ExecutionContext | None = None,
    debug: bool = False,
) -> SolverResult:
    """Conjugate Gradient restructured for two launches and one transfer.

    The search-direction inner products are folded into the matrix-vector
    kernel, the residual norm into the vector-update kernel, and the step
    size is reconstructed on the host as
    ``beta = alpha^2 <Ap, Ap> / <r, r> - 1``, so each iteration runs the
    fused update kernel, the fused product kernel, and a single transfer of
    all partial results.  Residual histories match :func:`cg_classical` to
    rounding accuracy.
    """
    cfg = config or SolverConfig()
    btol = cfg.loop_breakdown_tolerance()
    b, x = _prepare(a, b, x0)
    ctx, trace = _run_context(context)
    diag: dict = {"rr_direct": [], "beta": []} if debug else {}

    with trace.phase(SETUP):
        norm_b = math.sqrt(dot(b, b, ctx))
        scale_ = norm_b if norm_b > 0 else 1.0
        q0 = spmv_csr(a, x, ctx)
        r = add_scaled(b, -1.0, q0, ctx)
        p = _device_copy(r, ctx)
        ap, pq_part = spmv_fused(a, p, _CG_FUSED_REQUEST, ctx)
        rr_part = reduce_stage1(r * r, ctx)
        totals = reduce_stage2(WorkgroupPartials.stack([rr_part, pq_part]), ctx)
    rr, pap, apap = (float(t) for t in totals)

    history: list[float] = []
    termination, kind = MAX_ITER, None
    entry = math.sqrt(rr) / scale_
    if entry <= cfg.tolerance and (not cfg.fixed or rr == 0.0):
        termination = CONVERGED
        return _result(a, b, x, ctx, trace, history, termination, kind, 0.0, diag)
    if abs(pap) < btol:
        return _result(a, b, x, ctx, trace, history, BREAKDOWN, "pAp", 0.0, diag)
    alpha = rr / pap
    beta = alpha * alpha * apap / rr - 1.0
    if debug:
        diag["rr_direct"].append(float(np.dot(r, r)))
        diag["beta"].append(float(beta))

    t0 = time.perf_counter()
    for _ in range(cfg.iteration_limit()):
        with trace.phase(ITERATION):
            rr_part = fused_cg_vector_update(x, r, p, ap, alpha, beta, ctx)
            ap, pq_part = spmv_fused(a, p, _CG_FUSED_REQUEST, ctx)
            totals = reduce_stage2(WorkgroupPartials.stack([rr_part, pq_part]), ctx)
            rr, pap, apap = (float(t) for t in totals)
            if debug:
                diag["rr_direct"].append(float(np.dot(r, r)))
            monitored = math.sqrt(rr) / scale_
            history.append(monitored)
            if not math.isfinite(monitored):
                termination, kind = BREAKDOWN, "divergence"
                break
            if monitored <= cfg.tolerance and (not cfg.fixed or rr == 0.0):
                termination = CONVERGED
                break
            if abs(pap) < btol:
                termination, kind = BREAKDOWN, "pAp"
                break
            alpha = rr / pap
            beta = alpha * alpha * apap / rr - 1.0
            if debug:
                diag["beta"].append(float(beta))
    loop_seconds = time.perf_counter() - t0
    return _result(a, b, x, ctx, trace, history, termination, kind, loop_seconds, diag)


# ---------------------------------------------------------------------------
# BiCGStab
# ---------------------------------------------------------------------------


def _bicgstab_p_update(p, r, beta, omega, ap, ctx) -> None:
    """In place ``p = r + beta * (p - omega * Ap)``: one kernel."""
    p -= omega * ap
    p *= beta
    p += r
    ctx.record_launch(FLOAT_BYTES * 4 * p.shape[0])


def bicgstab_classical(
    a: CsrMatrix,
    b,
    x0=None,
    config: SolverConfig | None = None,
    context: ExecutionContext | None = None,
    debug: bool = False,
) -> SolverResult:
    """BiCGStab for general square systems, one kernel per BLAS operation.

    Per iteration: two matrix-vector products, seven inner products
    (including the explicit residual norm used for monitoring) and four
    vector updates.  The shadow residual is fixed to the initial residual.
    The direction coefficient is computed through the shadow-product
    identity ``beta = -<As, r0*> / <Ap, r0*>`` rather than the equivalent
    ratio form, so both formulations follow one floating-point scalar path
    and their trajectories stay aligned instead of drifting apart.
    """
    cfg = config or SolverConfig()
    btol = cfg.loop_breakdown_tolerance()
    b, x = _prepare(a, b, x0)
    ctx, trace = _run_context(context)
    diag: dict = {"s_dot_r0star": [], "s_norm": [], "direct_rr": []} if debug else {}

    with trace.phase(SETUP):
        norm_b = math.sqrt(dot(b, b, ctx))
        scale_ = norm_b if norm_b > 0 else 1.0
        q0 = spmv_csr(a, x, ctx)
        r = add_scaled(b, -1.0, q0, ctx)
        r0star = _device_copy(r, ctx)
        p = _device_copy(r, ctx)
        rr = dot(r, r, ctx)
        rho = dot(r, r0star, ctx)
    if debug:
        diag["r0star_norm"] = float(np.linalg.norm(r0star))

    history: list[float] = []
    termination, kind = MAX_ITER, None
    entry = math.sqrt(rr) / scale_
    if entry <= cfg.tolerance and (not cfg.fixed or rr == 0.0):
        termination = CONVERGED
        return _result(a, b, x, ctx, trace, history, termination, kind, 0.0, diag)

    t0 = time.perf_counter()
    for _ in range(cfg.iteration_limit()):
        with trace.phase(ITERATION):
            ap = spmv_csr(a, p, ctx)
            apr = dot(ap, r0star, ctx)
            if abs(apr) < btol:
                termination, kind = BREAKDOWN, "Apr0star"
                break
            alpha = rho / apr
            s = add_scaled(r, -alpha, ap, ctx)
            ss = dot(s, s, ctx)
            if debug:
                diag["s_dot_r0star"].append(float(np.dot(s, r0star)))
                diag["s_norm"].append(float(np.linalg.norm(s)))
            monitored_s = math.sqrt(ss) / scale_
            if not cfg.fixed and monitored_s <= cfg.tolerance:
                axpy(x, alpha, p, ctx)
                history.append(monitored_s)
                termination = CONVERGED
                break
            as_ = spmv_csr(a, s, ctx)
            ass = dot(as_, s, ctx)
            asas = dot(as_, as_, ctx)
            asr = dot(as_, r0star, ctx)
            if asas < btol:
                termination, kind = BREAKDOWN, "AsAs"
                break
            omega = ass / asas
            axpy2(x, alpha, p, omega, s, ctx)
            r = add_scaled(s, -omega, as_, ctx)
            rho_new = dot(r, r0star, ctx)
            rr = dot(r, r, ctx)
            if debug:
                diag["direct_rr"].append(float(rr))
            monitored = math.sqrt(rr) / scale_
            history.append(monitored)
            if not math.isfinite(monitored):
                termination, kind = BREAKDOWN, "divergence"
                break
            if not cfg.fixed and monitored <= cfg.tolerance:
                termination = CONVERGED
                break
            if abs(rho_new) < btol:
                termination, kind = BREAKDOWN, "rho"
                break
            if abs(omega) < btol:
                termination, kind = BREAKDOWN, "omega"
                break
            beta = -asr / apr
            _bicgstab_p_update(p, r, beta, omega, ap, ctx)
            rho = rho_new
    loop_seconds = time.perf_counter() - t0
    return _result(a, b, x, ctx, trace, history, termination, kind, loop_seconds, diag)


def bicgstab_pipelined(
    a: CsrMatrix,
    b,
    x0=None,
    config: SolverConfig | None = None,
    context: ExecutionContext | None = None,
    debug: bool = False,
) -> SolverResult:
    """BiCGStab restructured for four launches and one transfer.

    Both matrix-vector kernels carry their consumers' reduction stages, the
    step size is finalized inside the first update kernel from partials of
    ``<r, r0*>`` and ``<Ap, r0*>``, the stabilization direction coefficient
    is reconstructed as ``beta = -<As, r0*> / <Ap, r0*>``, and the residual
    norm is monitored through the identity
    ``||r||^2 = <s, s> - 2 omega <s, As> + omega^2 <As, As>`` instead of an
    extra inner product.  A negative identity value is clamped to zero and
    convergence is then confirmed against the true residual.
    """
    cfg = config or SolverConfig()
    btol = cfg.loop_breakdown_tolerance()
    b, x = _prepare(a, b, x0)
    ctx, trace = _run_context(context)
    diag: dict = (
        {"s_dot_r0star": [], "s_norm": [], "identity_rr": [], "direct_rr": []} if debug else {}
    )

    with trace.phase(SETUP):
        norm_b = math.sqrt(dot(b, b, ctx))
        scale_ = norm_b if norm_b > 0 else 1.0
        q0 = spmv_csr(a, x, ctx)
        r = add_scaled(b, -1.0, q0, ctx)
        r0star = _device_copy(r, ctx)
        p = _device_copy(r, ctx)
        rr = dot(r, r, ctx)
        rr0_part = reduce_stage1(r * r0star, ctx)
    if debug:
        diag["r0star_norm"] = float(np.linalg.norm(r0star))
    tail_request = FusedReductionRequest(("input", "result", r0star))
    lead_request = FusedReductionRequest((r0star,))

    history: list[float] = []
    termination, kind = MAX_ITER, None
    pending_half_step = None
    entry = math.sqrt(rr) / scale_
    if entry <= cfg.tolerance and (not cfg.fixed or rr == 0.0):
        termination = CONVERGED
        return _result(a, b, x, ctx, trace, history, termination, kind, 0.0, diag)

    t0 = time.perf_counter()
    limit = cfg.iteration_limit()
    it = 0
    while it < limit:
        it += 1
        confirm_conv = False
        with trace.phase(ITERATION):
            ap, apr_part = spmv_fused(a, p, lead_request, ctx)
            try:
                s, ss_part, alpha = fused_bicgstab_s_update(
                    r, ap, rr0_part, apr_part, ctx, btol
                )
            except BreakdownError as err:
                termination, kind = BREAKDOWN, err.kind
                break
            as_, tri_part = spmv_fused(a, s, tail_request, ctx)
            stacked = WorkgroupPartials.stack([ss_part, tri_part, apr_part])
            totals = reduce_stage2(stacked, ctx)
            ss, ass, asas, asr, apr = (float(t) for t in totals)
            if debug:
                diag["s_dot_r0star"].append(float(np.dot(s, r0star)))
                diag["s_norm"].append(float(np.linalg.norm(s)))
            monitored_s = math.sqrt(ss) / scale_
            if not cfg.fixed and monitored_s <= cfg.tolerance:
                pending_half_step = alpha
                history.append(monitored_s)
                termination = CONVERGED
                break
            if asas < btol:
                termination, kind = BREAKDOWN, "AsAs"
                break
            omega = ass / asas
            beta = -asr / apr
            identity = ss - 2.0 * omega * ass + omega * omega * asas
            clamped = identity < 0.0
            rr = max(identity, 0.0)
            rr0_part = fused_bicgstab_xrp_update(
                x, r, p, s, ap, as_, alpha, omega, beta, r0star, ctx
            )
            if debug:
                diag["identity_rr"].append(float(identity))
                diag["direct_rr"].append(float(np.dot(r, r)))
            monitored = math.sqrt(rr) / scale_
            history.append(monitored)
            if not math.isfinite(monitored):
                termination, kind = BREAKDOWN, "divergence"
                break
            if not cfg.fixed and monitored <= cfg.tolerance:
                if clamped:
                    confirm_conv = True
                else:
                    termination = CONVERGED
                    break
        if termination != MAX_ITER:
            break
        if confirm_conv:
            # The identity went negative, so the monitor lost accuracy;
            # only a recomputed true residual may declare convergence.
            with trace.phase("check"):
                true_norm = _true_residual(a, b, x, ctx)
            if true_norm <= cfg.tolerance * scale_:
                termination = CONVERGED
                break
    loop_seconds = time.perf_counter() - t0

    if pending_half_step is not None:
        with trace.phase(FINISH):
            axpy(x, pending_half_step, p, ctx)
            true_norm = _true_residual(a, b, x, ctx)
        return SolverResult(
            x=x,
            residual_history=history,
            true_final_residual=true_norm,
            iterations=len(history),
            termination=termination,
            trace=trace,
            breakdown_kind=kind,
            loop_seconds=loop_seconds,
            diagnostics=diag,
        )
    return _result(a, b, x, ctx, trace, history, termination, kind, loop_seconds, diag)


# ---------------------------------------------------------------------------
# Restarted GMRES (residual-projection form)
# ---------------------------------------------------------------------------


def _gmres_check(cfg: SolverConfig) -> None:
    if cfg.restart < 1:
        raise ValueError("restart length must be at least 1")


def gmres_classical(
    a: CsrMatrix,
    b,
    x0=None,
    config: SolverConfig | None = None,
    context: ExecutionContext | None = None,
    debug: bool = False,
) -> SolverResult:
    """Restarted GMRES built on a QR of the Krylov directions.

    Each cycle orthonormalizes ``A v_{i-1}`` against the current basis
    (classical or modified Gram-Schmidt per the config), projects the
    running residual onto the new vector (``xi_i``) and subtracts that
    component, so convergence is monitored without assembling a Hessenberg
    least-squares problem.  After ``m`` steps (or early convergence) the
    triangular system ``R eta = xi`` is solved on the host and the iterate
    is updated from the residual and basis vectors, with the coefficient
    correction ``eta_i + eta_1 xi_{i-1}`` accounting for the in-cycle
    residual updates.
    """
    cfg = config or SolverConfig()
    _gmres_check(cfg)
    btol = cfg.loop_breakdown_tolerance()
    b, x = _prepare(a, b, x0)
    ctx, trace = _run_context(context)
    diag: dict = {"ortho_offdiag": []} if debug else {}
    m = cfg.restart

    history: list[float] = []
    termination, kind = MAX_ITER, None
    limit = cfg.iteration_limit()
    total = 0
    norm_b = None
    scale_ = 1.0
    loop_seconds = 0.0
    done = False

    while not done and total < limit:
        with trace.phase(SETUP):
            if norm_b is None:
                norm_b = math.sqrt(dot(b, b, ctx))
                scale_ = norm_b if norm_b > 0 else 1.0
            q0 = spmv_csr(a, x, ctx)
            r = add_scaled(b, -1.0, q0, ctx)
            rho = math.sqrt(dot(r, r, ctx))
            start_ok = rho > 0 and not (not cfg.fixed and rho / scale_ <= cfg.tolerance)
            if start_ok:
                scale(r, 1.0 / rho, ctx)
        if not start_ok:
            termination = CONVERGED
            done = True
            break

        basis: list[np.ndarray] = []
        rmat = UpperTriangular(m)
        xi: list[float] = []
        est2 = 1.0
        lucky = False
        converged_in_cycle = False

        t0 = time.perf_counter()
        while len(basis) < m and total < limit:
            i = len(basis) + 1
            with trace.phase(ITERATION):
                v_in = basis[-1] if basis else r
                w = spmv_csr(a, v_in, ctx)
                if cfg.orthogonalization == MODIFIED_GS:
                    coeffs = orthogonalize_mgs(basis, w, ctx)
                else:
                    coeffs = _orthogonalize_cgs(basis, w, ctx)
                for j, c in enumerate(coeffs):
                    rmat.set(j, i - 1, float(c))
                nrm = math.sqrt(dot(w, w, ctx))
                if nrm < btol:
                    lucky = True
                    break
                rmat.set(i - 1, i - 1, nrm)
                scale(w, 1.0 / nrm, ctx)
                basis.append(w)
                xi_i = dot(r, w, ctx)
                xi.append(xi_i)
                axpy(r, -xi_i, w, ctx)
                est2 = max(est2 - xi_i * xi_i, 0.0)
                monitored = rho * math.sqrt(est2) / scale_
                history.append(monitored)
                total += 1
                if not math.isfinite(monitored):
                    termination, kind = BREAKDOWN, "divergence"
                    done = True
                    break
                if not cfg.fixed and monitored <= cfg.tolerance:
                    converged_in_cycle = True
                    break
        loop_seconds += time.perf_counter() - t0

        k = len(basis)
        gate_true = None
        if k > 0 and termination != BREAKDOWN:
            with trace.phase(FINISH):
                try:
                    eta = solve_upper_triangular(
                        rmat.leading(k), np.asarray(xi), cfg.breakdown_tolerance
                    )
                except BreakdownError as err:
                    termination, kind = BREAKDOWN, err.kind
                    done = True
                    eta = None
                if eta is not None:
                    update = eta[0] * r
                    for idx in range(1, k + 1):
                        coeff = (eta[idx] if idx < k else 0.0) + eta[0] * xi[idx - 1]
                        update += coeff * basis[idx - 1]
                    x += rho * update
                    ctx.record_launch(FLOAT_BYTES * (k + 3) * a.n_rows)
                    if converged_in_cycle or lucky:
                        # Residual estimates degrade past convergence, so a
                        # cycle may only declare victory against the true
                        # residual; otherwise the next cycle restarts.
                        gate_true = _true_residual(a, b, x, ctx)
        if debug and k > 0:
            vmat = np.stack(basis, axis=1)
            gram = vmat.T @ vmat
            diag["ortho_offdiag"].append(float(np.abs(gram - np.eye(k)).max()))

        if termination == BREAKDOWN:
            pass
        elif converged_in_cycle or lucky:
            if gate_true is not None and gate_true <= cfg.tolerance * scale_:
                termination = CONVERGED
                done = True
            elif lucky and k == 0:
                termination = LUCKY_BREAKDOWN
                done = True
    return _result(a, b, x, ctx, trace, history, termination, kind, loop_seconds, diag)


_GMRES_FIRST_REQUEST = FusedReductionRequest(("result",))
_GMRES_LATER_REQUEST = FusedReductionRequest(("input",))


def gmres_pipelined(
    a: CsrMatrix,
    b,
    x0=None,
    config: SolverConfig | None = None,
    context: ExecutionContext | None = None,
    debug: bool = False,
) -> SolverResult:
    """Restarted GMRES with fused classical Gram-Schmidt kernels.

    The orthogonalization of step ``i`` runs as: a matrix-vector kernel
    fused with the first reduction stage against the newest basis vector, a
    stage-one kernel for the projections onto older basis vectors, a fused
    update kernel that finalizes the coefficients and emits norm partials,
    and a fused normalization emitting the residual-projection partials.
    That is two launches for the first step and four for every later one,
    with no transfer at all during a cycle.  The running residual is never
    updated; partial results for all ``xi_i`` plus the triangular matrix
    move to the host in a single transfer when the cycle ends, after which
    the convergence history is reconstructed and the iterate updated.

    Requires classical Gram-Schmidt (the fused plan batches projections).
    """
    cfg = config or SolverConfig()
    _gmres_check(cfg)
    if cfg.orthogonalization != CLASSICAL_GS:
        raise ValueError("pipelined GMRES supports classical Gram-Schmidt only")
    btol = cfg.loop_breakdown_tolerance()
    b, x = _prepare(a, b, x0)
    ctx, trace = _run_context(context)
    diag: dict = {"ortho_offdiag": []} if debug else {}
    m = cfg.restart

    history: list[float] = []
    termination, kind = MAX_ITER, None
    limit = cfg.iteration_limit()
    total = 0
    norm_b = None
    scale_ = 1.0
    loop_seconds = 0.0
    done = False

    while not done and total < limit:
        with trace.phase(SETUP):
            if norm_b is None:
                norm_b = math.sqrt(dot(b, b, ctx))
                scale_ = norm_b if norm_b > 0 else 1.0
            q0 = spmv_csr(a, x, ctx)
            r = add_scaled(b, -1.0, q0, ctx)
            rho = math.sqrt(dot(r, r, ctx))
            start_ok = rho > 0 and not (not cfg.fixed and rho / scale_ <= cfg.tolerance)
            if start_ok:
                scale(r, 1.0 / rho, ctx)
        if not start_ok:
            termination = CONVERGED
            done = True
            break

        basis: list[np.ndarray] = []
        rmat = UpperTriangular(m)
        xi_parts: list[WorkgroupPartials] = []
        lucky = False

        t0 = time.perf_counter()
        while len(basis) < m and total < limit:
            i = len(basis) + 1
            with trace.phase(ITERATION):
                if i == 1:
                    w, norm_part = spmv_fused(a, r, _GMRES_FIRST_REQUEST, ctx)
                else:
                    v_in = basis[-1]
                    w, last_part = spmv_fused(a, v_in, _GMRES_LATER_REQUEST, ctx)
                    older_part = fused_gs_stage1(basis[:-1], w, ctx)
                    all_parts = WorkgroupPartials.stack([older_part, last_part])
                    coeffs, norm_part = fused_gs_update(w, basis, all_parts, ctx)
                    for j, c in enumerate(coeffs):
                        rmat.set(j, i - 1, float(c))
                try:
                    nrm, xi_part = fused_gs_normalize(
                        w, norm_part, r, ctx, btol
                    )
                except LuckyBreakdown:
                    lucky = True
                    break
                rmat.set(i - 1, i - 1, nrm)
                basis.append(w)
                xi_parts.append(xi_part)
                total += 1
        loop_seconds += time.perf_counter() - t0

        k = len(basis)
        conv_at = None
        gate_true = None
        if k > 0:
            with trace.phase(FINISH):
                stacked = WorkgroupPartials.stack(xi_parts)
                ctx.record_transfer(stacked.nbytes + FLOAT_BYTES * (k * (k + 1) // 2))
                xi_vals = _stage2(stacked.data)
                est2 = 1.0
                for idx, xv in enumerate(xi_vals):
                    est2 = max(est2 - float(xv) * float(xv), 0.0)
                    monitored = rho * math.sqrt(est2) / scale_
                    history.append(monitored)
                    if not cfg.fixed and conv_at is None and monitored <= cfg.tolerance:
                        conv_at = idx + 1
                k_solve = conv_at if conv_at is not None else k
                try:
                    eta = solve_upper_triangular(
                        rmat.leading(k_solve), xi_vals[:k_solve], cfg.breakdown_tolerance
                    )
                except BreakdownError as err:
                    termination, kind = BREAKDOWN, err.kind
                    done = True
                    eta = None
                if eta is not None:
                    ctx.record_transfer(FLOAT_BYTES * k_solve)
                    update = eta[0] * r
                    for idx in range(1, k_solve):
                        update += eta[idx] * basis[idx - 1]
                    x += rho * update
                    ctx.record_launch(FLOAT_BYTES * (k_solve + 2) * a.n_rows)
                    if conv_at is not None or lucky:
                        # Residual estimates degrade past convergence, so a
                        # cycle may only declare victory against the true
                        # residual; otherwise the next cycle restarts.
                        gate_true = _true_residual(a, b, x, ctx)
            if not math.isfinite(float(np.sum(np.asarray(xi_vals) ** 2))):
                termination, kind = BREAKDOWN, "divergence"
                done = True
        if debug and k > 0:
            vmat = np.stack(basis, axis=1)
            gram = vmat.T @ vmat
            diag["ortho_offdiag"].append(float(np.abs(gram - np.eye(k)).max()))

        if termination == BREAKDOWN:
            pass
        elif conv_at is not None or lucky:
            if gate_true is not None and gate_true <= cfg.tolerance * scale_:
                termination = CONVERGED
                done = True
            elif lucky and k == 0:
                termination = LUCKY_BREAKDOWN
                done = True
    return _result(a, b, x, ctx, trace, history, termination, kind, loop_seconds, diag)
