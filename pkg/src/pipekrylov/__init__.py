"""Pipelined Krylov solvers with an explicit launch-and-transfer cost model.

The library provides classical and pipelined formulations of CG, BiCGStab
and restarted GMRES over CSR/ELLPACK matrices, a deterministic two-stage
reduction scheme, fused kernels that emulate how the pipelined variants
run on a device, and a latency model that prices recorded execution traces.
"""

from .errors import BreakdownError, LuckyBreakdown, MatrixMarketError, TraceUsageError
from .execmodel import (
    DEFAULT_CONTEXT,
    DeviceProfile,
    ExecutionContext,
    ExecutionTrace,
    LatencyBarrier,
    PhaseRecord,
    latency_barrier,
    predict_iteration_time,
    speedup_curve,
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
from .io import (
    gen_poisson2d,
    gen_poisson3d_block,
    gen_random_rowwise,
    read_matrix_market,
    read_stats_csv,
    write_matrix_market,
    write_stats_csv,
)
from .linalg import (
    CsrMatrix,
    EllMatrix,
    WorkgroupPartials,
    add_scaled,
    as_vector,
    axpy,
    axpy2,
    csr_to_ell,
    dot,
    ell_to_csr,
    reduce_stage1,
    reduce_stage2,
    scale,
    spmv_csr,
    spmv_ell,
    xpay,
)
from .solvers import (
    CONVERGED,
    MAX_ITER,
    BREAKDOWN,
    LUCKY_BREAKDOWN,
    CLASSICAL_GS,
    MODIFIED_GS,
    SolverConfig,
    SolverResult,
    UpperTriangular,
    bicgstab_classical,
    bicgstab_pipelined,
    cg_classical,
    cg_pipelined,
    gmres_classical,
    gmres_pipelined,
    orthogonalize_mgs,
    solve_upper_triangular,
)

__version__ = "0.1.0"

SOLVERS = {
    ("cg", "classical"): cg_classical,
    ("cg", "pipelined"): cg_pipelined,
    ("bicgstab", "classical"): bicgstab_classical,
    ("bicgstab", "pipelined"): bicgstab_pipelined,
    ("gmres", "classical"): gmres_classical,
    ("gmres", "pipelined"): gmres_pipelined,
}

__all__ = [
    "BreakdownError",
    "LuckyBreakdown",
    "MatrixMarketError",
    "TraceUsageError",
    "DeviceProfile",
    "ExecutionContext",
    "ExecutionTrace",
    "LatencyBarrier",
    "PhaseRecord",
    "DEFAULT_CONTEXT",
    "latency_barrier",
    "predict_iteration_time",
    "speedup_curve",
    "DEFAULT_BREAKDOWN_TOLERANCE",
    "FusedReductionRequest",
    "spmv_fused",
    "fused_cg_vector_update",
    "fused_bicgstab_s_update",
    "fused_bicgstab_xrp_update",
    "fused_gs_stage1",
    "fused_gs_update",
    "fused_gs_normalize",
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
    "SOLVERS",
    "read_matrix_market",
    "write_matrix_market",
    "gen_poisson2d",
    "gen_poisson3d_block",
    "gen_random_rowwise",
    "write_stats_csv",
    "read_stats_csv",
    "__version__",
]
