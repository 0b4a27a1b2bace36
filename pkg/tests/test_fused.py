"""Fused kernels: one launch each, arithmetic matching their unfused parts."""

import numpy as np
import pytest

from pipekrylov.errors import BreakdownError, LuckyBreakdown
from pipekrylov.execmodel import ExecutionContext, ExecutionTrace
from pipekrylov.fused import (
    WITH_INPUT,
    WITH_RESULT,
    FusedReductionRequest,
    fused_bicgstab_s_update,
    fused_bicgstab_xrp_update,
    fused_cg_vector_update,
    fused_gs_normalize,
    fused_gs_stage1,
    fused_gs_update,
    spmv_fused,
)
from pipekrylov.linalg import CsrMatrix, WorkgroupPartials, reduce_stage1, reduce_stage2, spmv_csr


def traced_context(n_groups=2, group_size=4):
    trace = ExecutionTrace()
    ctx = ExecutionContext(n_groups=n_groups, group_size=group_size, trace=trace)
    trace.begin_phase("setup")
    return ctx, trace


def tiny_ctx():
    return ExecutionContext(n_groups=1, group_size=1)


def partials_for(values, ctx):
    return reduce_stage1(np.asarray(values, dtype=np.float64), ctx)


# ---------------------------------------------------------------------------
# Reduction requests
# ---------------------------------------------------------------------------


def test_request_accepts_one_to_four_quantities():
    assert len(FusedReductionRequest((WITH_INPUT,))) == 1
    assert len(FusedReductionRequest((WITH_INPUT, WITH_RESULT, np.ones(2), np.ones(2)))) == 4
    with pytest.raises(ValueError):
        FusedReductionRequest(())
    with pytest.raises(ValueError):
        FusedReductionRequest((WITH_INPUT,) * 5)
    with pytest.raises(ValueError):
        FusedReductionRequest(("sideways",))


# ---------------------------------------------------------------------------
# Fused spmv
# ---------------------------------------------------------------------------


def test_spmv_fused_oracle():
    # oracle: q = [[4,1],[1,3]] @ [1,2] = [6,7]; <q,p> = 20, <q,q> = 85
    a = CsrMatrix.from_dense([[4.0, 1.0], [1.0, 3.0]])
    ctx, trace = traced_context()
    q, partials = spmv_fused(a, [1.0, 2.0], FusedReductionRequest((WITH_INPUT, WITH_RESULT)), ctx)
    assert np.array_equal(q, [6.0, 7.0])
    totals = reduce_stage2(partials)
    assert totals[0] == 20.0 and totals[1] == 85.0
    assert trace.phases[0].launches == 1


def test_spmv_fused_matches_unfused_composition_bitwise():
    rng = np.random.default_rng(3)
    dense = rng.standard_normal((30, 30))
    dense[rng.random((30, 30)) > 0.2] = 0.0
    a = CsrMatrix.from_dense(dense)
    p = rng.standard_normal(30)
    w = rng.standard_normal(30)
    ctx = ExecutionContext(n_groups=4, group_size=8)
    q, partials = spmv_fused(a, p, FusedReductionRequest((WITH_INPUT, WITH_RESULT, w)), ctx)
    assert np.array_equal(q, spmv_csr(a, p))
    assert np.array_equal(partials.data[:, 0], reduce_stage1(q * p, ctx).data[:, 0])
    assert np.array_equal(partials.data[:, 1], reduce_stage1(q * q, ctx).data[:, 0])
    assert np.array_equal(partials.data[:, 2], reduce_stage1(q * w, ctx).data[:, 0])


def test_spmv_fused_input_dot_needs_square_matrix():
    a = CsrMatrix.from_dense([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    with pytest.raises(ValueError):
        spmv_fused(a, [1.0, 1.0, 1.0], FusedReductionRequest((WITH_INPUT,)))
    q, _ = spmv_fused(a, [1.0, 1.0, 1.0], FusedReductionRequest((WITH_RESULT,)))
    assert np.array_equal(q, [6.0, 15.0])


# ---------------------------------------------------------------------------
# CG vector update
# ---------------------------------------------------------------------------


def test_cg_vector_update_oracle():
    # oracle by hand: x = 0 + 0.25*2 = 0.5, r = 2 - 0.25*8 = 0,
    # p = r + 0.5*p_old = 1.0, <r,r> = 0
    ctx, trace = traced_context()
    x, r, p = np.array([0.0]), np.array([2.0]), np.array([2.0])
    partials = fused_cg_vector_update(x, r, p, [8.0], alpha=0.25, beta=0.5, ctx=ctx)
    assert x[0] == 0.5 and r[0] == 0.0 and p[0] == 1.0
    assert reduce_stage2(partials)[0] == 0.0
    assert trace.phases[0].launches == 1


def test_cg_vector_update_matches_unfused_bitwise():
    rng = np.random.default_rng(5)
    n = 100
    x, r, p = rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(n)
    ap = rng.standard_normal(n)
    alpha, beta = 0.37, -0.8
    xe, re, pe = x.copy(), r.copy(), p.copy()
    ctx = ExecutionContext(n_groups=4, group_size=8)
    partials = fused_cg_vector_update(x, r, p, ap, alpha, beta, ctx)
    xe += alpha * pe
    re -= alpha * ap
    pe = re + beta * pe
    assert np.array_equal(x, xe) and np.array_equal(r, re) and np.array_equal(p, pe)
    assert np.array_equal(partials.data, reduce_stage1(r * r, ctx).data)


# ---------------------------------------------------------------------------
# BiCGStab half steps
# ---------------------------------------------------------------------------


def test_bicgstab_s_update_oracle():
    # oracle: alpha = 2/4 = 0.5, s = 3 - 0.5*2 = 2, <s,s> = 4
    ctx = tiny_ctx()
    s, partials, alpha = fused_bicgstab_s_update(
        [3.0], [2.0], partials_for([2.0], ctx), partials_for([4.0], ctx), ctx
    )
    assert alpha == 0.5
    assert np.array_equal(s, [2.0])
    assert reduce_stage2(partials)[0] == 4.0


def test_bicgstab_s_update_breakdown_on_tiny_denominator():
    ctx = tiny_ctx()
    with pytest.raises(BreakdownError) as info:
        fused_bicgstab_s_update(
            [1.0], [1.0], partials_for([1.0], ctx), partials_for([0.0], ctx), ctx
        )
    assert info.value.kind == "Apr0star"


def test_bicgstab_xrp_update_oracle():
    # oracle: x = 1 + 1*1 + 1*2 = 4, r = 2 - 1*1 = 1,
    # p = (1 - 1*1)*1 + r = 1, <r,r0*> = 1
    ctx = tiny_ctx()
    x, r, p = np.array([1.0]), np.array([0.0]), np.array([1.0])
    partials = fused_bicgstab_xrp_update(
        x, r, p, s=[2.0], Ap=[1.0], As=[1.0], alpha=1.0, omega=1.0, beta=1.0,
        r0star=[1.0], ctx=ctx,
    )
    assert x[0] == 4.0 and r[0] == 1.0 and p[0] == 1.0
    assert reduce_stage2(partials)[0] == 1.0


def test_bicgstab_xrp_update_matches_unfused_bitwise():
    rng = np.random.default_rng(9)
    n = 64
    x, r, p = rng.standard_normal(n), np.zeros(n), rng.standard_normal(n)
    s, ap, as_, r0 = (rng.standard_normal(n) for _ in range(4))
    alpha, omega, beta = 0.3, 1.7, -0.4
    xe, pe = x.copy(), p.copy()
    ctx = ExecutionContext(n_groups=4, group_size=8)
    partials = fused_bicgstab_xrp_update(x, r, p, s, ap, as_, alpha, omega, beta, r0, ctx)
    xe += alpha * pe + omega * s
    re = s - omega * as_
    pe = re + beta * (pe - omega * ap)
    assert np.array_equal(x, xe) and np.array_equal(r, re) and np.array_equal(p, pe)
    assert np.array_equal(partials.data, reduce_stage1(r * r0, ctx).data)


# ---------------------------------------------------------------------------
# Gram-Schmidt kernels
# ---------------------------------------------------------------------------


def test_gs_stage1_projects_on_whole_basis():
    ctx, trace = traced_context()
    basis = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    partials = fused_gs_stage1(basis, [3.0, 4.0], ctx)
    assert np.array_equal(reduce_stage2(partials), [3.0, 4.0])
    assert trace.phases[0].launches == 1


def test_gs_stage1_empty_basis_still_one_launch():
    ctx, trace = traced_context()
    partials = fused_gs_stage1([], [3.0, 4.0], ctx)
    assert partials.n_quantities == 0
    assert trace.phases[0].launches == 1
    stacked = WorkgroupPartials.stack([partials, partials_for([1.0, 1.0], ctx)])
    assert stacked.n_quantities == 1


def test_gs_update_oracle():
    # oracle: coeff = <b1, v> = 3, v -> [0, 4], ||v||^2 = 16
    ctx = tiny_ctx()
    v = np.array([3.0, 4.0])
    basis = [np.array([1.0, 0.0])]
    coeffs, norm_partials = fused_gs_update(v, basis, fused_gs_stage1(basis, v, ctx), ctx)
    assert np.array_equal(coeffs, [3.0])
    assert np.array_equal(v, [0.0, 4.0])
    assert reduce_stage2(norm_partials)[0] == 16.0


def test_gs_update_validates_partial_count():
    ctx = tiny_ctx()
    with pytest.raises(ValueError):
        fused_gs_update(np.ones(2), [np.ones(2)], partials_for(np.ones((2, 2)), ctx), ctx)


def test_gs_normalize_oracle():
    # oracle: ||v|| = 5; scaling is by the reciprocal, so the result is
    # bitwise [3,4] * (1/5), one ulp off the decimal literals
    ctx = tiny_ctx()
    v = np.array([3.0, 4.0])
    norm, partials = fused_gs_normalize(v, partials_for(v * v, ctx), [1.0, 0.0], ctx)
    assert norm == 5.0
    expected = np.array([3.0, 4.0]) * (1.0 / 5.0)
    assert np.array_equal(v, expected)
    assert reduce_stage2(partials)[0] == expected[0]


def test_gs_normalize_lucky_breakdown_on_zero_vector():
    ctx = tiny_ctx()
    v = np.zeros(2)
    with pytest.raises(LuckyBreakdown):
        fused_gs_normalize(v, partials_for(v * v, ctx), [1.0, 0.0], ctx)


def test_gs_pipeline_matches_unfused_gram_schmidt():
    rng = np.random.default_rng(13)
    n = 50
    q1 = rng.standard_normal(n)
    q1 /= np.linalg.norm(q1)
    w = rng.standard_normal(n)
    r = rng.standard_normal(n)
    ctx = ExecutionContext(n_groups=4, group_size=8)
    v = w.copy()
    coeffs, norm_partials = fused_gs_update(v, [q1], fused_gs_stage1([q1], v, ctx), ctx)
    norm, proj = fused_gs_normalize(v, norm_partials, r, ctx)
    # unfused composition with the same reduction geometry
    c = reduce_stage2(reduce_stage1(q1 * w, ctx))[0]
    ve = w - c * q1
    ne = np.sqrt(reduce_stage2(reduce_stage1(ve * ve, ctx))[0])
    assert coeffs[0] == c
    assert norm == ne
    assert np.array_equal(v, ve * (1.0 / ne))
