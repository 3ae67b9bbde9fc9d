"""Biorthogonal families, norms, kernels, correlation.

Independent frozen oracles (mpmath tanh-sinh double integrals, 30 digits,
computed outside the package; nodes and algorithm share nothing with the
build's panel Gauss-Legendre):

    h_0 = iint e^{-3(V + y^4/4 - xy)}        V = x^2/2      -> 6.765344564391373
                                             V = x^4/4-3x^2/2 -> 95856.62134565161
    h_1 = iint x y e^{-3(V + y^4/4 - xy)}    V = x^2/2      -> 5.734903795594956
                                             V = x^4/4-3x^2/2 -> 208605.699544932

(h_1 equals the raw moment because parity kills the degree-0 corrections
to the monic p_1, q_1.  Truncation matters at 1e-10: the x-range must
reach where nV(x) - g(x) has grown past 60, i.e. |x| ~ 9 for V = x^2/2.)
"""

import numpy as np
import pytest

from twomat.biortho import (build_biortho, correlation, kernel_11,
                            kernel_11_grid, kernel_12, kernel_21, kernel_22,
                            residual_matrix, KernelEvaluator)
from twomat.biortho_mp import build_biortho_mp, _x_plan
from twomat.config import ModelConfig
from twomat.errors import DimensionError, GramSingular, TwomatError
from twomat.quadrature import gauss_legendre

from conftest import V2, V4

H0_FROZEN = {V2: 6.765344564391373, V4: 95856.62134565161}
H1_FROZEN = {V2: 5.734903795594956, V4: 208605.699544932}


# ---------------------------------------------------------------------------
# norms against the frozen double-integral oracle


@pytest.mark.parametrize("vc", [V2, V4])
def test_h0_matches_independent_oracle(vc, built):
    sys_ = built(vc, 3)
    assert sys_.h[0] == pytest.approx(H0_FROZEN[vc], rel=1e-10)


@pytest.mark.parametrize("vc", [V2, V4])
def test_h1_matches_independent_oracle(vc, built):
    sys_ = built(vc, 3)
    assert sys_.h[1] == pytest.approx(H1_FROZEN[vc], rel=1e-10)


def test_degree_zero_case(built):
    sys_ = built(V2, 3)
    assert np.array_equal(sys_.p_cheb[0], np.eye(4)[0])
    assert np.array_equal(sys_.q_cheb[0], np.eye(4)[0])
    assert sys_.h[0] == pytest.approx(sys_.gram_cheb[0, 0], rel=1e-14)


def test_gram_monomial_matches_frozen(built):
    G = built(V2, 3).gram_monomial()
    assert G[0, 0] == pytest.approx(H0_FROZEN[V2], rel=1e-10)
    assert G[1, 1] == pytest.approx(H1_FROZEN[V2], rel=1e-10)
    # parity: odd j+k entries vanish
    assert abs(G[0, 1]) < 1e-12 * G[0, 0]
    assert abs(G[1, 0]) < 1e-12 * G[0, 0]


# ---------------------------------------------------------------------------
# structure of the families


@pytest.mark.parametrize("vc,n", [(V2, 6), (V4, 6), (V2, 12)])
def test_monic_exact_degree(vc, n, built):
    sys_ = built(vc, n)
    for k in range(n + 1):
        # leading power coefficient of T_k(x/sx) is 2^{k-1}/sx^k
        lead = (2.0 ** max(k - 1, 0)) / sys_.sx ** k
        assert sys_.p_cheb[k, k] * lead == pytest.approx(1.0, rel=1e-10)
        lead = (2.0 ** max(k - 1, 0)) / sys_.sy ** k
        assert sys_.q_cheb[k, k] * lead == pytest.approx(1.0, rel=1e-10)


@pytest.mark.parametrize("vc,n", [(V4, 6), (V2, 12)])
def test_coefficient_parity(vc, n, built):
    # even model: p_k has only same-parity Chebyshev coefficients
    sys_ = built(vc, n)
    for k in range(n + 1):
        for a in range(n + 1):
            if (k - a) % 2 == 1:
                assert sys_.p_cheb[k, a] == 0.0
                assert sys_.q_cheb[k, a] == 0.0


@pytest.mark.parametrize("vc,n", [(V2, 3), (V4, 6), (V2, 12), (V4, 12)])
def test_norms_positive(vc, n, built):
    assert np.all(built(vc, n).h > 0.0)


# ---------------------------------------------------------------------------
# biorthogonality residuals (independent quadrature oracle)


def test_residual_small_example(built):
    sys_ = built(V2, 3)
    res = residual_matrix(sys_)              # |<p_j,q_k> - h_j d_jk| / h_j
    abs_err = res * sys_.h[:, None]
    assert abs_err.max() / sys_.h.min() < 1e-10


@pytest.mark.parametrize("vc", [V2, V4])
def test_residual_relative_bound(vc, built):
    assert residual_matrix(built(vc, 6)).max() < 1e-8


def test_autoescalation_is_recorded(built):
    # by n = 12 the pivot spread amplifies f64 roundoff past 1e-8, the
    # quick self-check catches it, and the build reruns in mp
    sys_ = built(V2, 12)
    rep = sys_.cond_report
    assert rep.get("mp") is not None
    assert rep["escalated_bits"] > 53
    assert ("float64_residual" in rep) or ("float64_failure" in rep)
    if "float64_residual" in rep:
        assert rep["float64_residual"] > 1e-9


def test_forced_low_precision_raises():
    cfg = ModelConfig(v_coeffs=V2, tau=1.0, n=20)
    with pytest.raises(GramSingular):
        build_biortho_mp(cfg, bits=64)


# ---------------------------------------------------------------------------
# kernels


def test_kernels_agree_between_float64_and_mp_routes(built):
    # two entirely different builds (f64 adaptive quadrature + LAPACK vs
    # planned mp panels + exact triangular solves) and two different
    # evaluation routes must produce the same kernels
    s64 = built(V4, 6)
    assert s64.cond_report.get("mp") is None
    smp = build_biortho_mp(ModelConfig(v_coeffs=V4, tau=1.0, n=6))
    pts = [(0.3, -0.8), (1.4, 1.1), (-1.9, 0.2), (0.0, 0.0)]
    for fn in (kernel_11, kernel_12, kernel_21, kernel_22):
        for a, b in pts:
            va, vb = fn(s64, a, b), fn(smp, a, b)
            assert va == pytest.approx(vb, rel=1e-10, abs=1e-20)


def _trace_k11(sys_, order=40, step=0.35):
    # cut where the planner's envelope with the polynomial growth of the
    # full j-sum (degree 2n) has fallen by 40 nats
    bps, _, _ = _x_plan(sys_.cfg, sys_.sx, 2 * sys_.cfg.n, 48, 40.0)
    xc = bps[-1]
    nodes, w = gauss_legendre(order)
    total, a = 0.0, 0.0
    while a < xc - 1e-12:
        b = min(a + step, xc)
        xs = 0.5 * (a + b) + 0.5 * (b - a) * nodes
        vals = np.array([kernel_11(sys_, float(x), float(x)) for x in xs])
        total += 0.5 * (b - a) * float(w @ vals)
        a = b
    return 2.0 * total


def test_trace_identity_float64(built):
    sys_ = built(V2, 6)
    assert _trace_k11(sys_) == pytest.approx(6.0, rel=1e-8)


def test_trace_identity_escalated(built):
    sys_ = built(V4, 12)
    assert sys_.cond_report.get("mp") is not None
    assert _trace_k11(sys_) == pytest.approx(12.0, rel=1e-6)


def test_kernel_diag_positive_and_even(built):
    sys_ = built(V4, 6)
    for x in np.linspace(0.0, 2.4, 7):
        d = kernel_11(sys_, float(x), float(x))
        assert d >= 0.0
        assert kernel_11(sys_, float(-x), float(-x)) == pytest.approx(
            d, rel=1e-9, abs=1e-15)


def test_kernel_grid_matches_pointwise(built):
    sys_ = built(V2, 6)
    xs1 = np.array([-1.1, 0.2, 0.9])
    xs2 = np.array([0.4, 1.7])
    grid = kernel_11_grid(sys_, xs1, xs2)
    for i, a in enumerate(xs1):
        for j, b in enumerate(xs2):
            assert grid[i, j] == pytest.approx(
                kernel_11(sys_, float(a), float(b)), rel=1e-12)


def test_basis_independence_float64(built):
    sa = built(V2, 6)
    sb = built(V2, 6, scales=(sa.sx * 1.17, sa.sy * 0.83))
    for a, b in [(0.0, 0.0), (0.45, -0.2), (1.3, 1.05), (-1.8, 0.6)]:
        assert kernel_11(sa, a, b) == pytest.approx(
            kernel_11(sb, a, b), rel=1e-8, abs=1e-15)


def test_basis_independence_escalated(built):
    sa = built(V2, 12)
    sb = built(V2, 12, scales=(sa.sx * 1.17, sa.sy * 0.83))
    for a, b in [(0.0, 0.0), (0.45, -0.2), (1.3, 1.05)]:
        assert kernel_11(sa, a, b) == pytest.approx(
            kernel_11(sb, a, b), rel=1e-8, abs=1e-15)


def test_kernel21_subtraction_convention(built):
    # K21 = sum P_j Q_j / h_j minus the coupling factor, with V on the
    # first argument (the convention is deliberate; see docstring)
    sys_ = built(V4, 6)
    cfg = sys_.cfg
    y1, y2 = 0.8, -0.5
    n = cfg.n
    plain = float((sys_.eval_P_all(y1)[:n] / sys_.h[:n])
                  @ sys_.eval_Q_all(y2)[:n])
    cross = np.exp(-n * (cfg.v(y1) + cfg.w(y2) - cfg.tau * y1 * y2))
    assert kernel_21(sys_, y1, y2) == pytest.approx(plain - cross, rel=1e-12)


def test_kernel_evaluator_wrapper(built):
    sys_ = built(V2, 6)
    assert KernelEvaluator(sys_, "12")(0.3, 0.7) == kernel_12(sys_, 0.3, 0.7)
    with pytest.raises(TwomatError):
        KernelEvaluator(sys_, "13")


# ---------------------------------------------------------------------------
# correlation determinant


def test_correlation_single_point_is_kernel(built):
    sys_ = built(V2, 6)
    x = 0.6
    assert correlation(sys_, [x], []) == pytest.approx(
        kernel_11(sys_, x, x), rel=1e-13)
    y = -0.4
    assert correlation(sys_, [], [y]) == pytest.approx(
        kernel_22(sys_, y, y), rel=1e-13)


def test_correlation_repeated_point_vanishes(built):
    sys_ = built(V2, 6)
    scale = kernel_11(sys_, 0.5, 0.5) ** 2
    assert abs(correlation(sys_, [0.5, 0.5], [])) < 1e-10 * scale


def test_correlation_second_kind_density_positive(built):
    sys_ = built(V4, 6)
    for y in (-1.2, 0.0, 0.9):
        assert correlation(sys_, [], [y]) >= 0.0


def test_correlation_dimension_guard(built):
    sys_ = built(V2, 3)
    with pytest.raises(DimensionError):
        correlation(sys_, [0.1, 0.2, 0.3, 0.4], [])
    with pytest.raises(DimensionError):
        correlation(sys_, [], [0.1] * 4)
