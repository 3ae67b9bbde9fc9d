"""Config validation, potential evaluation, weights and transforms.

Frozen reference values come from two independent routes each (closed
form in Gamma functions where available, mpmath tanh-sinh quadrature
otherwise):

    int e^{-y^4/4} dy      = 2 Gamma(1/4) / 4^(3/4) = 2.5636933520408474
    int y^2 e^{-y^4/4} dy  = sqrt(2) Gamma(3/4)     = 1.73300092018477
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twomat.config import ModelConfig, eval_potential
from twomat.errors import TwomatError
from twomat.quadrature import adaptive_quad, gauss_legendre
from twomat.weights import WeightTable, _y_cutoff, _LOG_CUT

I0_QUARTIC = 2.5636933520408474   # int e^{-y^4/4} dy
I2_QUARTIC = 1.73300092018477     # int y^2 e^{-y^4/4} dy

V2 = (0.0, 0.0, 0.5)
V4 = (0.0, 0.0, -1.5, 0.0, 0.25)


# ---------------------------------------------------------------------------
# config


def test_config_accepts_benchmarks():
    for vc in (V2, V4):
        cfg = ModelConfig(v_coeffs=vc, tau=1.0, n=6)
        assert cfg.degree in (2, 4)
        assert cfg.n == 6


@pytest.mark.parametrize("bad", [
    dict(v_coeffs=(0.0, 1.0, 0.5), tau=1.0, n=4),      # odd power present
    dict(v_coeffs=(0.0, 0.0, -0.5), tau=1.0, n=4),     # negative leading
    dict(v_coeffs=(1.0,), tau=1.0, n=4),               # degree < 2
    dict(v_coeffs=(0.0, 0.0, 0.5, 0.0), tau=1.0, n=4),  # trailing zero -> deg 2 ok
    dict(v_coeffs=V2, tau=0.0, n=4),                   # tau not positive
    dict(v_coeffs=V2, tau=-1.0, n=4),
    dict(v_coeffs=V2, tau=1.0, n=0),                   # n out of range
    dict(v_coeffs=V2, tau=1.0, n=49),
    dict(v_coeffs=V2, tau=1.0, n=4, quad_tol=0.0),     # quad_tol range
    dict(v_coeffs=V2, tau=1.0, n=4, quad_tol=1e-3),
    dict(v_coeffs=V2, tau=1.0, n=4, precision_bits=32),
])
def test_config_rejects_invalid(bad):
    # the trailing-zero case is actually valid (degree collapses to 2)
    if bad["v_coeffs"] == (0.0, 0.0, 0.5, 0.0):
        cfg = ModelConfig(**bad)
        assert cfg.degree == 2
        return
    with pytest.raises(TwomatError):
        ModelConfig(**bad)


def test_config_roundtrip_and_unknown_keys(tmp_path):
    cfg = ModelConfig(v_coeffs=V4, tau=1.0, n=12, quad_tol=1e-11)
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(TwomatError):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    with pytest.raises(TwomatError):
        ModelConfig.from_dict({"tau": 1.0, "n": 3})
    p = tmp_path / "cfg.json"
    p.write_text('{"v_coeffs": [0.0, 0.0, 0.5], "tau": 1.0, "n": 3}')
    assert ModelConfig.from_json(p).n == 3
    # odd-power entries rejected on ingestion too
    p.write_text('{"v_coeffs": [0.0, 0.5, 0.5], "tau": 1.0, "n": 3}')
    with pytest.raises(TwomatError):
        ModelConfig.from_json(p)


def test_precision_bits_default_tracks_n():
    assert ModelConfig(v_coeffs=V2, tau=1.0, n=24).bits == 53
    assert ModelConfig(v_coeffs=V2, tau=1.0, n=25).bits == 128
    assert ModelConfig(v_coeffs=V2, tau=1.0, n=8,
                       precision_bits=200).bits == 200


def test_eval_potential():
    cfg = ModelConfig(v_coeffs=V2, tau=1.0, n=3)
    assert eval_potential(cfg, 2.0, 0) == pytest.approx(2.0, abs=0)
    assert eval_potential(cfg, 2.0, 1) == pytest.approx(2.0, abs=0)
    quart = ModelConfig(v_coeffs=(0.0, 0.0, -1.0, 0.0, 0.25), tau=1.0, n=3)
    assert eval_potential(quart, 1.0, 1) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(TwomatError):
        eval_potential(cfg, 1.0, 2)


# ---------------------------------------------------------------------------
# quadrature engine


def test_adaptive_quad_known_integrals():
    val = adaptive_quad(lambda x: x * x, 0.0, 1.0)
    assert val == pytest.approx(1.0 / 3.0, rel=1e-14)
    val = adaptive_quad(lambda x: np.exp(-x * x), -8.0, 8.0)
    assert val == pytest.approx(np.sqrt(np.pi), rel=1e-13)


def test_adaptive_quad_vector_integrand():
    out = adaptive_quad(lambda x: np.stack([np.ones_like(x), x, x * x]),
                        0.0, 2.0)
    assert np.allclose(out, [2.0, 2.0, 8.0 / 3.0], rtol=1e-13)


def test_gauss_legendre_rule():
    x, w = gauss_legendre(12)
    assert w.sum() == pytest.approx(2.0, rel=1e-14)
    assert np.allclose(x, -x[::-1], atol=1e-15)      # symmetric nodes
    # degree-23 polynomial integrated exactly
    assert float(w @ x ** 22) == pytest.approx(2.0 / 23.0, rel=1e-13)
    assert abs(float(w @ x ** 23)) < 1e-15


# ---------------------------------------------------------------------------
# weights


def test_weight_zero_order_matches_quartic_integral():
    # at x = 0 the coupling drops out and w_0(0) = int e^{-y^4/4} dy
    cfg = ModelConfig(v_coeffs=V2, tau=1.0, n=1)
    wt = WeightTable(cfg)
    assert wt.weight(0, 0.0) == pytest.approx(I0_QUARTIC, rel=1e-11)


def test_weight_odd_order_vanishes_at_origin():
    cfg = ModelConfig(v_coeffs=V2, tau=1.0, n=2)
    wt = WeightTable(cfg)
    assert abs(wt.weight(1, 0.0)) < 1e-13 * wt.weight(0, 0.0)


def test_weight_positive_even_order():
    cfg = ModelConfig(v_coeffs=V4, tau=1.0, n=4)
    wt = WeightTable(cfg)
    for x in np.linspace(-2.5, 2.5, 11):
        assert wt.weight(0, float(x)) > 0.0


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-3.0, 3.0), j=st.integers(0, 6))
def test_weight_parity(x, j):
    cfg = ModelConfig(v_coeffs=V2, tau=1.0, n=2)
    wt = WeightTable(cfg)
    a = wt.weight(j, x)
    b = wt.weight(j, -x)
    scale = abs(wt.weight(j, abs(x))) + abs(wt.weight(0, x))
    assert abs(b - (-1.0) ** j * a) <= 1e-11 * scale


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-3.0, 3.0), k=st.integers(0, 10))
def test_moment_parity(x, k):
    # mhat_k(-x) = (-1)^k mhat_k(x): the reflection that lets every
    # integral over x fold onto the half-line
    cfg = ModelConfig(v_coeffs=V4, tau=1.0, n=3)
    wt = WeightTable(cfg, max_order=10)
    mp_ = wt.moments_scaled(x)
    mm = wt.moments_scaled(-x)
    assert mm[k] == pytest.approx((-1.0) ** k * mp_[k], rel=1e-13, abs=1e-300)


def test_weight_order_bounds():
    cfg = ModelConfig(v_coeffs=V2, tau=1.0, n=2)
    wt = WeightTable(cfg, max_order=6)
    with pytest.raises(TwomatError):
        wt.weight(7, 0.5)
    with pytest.raises(TwomatError):
        wt.weight(-1, 0.5)


def test_y_cutoff_suppresses_tail():
    cfg = ModelConfig(v_coeffs=V2, tau=1.0, n=6)
    wt = WeightTable(cfg)
    for x in (0.0, 0.7, 2.9):
        g = float(wt.log_scale(x))
        yc = _y_cutoff(cfg.n, cfg.tau, x, g)
        assert cfg.n * (yc ** 4 / 4 - cfg.tau * x * yc) - g >= _LOG_CUT


def test_log_scale_closed_form():
    cfg = ModelConfig(v_coeffs=V2, tau=2.0, n=5)
    wt = WeightTable(cfg)
    x = 1.3
    assert wt.log_scale(x) == pytest.approx(
        5 * 0.75 * (2.0 * x) ** (4.0 / 3.0), rel=1e-15)
    assert wt.log_scale(-x) == wt.log_scale(x)


# ---------------------------------------------------------------------------
# transforms


def test_transform_q_monomials_reproduce_weights():
    cfg = ModelConfig(v_coeffs=V4, tau=1.0, n=3)
    wt = WeightTable(cfg)
    for j, x in [(0, 0.4), (1, -1.2), (2, 2.0), (3, 0.0)]:
        coeffs = np.zeros(j + 1)
        coeffs[j] = 1.0
        assert wt.transform_q(coeffs, x) == wt.weight(j, x)


def test_transform_q_quadratic_at_origin():
    cfg = ModelConfig(v_coeffs=V2, tau=1.0, n=1)
    wt = WeightTable(cfg)
    assert wt.transform_q(np.array([0.0, 0.0, 1.0]), 0.0) == pytest.approx(
        I2_QUARTIC, rel=1e-11)


def test_transform_q_linearity():
    cfg = ModelConfig(v_coeffs=V2, tau=1.0, n=2)
    wt = WeightTable(cfg)
    x = 0.8
    combo = wt.transform_q(np.array([2.0, 0.0, -3.0]), x)
    parts = 2.0 * wt.weight(0, x) - 3.0 * wt.weight(2, x)
    assert combo == pytest.approx(parts, rel=1e-13)


def test_transform_p_parity_and_constant():
    cfg = ModelConfig(v_coeffs=V4, tau=1.0, n=2)
    wt = WeightTable(cfg)
    # P[1](y) = e^{-nW(y)} int e^{-n(V - tau x y)} dx is even in y
    for y in (0.3, 1.1):
        assert wt.transform_p(np.array([1.0]), y) == pytest.approx(
            wt.transform_p(np.array([1.0]), -y), rel=1e-11)
    # P[x](y) is odd
    assert wt.transform_p(np.array([0.0, 1.0]), 0.9) == pytest.approx(
        -wt.transform_p(np.array([0.0, 1.0]), -0.9), rel=1e-11)


def test_transform_p_against_direct_quadrature():
    # independent check of the x-side transform at one point: direct
    # unscaled quadrature is fine in float64 at n = 2
    cfg = ModelConfig(v_coeffs=V2, tau=1.0, n=2)
    wt = WeightTable(cfg)
    y = 0.7

    def direct(x):
        return (1.0 + x + x * x) * np.exp(-2 * (x * x / 2 - x * y))

    ref = adaptive_quad(direct, -9.0, 9.0) * np.exp(-2 * y ** 4 / 4)
    got = wt.transform_p(np.array([1.0, 1.0, 1.0]), y)
    assert got == pytest.approx(ref, rel=1e-11)
