import numpy as np
import pytest

from fp4sim.blockquant import NVFP4, fake_quantize, quantize_block_tensor
from fp4sim.minifloat import decode_table
from fp4sim.qgemm import (
    QuantPoint,
    RoundingPolicy,
    fqt_linear_backward,
    fqt_linear_forward,
    fqt_linear_update,
    parse_policy,
    qmatmul,
)
from fp4sim.rounding import RngStream, RoundingMode

rng = np.random.default_rng(0)
A = rng.standard_normal((8, 48))
B = rng.standard_normal((48, 5))


def test_matches_explicit_oracle():
    qa = np.stack([fake_quantize(row, NVFP4) for row in A])
    qb = np.stack([fake_quantize(col, NVFP4) for col in B.T], axis=1)
    np.testing.assert_array_equal(qmatmul(A, B, NVFP4, NVFP4), qa @ qb)


def test_identity_on_grid():
    I = 6.0 * np.eye(16)
    x = np.random.default_rng(1).choice([0.5, 1.0, -3.0, 6.0], size=(16, 4))
    x[0] = 6.0
    np.testing.assert_array_equal(qmatmul(I, x, NVFP4, NVFP4), 6.0 * x)


def test_high_precision_bit_exact():
    W = rng.standard_normal((6, 48))
    a = rng.standard_normal((48, 7))
    d = rng.standard_normal((6, 7))
    hp = RoundingPolicy.high_precision()
    np.testing.assert_array_equal(fqt_linear_forward(W, a, hp), W @ a)
    np.testing.assert_array_equal(fqt_linear_backward(W, d, hp), W.T @ d)
    np.testing.assert_array_equal(fqt_linear_update(d, a.T, hp), d @ a.T)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        qmatmul(A, A, NVFP4, NVFP4)


def sr_expectation(x, axis):
    """Per-element mean of SR: the input clipped to its block's saturation level."""
    q = quantize_block_tensor(x, NVFP4, axis=axis)
    scales = decode_table(NVFP4.scale_format)[q.scales]
    per_elem = np.repeat(scales, 16, axis=axis)
    return np.clip(x, -6 * per_elem, 6 * per_elem)


def test_sr_gemm_unbiased_over_seeds():
    sr = NVFP4.with_rounding("sr")
    a = rng.standard_normal((4, 32))
    b = rng.standard_normal((32, 3))
    n = 4000
    outs = np.stack([qmatmul(a, b, sr, sr, RngStream(s, 0), RngStream(s, 1)) for s in range(n)])
    exact = sr_expectation(a, 1) @ sr_expectation(b, 0)
    se = outs.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(outs.mean(axis=0) - exact) < 5 * se + 1e-12)


def test_backward_requantizes_transpose():
    W = rng.standard_normal((16, 32))
    d = rng.standard_normal((16, 3))
    pol = RoundingPolicy.uniform(NVFP4, "rtn")
    expected = fake_quantize(W.T, NVFP4, axis=1) @ fake_quantize(d, NVFP4, axis=0)
    np.testing.assert_array_equal(fqt_linear_backward(W, d, pol), expected)
    # not the transpose of the forward-quantized weight
    assert not np.array_equal(fake_quantize(W.T, NVFP4, axis=1), fake_quantize(W, NVFP4, axis=1).T)


def test_streams_separate_by_point_and_layer():
    W = rng.standard_normal((16, 32))
    a = rng.standard_normal((32, 16))
    pol = RoundingPolicy.uniform(NVFP4, "sr")
    r = RngStream(3)
    f0 = fqt_linear_forward(W, a, pol, r, layer=0)
    np.testing.assert_array_equal(f0, fqt_linear_forward(W, a, pol, r, layer=0))
    assert not np.array_equal(f0, fqt_linear_forward(W, a, pol, r, layer=1))


def test_default_fqt_preset():
    p = RoundingPolicy.paper()
    modes = {pt.value: p[pt].element_rounding for pt in QuantPoint}
    assert modes == {"fwdW": RoundingMode.RTN, "fwdA": RoundingMode.RTN, "bwdW": RoundingMode.RTN,
                     "bwdG": RoundingMode.SR, "updG": RoundingMode.SR, "updA": RoundingMode.SR}


def test_qaf_keeps_forward():
    p = RoundingPolicy.paper()
    q = p.qaf()
    assert q[QuantPoint.FWD_WEIGHT] == p[QuantPoint.FWD_WEIGHT]
    assert q[QuantPoint.FWD_ACT] == p[QuantPoint.FWD_ACT]
    assert all(q[pt] is None for pt in (QuantPoint.BWD_WEIGHT_T, QuantPoint.BWD_GRAD,
                                        QuantPoint.UPD_GRAD, QuantPoint.UPD_ACT_T))
    three = p.qaf(include_weight=False)
    assert three[QuantPoint.BWD_WEIGHT_T] == p[QuantPoint.BWD_WEIGHT_T]
    assert three[QuantPoint.BWD_GRAD] is None


@pytest.mark.parametrize("text,point,mode", [
    ("paper", "bwdG", "sr"),
    ("rtn", "updA", "rtn"),
    ("fwdW=rtn,updG=sr", "updG", "sr"),
    ("fwdW=rtn,updG=sr", "bwdG", None),
    ("none", "fwdW", None),
])
def test_parse_policy(text, point, mode):
    cfg = parse_policy(text)[QuantPoint(point)]
    assert (cfg.element_rounding.value if cfg else None) == mode


@pytest.mark.parametrize("bad", ["fwdX=rtn", "fwdW", "fwdW=floor"])
def test_parse_policy_errors(bad):
    with pytest.raises(ValueError):
        parse_policy(bad)


def test_policy_literal_round_trip():
    for p in (RoundingPolicy.paper(), RoundingPolicy.high_precision(), RoundingPolicy.single_sr(QuantPoint.UPD_ACT_T)):
        assert parse_policy(p.literal()) == p
    assert RoundingPolicy.high_precision().is_high_precision
    assert RoundingPolicy.uniform(NVFP4, "none").is_high_precision
