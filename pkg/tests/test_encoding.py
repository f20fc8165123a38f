import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condnerf import autodiff as ad
from condnerf.encoding import (
    EncodingConfig,
    direction_angles,
    encode,
    encode_array,
    encode_directions,
    encode_positions,
)
from condnerf.errors import ContractError, NumericError


def test_encode_at_zero():
    np.testing.assert_allclose(encode(0.0, 2), [0, 1, 0, 1], atol=1e-15)


def test_encode_at_half():
    np.testing.assert_allclose(encode(0.5, 2), [1, 0, 0, -1], atol=1e-15)


def test_default_dimensions():
    cfg = EncodingConfig()
    assert (cfg.position_freqs, cfg.direction_freqs) == (10, 4)
    assert encode_positions(np.zeros((5, 3)), cfg).shape == (5, 60)
    assert encode_directions(np.array([[0.0, 0.0, -1.0]]), cfg).shape == (1, 16)


def test_components_are_concatenated_in_order():
    x = np.array([0.1, -0.3, 0.7])
    out = encode_array(x, 3)
    for k in range(3):
        np.testing.assert_array_equal(out[6 * k : 6 * k + 6], encode(x[k], 3))


def test_non_finite_rejected():
    with pytest.raises(NumericError):
        encode(float("nan"), 2)
    with pytest.raises(NumericError):
        encode_array(np.array([np.inf]), 2)
    with pytest.raises(ContractError):
        EncodingConfig(0, 4)


@settings(max_examples=200, deadline=None)
@given(st.floats(-8, 8))
def test_bounded_and_period_two(p):
    a = encode(p, 6)
    assert np.all(np.abs(a) <= 1)
    # p + 2 may round off low bits of p, so general points agree only to rounding
    np.testing.assert_allclose(a, encode(p + 2, 6), atol=1e-12)


def test_period_two_exact_on_dyadic_points():
    for p in (0.0, 0.25, -0.375, 1.5):
        assert np.array_equal(encode(p, 4), encode(p + 2, 4))


def test_gradient_matches_analytic_form():
    L = 5
    rng = np.random.default_rng(0)
    for p in rng.uniform(-1, 1, 10):
        with ad.precision(np.float64):
            x = ad.Tensor(np.array([p]), requires_grad=True)
            out = encode_array(x, L)
            for idx in range(2 * L):
                x.grad = None
                ad.backward(out[idx])
                k = idx // 2
                w = 2.0**k * np.pi
                expected = w * np.cos(w * p) if idx % 2 == 0 else -w * np.sin(w * p)
                assert x.grad[0] == pytest.approx(expected, abs=1e-6)


def test_tensor_path_matches_array_path():
    x = np.random.default_rng(1).uniform(-1, 1, (4, 3))
    with ad.precision(np.float64):
        np.testing.assert_allclose(encode_array(ad.Tensor(x), 4).values, encode_array(x, 4), atol=1e-14)


def test_direction_angles_cover_unit_range():
    d = np.array([[0, 0, 1.0], [1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0], [0, 0, -1.0]])
    a = direction_angles(d)
    np.testing.assert_allclose(a[:, 1], [0, 0, 1, -1, 0], atol=1e-15)
    np.testing.assert_allclose(a[:3, 0], [0, 0.5, 0], atol=1e-15)
    assert abs(a[4, 0]) == pytest.approx(1.0)


def test_positions_are_scaled_before_encoding():
    cfg = EncodingConfig(3, 1)
    x = np.array([[4.0, -2.0, 1.0]])
    np.testing.assert_array_equal(encode_positions(x, cfg, scene_scale=4.0), encode_array(x / 4.0, 3))
