import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uegan import tensor as T
from uegan.attention import (
    apply_uncertainty_attention,
    dilate,
    edge_attention,
    edge_band,
    refinement_forward,
    reverse_attention,
    sobel_edges,
    uncertainty_map,
)
from uegan.errors import DimensionError

from oracles import stencil_edges, union_of_blocks

F64 = np.float64


def t64(a, grad=False):
    return T.Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


# reverse attention ----------------------------------------------------------


def test_reverse_attention_examples():
    f = t64(np.random.default_rng(0).standard_normal((1, 3, 4, 4)))
    a, fr = reverse_attention(t64(np.zeros((1, 1, 2, 2))), f)
    np.testing.assert_array_equal(a.data, 0.5)
    np.testing.assert_array_equal(fr.data, 0.5 * f.data)
    a, fr = reverse_attention(t64(np.full((1, 1, 2, 2), 20.0)), f)
    assert np.all(a.data < 1e-8) and np.all(np.abs(fr.data) < 1e-7)
    a, _ = reverse_attention(t64(np.full((1, 1, 2, 2), math.log(3))), f)
    np.testing.assert_allclose(a.data, 0.25, atol=1e-12)


def test_reverse_attention_spatial_mismatch():
    with pytest.raises(DimensionError):
        reverse_attention(T.Tensor(np.zeros((1, 1, 3, 3))), T.Tensor(np.zeros((1, 2, 4, 4))))


@pytest.mark.parametrize("seed", range(5))
def test_reverse_plus_probability_is_one(seed):
    rng = np.random.default_rng(seed)
    prev = T.Tensor(rng.uniform(-8, 8, (2, 1, 4, 4)))
    a, _ = reverse_attention(prev, T.Tensor(np.ones((2, 1, 8, 8))))
    up = T.sigmoid(T.bilinear_upsample(prev, 2))
    np.testing.assert_allclose(a.data + up.data, 1.0, atol=1e-6)


# sobel / dilation -----------------------------------------------------------


def test_sobel_flat_inputs():
    assert not sobel_edges(np.zeros((6, 6))).any()
    assert not sobel_edges(np.ones((6, 6))).any()


def test_sobel_half_plane():
    m = np.zeros((8, 8))
    m[:, :4] = 1
    e = sobel_edges(m)
    np.testing.assert_array_equal(e, stencil_edges(m))
    expected = np.zeros((8, 8))
    expected[:, 3:5] = 1
    np.testing.assert_array_equal(e, expected)


@pytest.mark.parametrize("seed", range(20))
def test_sobel_matches_stencil_on_random_masks(seed):
    m = (np.random.default_rng(seed).random((7, 9)) < 0.4).astype(float)
    np.testing.assert_array_equal(sobel_edges(m), stencil_edges(m))


def test_dilate_single_pixel():
    e = np.zeros((12, 12))
    e[5, 5] = 1
    d = dilate(e, 7)
    expected = np.zeros((12, 12))
    expected[2:9, 2:9] = 1
    np.testing.assert_array_equal(d, expected)
    corner = np.zeros((12, 12))
    corner[0, 0] = 1
    assert dilate(corner, 7).sum() == 16  # clipped 4x4


def test_dilate_kernel_one_is_identity():
    e = (np.random.default_rng(0).random((5, 5)) < 0.3).astype(np.float32)
    np.testing.assert_array_equal(dilate(e, 1), e)


def test_dilate_two_pixels_connect():
    e = np.zeros((9, 15))
    e[4, 3] = e[4, 7] = 1
    d = dilate(e, 7)
    np.testing.assert_array_equal(d, union_of_blocks(e, 7))
    assert d[4, 3:8].all()


def test_dilate_rejects_even_kernel():
    with pytest.raises(ValueError):
        dilate(np.zeros((3, 3)), 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**20 - 1), st.sampled_from([1, 3, 5, 7]))
def test_dilate_matches_block_union(bits, kernel):
    m = np.array([(bits >> i) & 1 for i in range(20)], dtype=float).reshape(4, 5)
    np.testing.assert_array_equal(dilate(m, kernel), union_of_blocks(m, kernel))


# edge attention -------------------------------------------------------------


def test_edge_attention_empty_prediction():
    f = T.Tensor(np.ones((1, 2, 8, 8)))
    a, fe = edge_attention(T.Tensor(np.full((1, 1, 4, 4), -20.0)), f)
    assert not a.data.any() and not fe.data.any()


def test_edge_attention_half_plane_band():
    prev = np.full((1, 1, 8, 8), -20.0)
    prev[..., :4] = 20.0
    f = t64(np.ones((1, 3, 16, 16)))
    a, fe = edge_attention(t64(prev), f, 7)
    prob = T.sigmoid(T.bilinear_upsample(t64(prev), 2)).data[0, 0]
    band = union_of_blocks(stencil_edges(prob >= 0.5), 7)
    np.testing.assert_array_equal(a.data[0, 0] == 0, (band == 0) | (prob == 0))
    np.testing.assert_allclose(a.data[0, 0], prob * band)
    for c in range(3):
        np.testing.assert_array_equal(fe.data[0, c], a.data[0, 0])


@pytest.mark.parametrize("seed", range(10))
def test_edge_attention_bounded_by_probability(seed):
    rng = np.random.default_rng(seed)
    prev = t64(rng.uniform(-4, 4, (1, 1, 4, 4)))
    a, _ = edge_attention(prev, t64(np.ones((1, 1, 8, 8))))
    p = T.sigmoid(T.bilinear_upsample(prev, 2)).data
    band = edge_band(p)
    assert np.all(a.data <= p) and np.all(a.data[band == 0] == 0)
    assert set(np.unique(band)) <= {0.0, 1.0}


def test_edge_decision_maps_are_gradient_constants():
    # moving a logit that does not cross 0.5 changes A_E only through sigmoid
    prev = t64(np.array([[[[2.0, -2.0], [-2.0, -2.0]]]]), grad=True)
    a, _ = edge_attention(prev, t64(np.ones((1, 1, 4, 4))), 3)
    a.sum().backward()
    p = T.sigmoid(T.bilinear_upsample(t64(prev.data), 2)).data
    band = edge_band(p, 3)
    up_grad = band * p * (1 - p)
    mh = T.interp_matrix(2, 2)
    np.testing.assert_allclose(prev.grad[0, 0], mh.T @ up_grad[0, 0] @ mh, atol=1e-12)


# uncertainty ----------------------------------------------------------------


def test_uncertainty_examples():
    assert uncertainty_map(t64([0.0])).data[0] == pytest.approx(math.log(2), abs=1e-6)
    assert np.all(uncertainty_map(t64([-40.0, 40.0])).data < 1e-5)
    assert uncertainty_map(t64([math.log(9)])).data[0] == pytest.approx(0.325083, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30))
def test_uncertainty_symmetric_and_bounded(z):
    e, e_neg = uncertainty_map(t64([z, -z])).data
    assert e == pytest.approx(e_neg, abs=1e-6)
    assert 0.0 <= e <= math.log(2) + 1e-12


def test_apply_uncertainty_examples():
    feats = t64(np.random.default_rng(1).standard_normal((1, 4, 8, 8)))
    out = apply_uncertainty_attention(feats, t64(np.zeros((1, 1, 4, 4))))
    np.testing.assert_allclose(out.data, math.log(2) * feats.data, rtol=1e-12)
    out = apply_uncertainty_attention(feats, t64(np.where(np.eye(8) > 0, 40.0, -40.0)[None, None]))
    assert np.all(np.abs(out.data) < 1e-4 * np.abs(feats.data).max())


def test_apply_uncertainty_mixed_matches_product():
    rng = np.random.default_rng(2)
    feats = rng.standard_normal((2, 3, 8, 8))
    logits = rng.uniform(-5, 5, (2, 1, 4, 4))
    out = apply_uncertainty_attention(t64(feats), t64(logits)).data
    p = 1 / (1 + np.exp(-T.bilinear_upsample(t64(logits), 2).data))
    p = np.clip(p, 1e-7, 1 - 1e-7)
    ent = -(p * np.log(p) + (1 - p) * np.log(1 - p))
    np.testing.assert_allclose(out, ent * feats, rtol=1e-10, atol=1e-12)


def test_apply_uncertainty_mismatch():
    with pytest.raises(DimensionError):
        apply_uncertainty_attention(T.Tensor(np.zeros((1, 2, 8, 8))), T.Tensor(np.zeros((1, 1, 3, 3))))


# refinement -----------------------------------------------------------------


def _params(rng, c, scale=1.0):
    return {
        "conv1.w": t64(scale * rng.standard_normal((c, 2 * c, 3, 3))),
        "conv1.b": t64(scale * rng.standard_normal(c)),
        "conv2.w": t64(scale * rng.standard_normal((1, c, 3, 3))),
        "conv2.b": t64(scale * rng.standard_normal(1)),
    }


@pytest.mark.parametrize("seed", range(5))
def test_zero_residual_is_upsampling(seed):
    rng = np.random.default_rng(seed)
    prev = T.Tensor(rng.uniform(-5, 5, (2, 1, 4, 4)))
    feats = T.Tensor(rng.standard_normal((2, 3, 8, 8)))
    params = {k: T.Tensor(np.zeros_like(v.data, dtype=np.float32)) for k, v in _params(rng, 3).items()}
    out = refinement_forward(prev, feats, params)
    assert out.data.tobytes() == T.bilinear_upsample(prev, 2).data.tobytes()


def test_refinement_zero_inputs_give_bias_path():
    rng = np.random.default_rng(0)
    params = _params(rng, 2)
    out = refinement_forward(t64(np.zeros((1, 1, 4, 4))), t64(np.zeros((1, 2, 8, 8))), params).data
    hidden = np.maximum(params["conv1.b"].data, 0)
    w2 = params["conv2.w"].data[0]
    # interior pixels see the full 3x3 window of the constant hidden map
    interior = (w2.sum(axis=(1, 2)) * hidden).sum() + params["conv2.b"].data[0]
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], interior, rtol=1e-12)


def test_refinement_matches_hand_composition():
    rng = np.random.default_rng(5)
    c = 4
    prev = rng.uniform(-3, 3, (1, 1, 4, 4))
    feats = rng.standard_normal((1, c, 8, 8))
    params = _params(rng, c, 0.3)
    out = refinement_forward(t64(prev), t64(feats), params).data

    up = T.bilinear_upsample(t64(prev), 2).data
    p = 1 / (1 + np.exp(-up))
    a_r = 1 - p
    band = union_of_blocks(stencil_edges(p[0, 0] >= 0.5), 7)[None, None]
    a_e = p * band
    x = np.concatenate([a_r * feats, a_e * feats], axis=1)

    def conv3(x, w, b):
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        y = np.zeros((1, w.shape[0], 8, 8))
        for i in range(8):
            for j in range(8):
                y[0, :, i, j] = np.einsum("cij,ocij->o", xp[0, :, i : i + 3, j : j + 3], w) + b
        return y

    hid = np.maximum(conv3(x, params["conv1.w"].data, params["conv1.b"].data), 0)
    want = up + conv3(hid, params["conv2.w"].data, params["conv2.b"].data)
    np.testing.assert_allclose(out, want, rtol=1e-10, atol=1e-12)


def test_refinement_return_maps():
    rng = np.random.default_rng(6)
    out, maps = refinement_forward(
        t64(rng.standard_normal((1, 1, 2, 2))), t64(np.ones((1, 2, 4, 4))), _params(rng, 2), return_maps=True
    )
    assert set(maps) == {"reverse", "edge", "band"}
    assert out.shape == (1, 1, 4, 4)
