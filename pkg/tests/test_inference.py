import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uegan.errors import DimensionError
from uegan.inference import (
    TTA_TRANSFORMS,
    THRESHOLDS,
    axis_origins,
    ensemble_average,
    extract_tiles,
    fuse_tiles,
    predict_image,
    predict_tiled,
    select_threshold,
    triangular_window,
    tta_predict,
)
from uegan.network import ModelConfig, build_generator, zero_params

from oracles import stub_tile_round_trip


def test_axis_origins_examples():
    assert axis_origins(1500, 400, 0.3) == [0, 280, 560, 840, 1100]
    assert axis_origins(5000, 2000, 0.5) == [0, 1000, 2000, 3000]
    assert axis_origins(128, 64, 0.0) == [0, 64]
    assert axis_origins(64, 64, 0.5) == [0]


def test_axis_origins_validation():
    with pytest.raises(DimensionError):
        axis_origins(10, 20, 0.5)
    with pytest.raises(ValueError):
        axis_origins(100, 20, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300), st.floats(0, 0.95))
def test_origins_cover_every_pixel(dim, tile, overlap):
    if tile > dim:
        return
    o = axis_origins(dim, tile, overlap)
    assert o[0] == 0 and o[-1] == dim - tile
    assert all(b > a for a, b in zip(o, o[1:]))
    assert all(b - a <= tile for a, b in zip(o, o[1:]))


def test_triangular_window():
    np.testing.assert_array_equal(triangular_window(5), [1, 2, 3, 2, 1])
    np.testing.assert_array_equal(triangular_window(4), [1, 2, 2, 1])


@pytest.mark.parametrize("size,tile,overlap", [(150, 40, 0.3), (250, 100, 0.5), (128, 64, 0.0), (97, 31, 0.45)])
def test_tile_round_trip(size, tile, overlap):
    image = np.random.default_rng(size).random((2, 3, size, size + 7)).astype(np.float32)
    out = stub_tile_round_trip(image, tile, overlap, extract_tiles, fuse_tiles)
    assert np.abs(out - image).max() < 1e-6


def test_fuse_checks_counts_and_shapes():
    grid = extract_tiles((8, 8), 4, 0.0)
    with pytest.raises(ValueError):
        fuse_tiles(grid, [np.zeros((4, 4))] * 3)
    with pytest.raises(DimensionError):
        fuse_tiles(grid, [np.zeros((3, 3))] * 4)


def test_fusion_weights_favour_tile_centres():
    grid = extract_tiles((6, 4), 4, 0.5)
    assert grid.row_origins == [0, 2] and grid.col_origins == [0]
    fused = fuse_tiles(grid, [np.zeros((4, 4)), np.ones((4, 4))])
    # window [1, 2, 2, 1]: row 2 is inner for the top tile and the edge of the bottom one
    np.testing.assert_allclose(fused[:, 0], [0, 0, 1 / 3, 2 / 3, 1, 1], atol=1e-7)


def test_predict_tiled_with_pointwise_model():
    image = np.random.default_rng(0).random((1, 3, 50, 50))
    out = predict_tiled(image, lambda x: x.mean(axis=1, keepdims=True) ** 2, 16, 0.4)
    np.testing.assert_allclose(out, image.mean(axis=1, keepdims=True) ** 2, atol=1e-6)


def test_tta_constant_model_is_exact():
    image = np.random.default_rng(1).random((1, 3, 16, 16))
    out = tta_predict(image, lambda x: np.full((x.shape[0], 1) + x.shape[2:], 0.37, dtype=np.float32))
    assert np.all(out == np.float32(0.37))


def test_tta_equivariant_model_is_unchanged():
    image = np.random.default_rng(2).random((2, 3, 12, 12))
    out = tta_predict(image, lambda x: x[:, :1] * 0.5)
    np.testing.assert_allclose(out, image[:, :1] * 0.5, atol=1e-6)


def test_tta_averages_aligned_outputs():
    # a model reporting its input's top-left value everywhere sees each corner once per transform pair
    image = np.zeros((1, 1, 4, 4))
    image[..., 0, 0], image[..., 0, 3], image[..., 3, 0], image[..., 3, 3] = 1, 2, 3, 4
    out = tta_predict(image, lambda x: np.full_like(x, x[..., 0, 0].item()))
    seen = [fwd(image)[0, 0, 0, 0] for _, fwd, _ in TTA_TRANSFORMS]
    assert out[0, 0, 0, 0] == pytest.approx(np.mean(seen))


def test_tta_transforms_are_inverse_pairs():
    a = np.arange(2 * 25).reshape(2, 5, 5)
    names = [n for n, _, _ in TTA_TRANSFORMS]
    assert names == ["identity", "hflip", "vflip", "rot90", "rot180", "rot270"]
    for _, fwd, inv in TTA_TRANSFORMS:
        np.testing.assert_array_equal(inv(fwd(a)), a)


def test_tta_needs_square_input():
    with pytest.raises(DimensionError):
        tta_predict(np.zeros((1, 3, 4, 6)), lambda x: x)


def test_ensemble_average():
    a, b = np.full((2, 2), 0.2), np.full((2, 2), 0.6)
    np.testing.assert_allclose(ensemble_average([a, b]), 0.4)
    with pytest.raises(ValueError):
        ensemble_average([])
    with pytest.raises(DimensionError):
        ensemble_average([a, np.zeros((3, 3))])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1, width=32), min_size=2, max_size=6), st.randoms())
def test_ensemble_is_order_free(values, rnd):
    maps = [np.full((3,), v, dtype=np.float32) for v in values]
    shuffled = list(maps)
    rnd.shuffle(shuffled)
    assert ensemble_average(maps).tobytes() == ensemble_average(shuffled).tobytes()


def test_threshold_grid():
    assert len(THRESHOLDS) == 99 and THRESHOLDS[0] == 0.01 and THRESHOLDS[-1] == 0.99


def test_select_threshold_picks_separating_value():
    probs = [np.array([0.1, 0.2, 0.7, 0.8])]
    gts = [np.array([0, 0, 1, 1])]
    t = select_threshold(probs, gts)
    assert 0.2 < t <= 0.7
    assert t == 0.5  # every separating threshold ties; the one nearest 0.5 wins


def test_select_threshold_tie_nearest_half():
    # any threshold in (0.3, 0.35] separates; 0.35 is nearest to 0.5
    probs = [np.array([0.3, 0.35])]
    gts = [np.array([0, 1])]
    assert select_threshold(probs, gts) == 0.35


def test_select_threshold_validation():
    with pytest.raises(ValueError):
        select_threshold([], [])
    with pytest.raises(ValueError):
        select_threshold([np.zeros(2)], [np.zeros(2)], metric="accuracy")


def test_zero_model_predicts_half():
    cfg = ModelConfig()
    params = zero_params(build_generator(cfg, seed=0))
    image = np.random.default_rng(3).random((1, 3, 32, 32)).astype(np.float32)
    out = predict_image(image, [params, params], cfg, tile=16, overlap=0.5, tta=True)
    assert out.shape == (1, 1, 32, 32)
    np.testing.assert_array_equal(out, 0.5)


def test_predict_image_tiled_matches_untiled_for_full_tile():
    cfg = ModelConfig()
    params = build_generator(cfg, seed=1)
    image = np.random.default_rng(4).random((1, 3, 32, 32)).astype(np.float32)
    a = predict_image(image, [params], cfg)
    b = predict_image(image, [params], cfg, tile=32)
    assert a.tobytes() == b.tobytes()
