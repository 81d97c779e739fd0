import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import textured_image
from refpose.errors import InvalidInputError
from refpose.matching import (
    FeatureMap,
    MatchConfig,
    MatchSet,
    builtin_features,
    coarse_match,
    dual_softmax,
    fine_refine,
    fuse_features,
    match_images,
    mutual_nn_filter,
    similarity_matrix,
)

seeds = st.integers(0, 2**31 - 1)


def test_dual_softmax_two_by_two():
    P = dual_softmax(np.array([[2.0, 0.0], [0.0, 2.0]]))
    assert P[0, 0] == pytest.approx((np.e**2 / (np.e**2 + 1)) ** 2, abs=1e-12)
    assert P[0, 0] == pytest.approx(0.77580, abs=1e-4)


@given(seeds)
def test_dual_softmax_bounds_and_stability(seed):
    rng = np.random.default_rng(seed)
    S = rng.normal(scale=500.0, size=(6, 9))
    P = dual_softmax(S)
    assert np.all(np.isfinite(P)) and np.all(P >= 0) and np.all(P <= 1)
    assert np.all(P.sum(axis=1) <= 1 + 1e-12)


@given(seeds)
def test_mutual_matches_are_one_to_one_and_above_threshold(seed):
    rng = np.random.default_rng(seed)
    P = dual_softmax(rng.normal(scale=3.0, size=(12, 10)))
    m = mutual_nn_filter(P, 0.2)
    assert len(set(m.query_idx.tolist())) == len(m) == len(set(m.ref_idx.tolist()))
    assert np.all(m.conf >= 0.2)
    np.testing.assert_array_equal(m.conf, P[m.query_idx, m.ref_idx])


def test_mutual_filter_tie_goes_to_lowest_index():
    P = np.array([[0.5, 0.5], [0.1, 0.1]])
    m = mutual_nn_filter(P, 0.2)
    assert m.query_idx.tolist() == [0] and m.ref_idx.tolist() == [0]


def test_similarity_matrix_temperature_and_channels():
    a = FeatureMap(np.ones((2, 2, 3)), 8)
    b = FeatureMap(np.ones((1, 2, 3)), 8)
    S = similarity_matrix(a, b, 0.5)
    assert S.shape == (4, 2) and np.all(S == 6.0)
    with pytest.raises(InvalidInputError):
        similarity_matrix(a, FeatureMap(np.ones((2, 2, 4)), 8), 0.1)


def test_fuse_constant_depth_is_noop():
    rgb = FeatureMap(np.random.default_rng(0).normal(size=(3, 4, 5)), 8)
    out = fuse_features(rgb, FeatureMap(np.full((3, 4, 5), 2.0), 8))
    np.testing.assert_array_equal(out.data, rgb.data)


def test_fuse_shape_mismatch():
    with pytest.raises(InvalidInputError):
        fuse_features(FeatureMap(np.ones((2, 2, 3)), 8), FeatureMap(np.ones((2, 2, 3)), 2))


def test_feature_map_rejects_nan():
    with pytest.raises(InvalidInputError):
        FeatureMap(np.full((2, 2, 2), np.nan), 8)


def test_match_config_validation():
    with pytest.raises(InvalidInputError):
        MatchConfig(tau=0)
    with pytest.raises(InvalidInputError):
        MatchConfig(theta_c=1.0)
    with pytest.raises(InvalidInputError):
        MatchConfig(window=4)


def test_builtin_features_shapes_and_size_check():
    c, f = builtin_features(textured_image(64, 96, 0))
    assert c.grid == (8, 12) and c.stride == 8
    assert f.grid == (32, 48) and f.stride == 2
    with pytest.raises(InvalidInputError):
        builtin_features(textured_image(60, 96, 0))


def test_self_match_recovers_identity():
    img = textured_image(96, 128, 4)
    m = match_images(img, img)
    # the fine window cannot sit on the outermost reference cells
    assert len(m) + m.stats["dropped_boundary"] == 12 * 16
    assert len(m) >= 10 * 14
    np.testing.assert_allclose(m.query_xy, m.ref_xy, atol=0.5)


def test_fine_refine_tracks_subcell_shift():
    big = textured_image(96, 140, 9)
    a, b = big[:, :128], big[:, 6:134]  # 6 px: not a coarse-grid multiple
    ca, fa = builtin_features(a)
    cb, fb = builtin_features(b)
    cfg = MatchConfig()
    coarse = coarse_match(ca, cb, cfg)
    shifted = MatchSet(coarse.query_idx, coarse.ref_idx, coarse.conf, coarse.query_xy,
                       coarse.query_xy - [6.0, 0.0])
    fine = fine_refine(shifted, fa, fb, cfg)
    err = np.abs(fine.query_xy - fine.ref_xy - [6.0, 0.0])
    assert np.median(err) < 1.0


def test_match_set_roundtrip():
    m = MatchSet(np.array([0, 3]), np.array([1, 2]), np.array([0.5, 0.9]),
                 np.array([[0.0, 8.0], [16.0, 0.0]]), np.array([[1.5, 2.0], [3.0, 4.0]]))
    back = MatchSet.from_dict(m.to_dict())
    np.testing.assert_array_equal(back.ref_xy, m.ref_xy)
    np.testing.assert_array_equal(back.query_idx, m.query_idx)
