import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hart.attention import (AttentionParams, BoundingBox, SigmaPolynomial, attention_to_box, attention_to_boxes,
                            box_to_attention, boxes_to_attention, build_attention_matrix, extract_glimpse,
                            fit_sigma_polynomial, image_box)
from hart.autodiff import finite_diff_check
from hart.tracker import DEFAULT_SIGMA

from helpers import glimpse_oracle

SIGMA = SigmaPolynomial(DEFAULT_SIGMA)
TINY = SigmaPolynomial((0, 0, 0, 0, 0))   # clamps to the 0.1 px floor


def random_attention(rng, H, W):
    return np.array([rng.uniform(0, W - 1), rng.uniform(0, H - 1), rng.uniform(1, 1.5 * W), rng.uniform(1, 1.5 * H)])


# --- boxes and attention ------------------------------------------------------
def test_box_to_attention_definition():
    a = box_to_attention(BoundingBox(0, 0, 10, 10))
    assert (a.center_x, a.center_y, a.span_x, a.span_y) == (5, 5, 10, 10) and not a.clamped


def test_round_trip_exact_on_dyadic_boxes():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        x, y = rng.integers(-2000, 8000, size=2) / 64
        w, h = rng.integers(64, 8000, size=2) / 64
        b = BoundingBox(x, y, w, h)
        assert attention_to_box(box_to_attention(b)) == b


@settings(max_examples=300)
@given(st.floats(-500, 500), st.floats(-500, 500), st.floats(1, 500), st.floats(1, 500))
def test_round_trip_arbitrary_floats(x, y, w, h):
    back = attention_to_box(box_to_attention(BoundingBox(x, y, w, h))).to_array()
    np.testing.assert_allclose(back, [x, y, w, h], rtol=0, atol=1e-12 * (1 + abs(x) + abs(y) + w + h))


def test_degenerate_box_is_clamped_and_flagged(caplog):
    with caplog.at_level(logging.WARNING):
        a = box_to_attention(BoundingBox(3, 4, 0, 5))
    assert a.clamped and a.span_x == 1 and a.span_y == 5
    assert "clamping" in caplog.text


def test_tensor_conversions_match_scalar_ones():
    b = np.array([[1.0, 2.0, 3.0, 4.0], [-5.0, 0.5, 7.0, 1.0]])
    att = boxes_to_attention(b).data
    for row, a in zip(b, att):
        np.testing.assert_array_equal(box_to_attention(BoundingBox(*row)).to_array(), a)
    np.testing.assert_array_equal(attention_to_boxes(att).data, b)


def test_image_box_covers_all_pixels():
    assert image_box(96, 64) == BoundingBox(-0.5, -0.5, 64, 96)


def test_stride_derivation():
    assert AttentionParams(0, 0, 27, 54).stride(28, 28) == (1.0, 2.0)


# --- sigma polynomial ----------------------------------------------------------
def test_polynomial_evaluation():
    assert SigmaPolynomial((0, 0.5, 0, 0, 0))(2.0) == 1.0


def test_sigma_floor():
    assert SigmaPolynomial((0, 0.5, 0, 0, 0))(1e-9) == pytest.approx(0.1)


def test_default_sigma_positive_and_monotone_over_operating_range():
    # strides from sub-pixel zoom up to a window twice a 96 px frame on a 28-point grid
    g = np.linspace(0.05, 2 * 96 / 27, 400)
    raw = np.polynomial.polynomial.polyval(g, SIGMA.coefficients)
    assert np.all(raw > 0) and np.all(np.diff(raw) >= 0)


def test_sigma_file_round_trip(tmp_path):
    SIGMA.save(tmp_path / "s.txt")
    assert len((tmp_path / "s.txt").read_text().splitlines()) == 5
    np.testing.assert_array_equal(SigmaPolynomial.load(tmp_path / "s.txt").coefficients, SIGMA.coefficients)


def test_sigma_file_wrong_length(tmp_path):
    (tmp_path / "s.txt").write_text("1\n2\n")
    with pytest.raises(ValueError, match="5 coefficient"):
        SigmaPolynomial.load(tmp_path / "s.txt")


# --- attention matrices -----------------------------------------------------------
def test_two_point_grid_with_tiny_sigma_is_one_hot_at_ends():
    L = 9
    A = build_attention_matrix(AttentionParams((L - 1) / 2, 0, L - 1, 1), "x", L, 2, TINY).data
    expected = np.zeros((2, L))
    expected[0, 0] = expected[1, -1] = 1
    np.testing.assert_allclose(A, expected, atol=1e-15)


def test_rows_sum_to_one_and_are_nonnegative():
    rng = np.random.default_rng(1)
    for _ in range(50):
        att = random_attention(rng, 8, 8)
        for axis in "xy":
            A = build_attention_matrix(att, axis, 8, 3, SIGMA).data
            assert A.shape == (3, 8) and np.all(A >= 0)
            np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)


def test_constant_rows_preserved():
    rng = np.random.default_rng(2)
    A = build_attention_matrix(random_attention(rng, 20, 20), "y", 20, 6, SIGMA).data
    np.testing.assert_allclose(A @ np.full(20, 3.7), 3.7, atol=1e-12)


def test_nonfinite_params_rejected():
    with pytest.raises(FloatingPointError):
        build_attention_matrix(np.array([np.nan, 0, 5, 5]), "x", 8, 3, SIGMA)


def test_short_grid_rejected():
    with pytest.raises(ValueError):
        build_attention_matrix(np.array([1.0, 1, 5, 5]), "x", 8, 1, SIGMA)


# --- glimpses ----------------------------------------------------------------------
def test_glimpse_matches_double_sum_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        img = rng.uniform(size=(8, 8, 1))
        att = random_attention(rng, 8, 8)
        got = extract_glimpse(img, att, 3, 3, SIGMA).data
        np.testing.assert_allclose(got, glimpse_oracle(img, att, 3, 3, SIGMA), atol=1e-10)


def test_constant_image_gives_constant_glimpse():
    g = extract_glimpse(np.full((12, 10, 3), 5.0), np.array([4.0, 3.0, 7.0, 20.0]), 5, 4, SIGMA).data
    np.testing.assert_allclose(g, 5.0, atol=1e-12)


def test_integer_aligned_unit_stride_is_a_crop():
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(20, 20, 3))
    # 6-point grid, span 5 -> stride 1, centre 9.5 puts the grid on pixels 7..12
    g = extract_glimpse(img, np.array([9.5, 10.5, 5.0, 5.0]), 6, 6, TINY).data
    np.testing.assert_allclose(g, img[8:14, 7:13], atol=1e-6)


def test_batched_glimpse_matches_single():
    rng = np.random.default_rng(5)
    imgs = rng.uniform(size=(3, 16, 12, 3))
    atts = np.stack([random_attention(rng, 16, 12) for _ in range(3)])
    batched = extract_glimpse(imgs, atts, 5, 4, SIGMA).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], extract_glimpse(imgs[i], atts[i], 5, 4, SIGMA).data, atol=1e-14)


def test_translation_equivariance_on_interior_windows():
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(60, 60, 1))
    att = np.array([25.0, 27.0, 12.0, 10.0])
    for dx, dy in [(3, 0), (0, 5), (-4, 2)]:
        shifted = np.roll(img, (dy, dx), axis=(0, 1))
        a = extract_glimpse(img, att, 7, 7, SIGMA).data
        b = extract_glimpse(shifted, att + [dx, dy, 0, 0], 7, 7, SIGMA).data
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_channel_and_size_guards():
    with pytest.raises(ValueError, match="channels"):
        extract_glimpse(np.zeros((8, 8, 2)), np.array([4.0, 4, 4, 4]), 3, 3, SIGMA)
    with pytest.raises(ValueError, match="exceeds"):
        extract_glimpse(np.zeros((4, 4, 1)), np.array([2.0, 2, 2, 2]), 17, 3, SIGMA)


def test_glimpse_gradient_wrt_attention():
    rng = np.random.default_rng(7)
    img = rng.uniform(size=(16, 14, 3))
    w = rng.normal(size=(5, 6, 3))
    for _ in range(5):
        att = random_attention(rng, 16, 14)
        res = finite_diff_check(lambda a: (extract_glimpse(img, a, 5, 6, SIGMA) * w).sum(), att)
        assert res < 1e-5 and res.checked == 4


def test_glimpse_gradient_wrt_image():
    rng = np.random.default_rng(8)
    img = rng.uniform(size=(6, 5, 1))
    w = rng.normal(size=(3, 4, 1))
    att = np.array([2.0, 2.5, 4.0, 3.0])
    assert finite_diff_check(lambda x: (extract_glimpse(x, att, 3, 4, SIGMA) * w).sum(), img) < 1e-6


# --- sigma regression ---------------------------------------------------------------
@pytest.fixture(scope="module")
def small_corpus():
    from scipy.ndimage import gaussian_filter
    rng = np.random.default_rng(9)
    return [gaussian_filter(rng.normal(size=(48, 48)), 1.0) for _ in range(2)]


@pytest.fixture(scope="module")
def small_fit(small_corpus):
    strides = np.linspace(0.3, 47 / 9, 20)
    return strides, fit_sigma_polynomial(strides, small_corpus, glimpse_size=10, windows_per_image=2,
                                         return_targets=True)


def test_fit_targets_monotone(small_fit):
    _, (poly, targets) = small_fit
    assert np.all(np.diff(targets) >= 0)


def test_fit_is_least_squares_on_quartic_basis(small_fit):
    strides, (poly, targets) = small_fit
    coef, *_ = np.linalg.lstsq(np.vander(strides, 5, increasing=True), targets, rcond=None)
    np.testing.assert_allclose(poly.coefficients, coef, atol=1e-10)


def test_fit_tracks_aliasing_scale(small_fit):
    # downsampling by g needs a filter roughly proportional to g
    strides, (poly, _) = small_fit
    assert poly(strides[-1]) > 2 * poly(strides[0])


def test_fit_needs_twenty_strides(small_corpus):
    with pytest.raises(ValueError, match="20"):
        fit_sigma_polynomial(np.linspace(0.5, 2, 10), small_corpus)


def test_fit_rejects_constant_corpus():
    with pytest.raises(ValueError, match="degenerate"):
        fit_sigma_polynomial(np.linspace(0.5, 2, 20), [np.ones((30, 30))])

