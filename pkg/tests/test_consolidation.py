"""Consolidation tests: layer stacking, filters vs oracles, interpolators."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgtedit.consolidation import (
    SmoothSpec,
    adaptive_smooth,
    apply_smoothing,
    bilateral_smooth,
    _bilateral_raw,
    _gaussian_raw,
    gaussian_smooth,
    interpolate_smooth,
    morph_close,
    morphological_smooth,
    peak_preserve,
    percentile_linear,
    stack_layers,
    FILTER_METHODS,
    INTERP_METHODS,
)
from mgtedit.model import AttentionRecord
from mgtedit.reference import ref_percentile, ref_smooth
from mgtedit.rng import substream

ALL_METHODS = FILTER_METHODS + INTERP_METHODS


def rand_map(seed, h=16, w=16):
    return substream(seed, 0xAA).random((h, w))


def make_record(layer, head, text_len, n_image, seed):
    t = text_len + 2 * n_image
    raw = substream(seed, layer, head).random((t, t))
    w = raw / raw.sum(axis=1, keepdims=True)
    return AttentionRecord(layer=layer, head=head, weights=w,
                           text_len=text_len, n_image=n_image)


class TestStackLayers:
    def test_uniform_rows_give_constant_map(self):
        t = 3 + 2 * 4
        w = np.full((t, t), 1.0 / t)
        rec = AttentionRecord(layer=0, head=0, weights=w, text_len=3, n_image=4)
        out = stack_layers([rec], layers=[0], rows=[0, 1], grid_shape=(2, 2))
        np.testing.assert_allclose(out, 1.0 / t)

    def test_two_layers_average(self):
        recs = [make_record(0, 0, 2, 9, seed=1), make_record(1, 0, 2, 9, seed=2)]
        a = stack_layers([recs[0]], [0], [0, 1], (3, 3))
        b = stack_layers([recs[1]], [1], [0, 1], (3, 3))
        both = stack_layers(recs, [0, 1], [0, 1], (3, 3))
        np.testing.assert_allclose(both, (a + b) / 2, atol=1e-12)

    def test_matches_naive_triple_loop(self):
        layers, heads, text_len, n = [0, 2], 3, 4, 9
        recs = [make_record(l, h, text_len, n, seed=10 + l * heads + h)
                for l in range(3) for h in range(heads)]
        rows = [1, 3]
        got = stack_layers(recs, layers, rows, (3, 3))
        acc = np.zeros(n)
        count = 0
        for r in recs:
            if r.layer not in layers:
                continue
            for m in rows:
                acc += r.weights[m, text_len:text_len + n]
                count += 1
        np.testing.assert_allclose(got, (acc / count).reshape(3, 3), atol=1e-6)

    def test_empty_sets_rejected(self):
        rec = make_record(0, 0, 2, 4, seed=1)
        with pytest.raises(ValueError, match="non-empty"):
            stack_layers([rec], [], [0], (2, 2))
        with pytest.raises(ValueError, match="non-empty"):
            stack_layers([rec], [0], [], (2, 2))

    def test_missing_layer_rejected(self):
        rec = make_record(0, 0, 2, 4, seed=1)
        with pytest.raises(ValueError, match="no attention records"):
            stack_layers([rec], [5], [0], (2, 2))

    def test_row_out_of_range_rejected(self):
        rec = make_record(0, 0, 2, 4, seed=1)
        with pytest.raises(ValueError, match="row index"):
            stack_layers([rec], [0], [2], (2, 2))


class TestOracleAgreement:
    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_matches_reference(self, method):
        for seed in range(3):
            amap = rand_map(50 + seed)
            strength = 3 if method in INTERP_METHODS else 0.5 + 0.4 * seed
            fast = apply_smoothing(amap, SmoothSpec(method, strength))
            slow = ref_smooth(amap, method, strength)
            np.testing.assert_allclose(fast, slow, atol=1e-6)

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_constant_map_fixed(self, method):
        amap = np.full((12, 12), 0.37)
        strength = 3 if method in INTERP_METHODS else 1.0
        out = apply_smoothing(amap, SmoothSpec(method, strength))
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_outputs_bounded(self, method):
        amap = rand_map(7)
        strength = 5 if method in INTERP_METHODS else 0.8
        out = apply_smoothing(amap, SmoothSpec(method, strength))
        assert np.isfinite(out).all()
        delta = 0.1 * (amap.max() - amap.min())
        if method in ("gaussian", "linear", "nearest", "morphological"):
            assert out.min() >= amap.min() - 1e-6
            assert out.max() <= amap.max() + 1e-6
        else:
            assert out.min() >= amap.min() - delta
            assert out.max() <= amap.max() + delta


class TestGaussian:
    def test_sigma_is_twice_strength(self):
        # A unit spike reproduces the kernel itself, pinning sigma.
        amap = np.zeros((15, 15))
        amap[7, 7] = 1.0
        out = _gaussian_raw(amap, sigma=2.0 * 0.5)
        sigma = 1.0
        radius = math.ceil(3 * sigma)
        kern = np.exp(-np.arange(-radius, radius + 1) ** 2 / (2 * sigma ** 2))
        kern2 = np.outer(kern, kern) / np.outer(kern, kern).sum()
        np.testing.assert_allclose(out[7 - radius:7 + radius + 1,
                                       7 - radius:7 + radius + 1], kern2, atol=1e-6)
        assert out[7 + radius + 1, 7] == 0.0

    def test_dc_gain_exactly_one(self):
        amap = np.full((9, 9), 3.0)
        np.testing.assert_allclose(_gaussian_raw(amap, 1.4), 3.0, atol=1e-12)


class TestBilateral:
    def test_huge_sigma_r_reduces_to_gaussian(self):
        amap = rand_map(9, 10, 10)
        near = _bilateral_raw(amap, sigma_s=1.0, sigma_r=1e9)
        gauss = _gaussian_raw(amap, sigma=1.0)
        np.testing.assert_allclose(near, gauss, atol=1e-6)

    def test_edges_move_less_than_gaussian(self):
        amap = np.zeros((10, 10))
        amap[:, 5:] = 1.0
        bil = _bilateral_raw(amap, sigma_s=1.0, sigma_r=0.1)
        gau = _gaussian_raw(amap, sigma=1.0)
        edge = np.abs(bil - amap)[:, 4:6]
        edge_g = np.abs(gau - amap)[:, 4:6]
        assert (edge < edge_g).all()

    def test_zero_range_map(self):
        amap = np.full((6, 6), 0.5)
        np.testing.assert_allclose(bilateral_smooth(amap, 1.0), 0.5, atol=1e-12)


class TestMorphological:
    def test_radius_rule(self):
        # strength 1.0 -> r = 5: a plateau passes through untouched while a
        # smaller radius would not fully bridge this gap pattern.
        assert max(3, math.floor(1.0 * 5.0)) == 5
        assert max(3, math.floor(0.1 * 5.0)) == 3

    def test_spike_removed_by_opening(self):
        amap = np.zeros((12, 12))
        amap[6, 6] = 5.0
        out = morphological_smooth(amap, 0.6)  # r = 3
        # Peak preservation blends 0.7 of the original spike back in; the
        # opened-closed surface underneath is flat zero.
        assert out[6, 6] == pytest.approx(0.7 * 5.0)
        out_no_peak = np.delete(out.reshape(-1), 6 * 12 + 6)
        np.testing.assert_allclose(out_no_peak, 0.0, atol=1e-12)

    def test_closing_idempotent_exactly(self):
        for seed in range(3):
            amap = rand_map(70 + seed, 12, 12)
            once = morph_close(amap, 3)
            twice = morph_close(once, 3)
            np.testing.assert_array_equal(once, twice)


class TestAdaptive:
    def test_weight_endpoints(self):
        # Flat region (minimum variance) takes the full gaussian; the most
        # textured cell keeps 30% of the smoothing only.
        amap = np.zeros((9, 9))
        amap[4, 4] = 1.0
        smooth = _gaussian_raw(amap, 2.0)
        out = adaptive_smooth(amap, 1.0)
        corner = (0, 0)  # far from the spike: local variance is minimal
        assert out[corner] == pytest.approx(smooth[corner], abs=1e-9)


class TestPeakPreserve:
    def test_identity_when_equal(self):
        amap = rand_map(3)
        np.testing.assert_allclose(peak_preserve(amap, amap.copy()), amap, atol=1e-12)

    def test_blend_value(self):
        amap = np.zeros((10, 10))
        amap[0, 0] = 1.0
        smoothed = np.zeros((10, 10))
        out = peak_preserve(amap, smoothed)
        assert out[0, 0] == pytest.approx(0.7)
        assert out[5, 5] == 0.0

    def test_percentile_matches_sort_oracle(self):
        for seed in range(5):
            vals = rand_map(80 + seed, 10, 10)
            assert percentile_linear(vals, 90.0) == pytest.approx(
                ref_percentile(vals, 90.0), abs=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_elementwise_oracle(self, seed):
        amap = rand_map(seed, 10, 10)
        smoothed = rand_map(seed + 1, 10, 10)
        got = peak_preserve(amap, smoothed)
        p90 = ref_percentile(amap, 90.0)
        for y in range(10):
            for x in range(10):
                if amap[y, x] > p90:
                    want = 0.7 * amap[y, x] + 0.3 * smoothed[y, x]
                else:
                    want = smoothed[y, x]
                assert got[y, x] == pytest.approx(want, abs=1e-9)


class TestInterpolators:
    def test_nearest_k1_identity(self):
        amap = rand_map(1)
        out = interpolate_smooth(amap, "nearest", 1)
        np.testing.assert_array_equal(out, amap)

    def test_linear_matches_brute_force(self):
        amap = rand_map(2, 4, 4)
        got = interpolate_smooth(amap, "linear", 3)
        want = ref_smooth(amap, "linear", 3)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_cubic_matches_spline_oracle(self):
        amap = rand_map(6, 6, 6)
        np.testing.assert_allclose(interpolate_smooth(amap, "cubic", 5),
                                   ref_smooth(amap, "cubic", 5), atol=1e-6)

    def test_rbf_size_limit(self):
        big = np.zeros((65, 65))
        with pytest.raises(ValueError, match="rbf size limit"):
            interpolate_smooth(big, "rbf", 3)

    def test_even_factor_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            interpolate_smooth(rand_map(1), "linear", 2)
        with pytest.raises(ValueError, match="odd"):
            SmoothSpec("cubic", 4)

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError, match="unknown smoothing method"):
            SmoothSpec("median", 1.0)


class TestSpecValidation:
    def test_filter_strength_positive(self):
        with pytest.raises(ValueError, match="positive"):
            SmoothSpec("gaussian", 0.0)

    def test_map_validation(self):
        with pytest.raises(ValueError, match="finite"):
            apply_smoothing(np.array([[np.nan, 0.0]]), SmoothSpec("gaussian", 1.0))
        with pytest.raises(ValueError, match="finite"):
            apply_smoothing(np.array([[-1.0, 0.0]]), SmoothSpec("gaussian", 1.0))
        with pytest.raises(ValueError, match="2D"):
            apply_smoothing(np.zeros(4), SmoothSpec("gaussian", 1.0))
