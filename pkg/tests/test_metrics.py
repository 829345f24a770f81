"""Segmentation metrics and prompt/layer diagnostics."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import hmean

from mpotseg.metrics import (
    ConfusionAccumulator,
    MetricError,
    accumulate,
    class_iou,
    hiou,
    layer_alignment_strength,
    miou,
    pacc,
    prompt_dispersion,
)


def brute_counts(pred, gt, k):
    inter = np.zeros(k, dtype=int)
    union = np.zeros(k, dtype=int)
    for c in range(k):
        for p, g in zip(pred.ravel(), gt.ravel()):
            inter[c] += p == c and g == c
            union[c] += p == c or g == c
    return inter, union


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


class TestAccumulate:
    def test_perfect_prediction(self, rng):
        gt = rng.integers(0, 4, (8, 8))
        acc = accumulate(ConfusionAccumulator(4), gt, gt)
        np.testing.assert_array_equal(acc.intersection, acc.union)
        assert miou(acc) == 1.0 and pacc(acc) == 1.0

    def test_disjoint_maps(self):
        acc = accumulate(ConfusionAccumulator(3), np.zeros((4, 4), int), np.ones((4, 4), int))
        assert acc.intersection.sum() == 0
        assert pacc(acc) == 0.0

    def test_matches_brute_force(self, rng):
        for _ in range(10):
            pred, gt = rng.integers(0, 5, (8, 8)), rng.integers(0, 5, (8, 8))
            acc = accumulate(ConfusionAccumulator(5), pred, gt)
            inter, union = brute_counts(pred, gt, 5)
            np.testing.assert_array_equal(acc.intersection, inter)
            np.testing.assert_array_equal(acc.union, union)
            assert pacc(acc) == sum(p == g for p, g in zip(pred.ravel(), gt.ravel())) / 64

    def test_out_of_range(self):
        with pytest.raises(MetricError):
            accumulate(ConfusionAccumulator(2), np.array([0, 2]), np.array([0, 1]))
        with pytest.raises(MetricError):
            accumulate(ConfusionAccumulator(2), np.array([0, 1]), np.array([0, 1, 1]))

    @given(st.integers(0, 10**6))
    def test_order_independent_and_mergeable(self, seed):
        r = np.random.default_rng(seed)
        maps = [(r.integers(0, 4, 30), r.integers(0, 4, 30)) for _ in range(5)]
        fwd = ConfusionAccumulator(4)
        for p, g in maps:
            accumulate(fwd, p, g)
        rev = ConfusionAccumulator(4)
        for p, g in reversed(maps):
            accumulate(rev, p, g)
        parts = [accumulate(ConfusionAccumulator(4), p, g) for p, g in maps]
        merged = parts[0]
        for part in parts[1:]:
            merged = merged.merge(part)
        for other in (rev, merged):
            np.testing.assert_array_equal(fwd.intersection, other.intersection)
            np.testing.assert_array_equal(fwd.union, other.union)
            assert (fwd.correct, fwd.total) == (other.correct, other.total)
        assert np.all(fwd.intersection <= fwd.union)


class TestMiou:
    def test_half_and_full(self):
        acc = ConfusionAccumulator(2, np.array([1, 2]), np.array([2, 2]))
        assert miou(acc) == 0.75

    def test_zero_union_classes_are_skipped(self):
        acc = accumulate(ConfusionAccumulator(4), np.array([0, 1]), np.array([0, 1]))
        assert np.isnan(class_iou(acc)[3])
        assert miou(acc) == 1.0
        with pytest.raises(MetricError):
            miou(acc, [2, 3])
        with pytest.raises(MetricError):
            miou(acc, [])

    def test_matches_direct_mean(self, rng):
        pred, gt = rng.integers(0, 6, 200), rng.integers(0, 6, 200)
        acc = accumulate(ConfusionAccumulator(6), pred, gt)
        inter, union = brute_counts(pred, gt, 6)
        assert miou(acc, [1, 3, 4]) == pytest.approx(np.mean(inter[[1, 3, 4]] / union[[1, 3, 4]]), rel=1e-14)


class TestHiou:
    @pytest.mark.parametrize("s,u,want,tol", [(91.9, 90.9, 91.4, 0.05), (50.5, 72.5, 59.5, 0.05),
                                              (38.2, 59.2, 46.5, 0.15)])
    def test_reported_values(self, s, u, want, tol):
        assert abs(hiou(s, u) - want) <= tol

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_harmonic_mean_properties(self, s, u):
        if s + u == 0:
            with pytest.raises(MetricError):
                hiou(s, u)
            return
        h = hiou(s, u)
        assert min(s, u) - 1e-12 <= h <= max(s, u) + 1e-12
        assert h <= (s + u) / 2 + 1e-12
        if s > 1e-100 and u > 1e-100:  # scipy's reciprocal form overflows on subnormals
            assert h == pytest.approx(hmean([s, u]), rel=1e-12)
        assert hiou(s, s) == pytest.approx(s) if s > 0 else True


class TestPacc:
    def test_empty(self):
        with pytest.raises(MetricError):
            pacc(ConfusionAccumulator(3))


class TestDispersion:
    def test_identical_rows(self, rng):
        g = np.repeat(rng.standard_normal((3, 5)), 4, axis=0)
        assert prompt_dispersion(g, 4) == pytest.approx(0.0, abs=1e-14)

    def test_orthonormal_rows(self):
        assert prompt_dispersion(np.vstack([np.eye(4), np.eye(4)[::-1]]), 4) == pytest.approx(1.0)

    def test_matches_double_loop(self, rng):
        g = rng.standard_normal((12, 6))
        total = []
        for k in range(3):
            rows = g[4 * k : 4 * k + 4]
            d = [1 - rows[i] @ rows[j] / np.linalg.norm(rows[i]) / np.linalg.norm(rows[j])
                 for i in range(4) for j in range(i + 1, 4)]
            total.append(np.mean(d))
        assert prompt_dispersion(g, 4) == pytest.approx(np.mean(total), rel=1e-12)

    @given(st.integers(0, 10**6))
    def test_rotation_invariance(self, seed):
        r = np.random.default_rng(seed)
        g = r.standard_normal((8, 5))
        q = random_orthogonal(r, 5)
        assert prompt_dispersion(g @ q, 4) == pytest.approx(prompt_dispersion(g, 4), abs=1e-12)
        assert 0.0 <= prompt_dispersion(g, 4) <= 2.0

    def test_errors(self, rng):
        with pytest.raises(MetricError):
            prompt_dispersion(rng.standard_normal((4, 3)), 1)
        with pytest.raises(MetricError):
            prompt_dispersion(rng.standard_normal((5, 3)), 2)


class TestLayerAlignment:
    def test_examples(self, rng):
        s = np.zeros((3, 6, 8))
        s[:, :, 4:] = 1.0
        assert layer_alignment_strength(s, 1, 4) == [1.0, 1.0, 1.0]
        assert layer_alignment_strength(s, 0, 4) == [0.0, 0.0, 0.0]
        s = rng.uniform(-1, 1, (2, 5, 6))
        got = layer_alignment_strength(s, 2, 2)
        for i in range(2):
            vals = [s[i, m, c] for m in range(5) for c in (4, 5)]
            assert got[i] == pytest.approx(sum(vals) / len(vals), rel=1e-12)
        with pytest.raises(MetricError):
            layer_alignment_strength(s, 3, 2)
