"""Metric oracles: every instrument is checked against an independent
implementation (direct windowed formula, LP transport, exact enumeration,
hand-computed tables) before anything downstream relies on it."""

import math
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import linprog

from cfd2bmode import metrics
from cfd2bmode.errors import ConfigError, GeometryError


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------

def ssim_bruteforce(x, y):
    """Textbook SSIM: per-window Gaussian-weighted moments, no filtering tricks."""
    size, sigma = 11, 1.5
    coords = np.arange(size) - 5
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    wx = sliding_window_view(x, (size, size))
    wy = sliding_window_view(y, (size, size))
    mu_x = (wx * w).sum(axis=(-2, -1))
    mu_y = (wy * w).sum(axis=(-2, -1))
    var_x = (wx ** 2 * w).sum(axis=(-2, -1)) - mu_x ** 2
    var_y = (wy ** 2 * w).sum(axis=(-2, -1)) - mu_y ** 2
    cov = (wx * wy * w).sum(axis=(-2, -1)) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / \
               ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(ssim_map.mean())


def wasserstein_lp(a, b):
    """Optimal transport between empirical distributions via linear programming."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = len(a), len(b)
    cost = np.abs(a[:, None] - b[None, :]).ravel()
    # Marginal constraints: rows sum to 1/na, columns to 1/nb.
    a_eq = []
    b_eq = []
    for i in range(na):
        row = np.zeros(na * nb)
        row[i * nb:(i + 1) * nb] = 1
        a_eq.append(row)
        b_eq.append(1.0 / na)
    for j in range(nb):
        col = np.zeros(na * nb)
        col[j::nb] = 1
        a_eq.append(col)
        b_eq.append(1.0 / nb)
    res = linprog(cost, A_eq=np.array(a_eq), b_eq=np.array(b_eq), method="highs")
    assert res.success
    return float(res.fun)


def mwu_exact_oracle(a, b):
    """Exact two-sided permutation p for the U statistic, in exact arithmetic."""
    pooled = list(a) + list(b)
    n1 = len(a)
    order = sorted(range(len(pooled)), key=lambda i: pooled[i])
    ranks = [Fraction(0)] * len(pooled)
    i = 0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and pooled[order[j + 1]] == pooled[order[i]]:
            j += 1
        r = Fraction(i + j, 2) + 1
        for k in range(i, j + 1):
            ranks[order[k]] = r
        i = j + 1
    mu = Fraction(n1 * len(b), 2)

    def u_of(indices):
        return sum(ranks[i] for i in indices) - Fraction(n1 * (n1 + 1), 2)

    u_obs = u_of(range(n1))
    dev = abs(u_obs - mu)
    count = total = 0
    for idx in combinations(range(len(pooled)), n1):
        total += 1
        if abs(u_of(idx) - mu) >= dev:
            count += 1
    return float(u_obs), Fraction(count, total)


def ols_oracle(x, y):
    """Slope/intercept/R^2 via explicit normal equations."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    a = np.array([[len(x), x.sum()], [x.sum(), (x ** 2).sum()]])
    b = np.array([y.sum(), (x * y).sum()])
    intercept, slope = np.linalg.solve(a, b)
    pred = intercept + slope * x
    r2 = 1 - ((y - pred) ** 2).sum() / ((y - y.mean()) ** 2).sum()
    return slope, intercept, r2


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

class TestSsim:
    def test_identity(self):
        rng = np.random.default_rng(0)
        video = rng.random((10, 32, 32, 3))
        assert metrics.ssim_video(video, video) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_closed_form(self):
        a = np.zeros((1, 16, 16))
        b = np.ones((1, 16, 16))
        c1 = 0.01 ** 2
        assert metrics.ssim_video(a, b) == pytest.approx(c1 / (1 + c1), rel=1e-9)

    def test_against_bruteforce_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(5):
            x = rng.random((24, 24))
            y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
            assert metrics.ssim_frame(x, y) == pytest.approx(ssim_bruteforce(x, y), abs=1e-6)

    def test_symmetry_and_frame_permutation(self):
        rng = np.random.default_rng(1)
        a = rng.random((4, 20, 20, 3))
        b = rng.random((4, 20, 20, 3))
        assert metrics.ssim_video(a, b) == pytest.approx(metrics.ssim_video(b, a), abs=1e-12)
        perm = [2, 0, 3, 1]
        assert metrics.ssim_video(a[perm], b[perm]) == pytest.approx(
            metrics.ssim_video(a, b), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(GeometryError):
            metrics.ssim_video(np.zeros((2, 16, 16)), np.zeros((2, 18, 18)))


# ---------------------------------------------------------------------------
# FID
# ---------------------------------------------------------------------------

class TestFid:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(64, 12))
        assert metrics.fid(feats, feats) == pytest.approx(0.0, abs=1e-6)

    def test_gaussian_mean_shift(self):
        rng = np.random.default_rng(4)
        dim, n, shift = 6, 10_000, 2.5
        a = rng.normal(size=(n, dim))
        b = rng.normal(size=(n, dim))
        b[:, 0] += shift
        assert metrics.fid(a, b) == pytest.approx(shift ** 2, rel=0.05)

    def test_orthogonal_rotation_invariance(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(200, 8))
        b = rng.normal(size=(200, 8)) + 0.5
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        assert metrics.fid(a @ q, b @ q) == pytest.approx(metrics.fid(a, b), abs=1e-6)

    def test_needs_two_vectors(self):
        with pytest.raises(ConfigError):
            metrics.fid(np.zeros((1, 4)), np.zeros((3, 4)))

    def test_embedder_deterministic(self):
        rng = np.random.default_rng(6)
        frame = rng.random((64, 64, 3))
        e1 = metrics.RandomConvEmbedder().embed_frame(frame)
        e2 = metrics.RandomConvEmbedder().embed_frame(frame)
        assert np.array_equal(e1, e2)
        assert e1.shape == (192,)


# ---------------------------------------------------------------------------
# Wasserstein-1
# ---------------------------------------------------------------------------

class TestWasserstein:
    def test_trivial_cases(self):
        assert metrics.wasserstein1([0, 1], [0, 1]) == 0.0
        assert metrics.wasserstein1([0, 0], [1, 1]) == 1.0

    def test_against_lp_oracle_unequal_sizes(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            a = rng.random(int(rng.integers(2, 7)))
            b = rng.random(int(rng.integers(2, 7)))
            assert metrics.wasserstein1(a, b) == pytest.approx(wasserstein_lp(a, b), abs=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            metrics.wasserstein1([], [1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1, width=32), min_size=1, max_size=8),
           st.lists(st.floats(0, 1, width=32), min_size=1, max_size=8),
           st.lists(st.floats(0, 1, width=32), min_size=1, max_size=8))
    def test_metric_properties(self, a, b, c):
        dab = metrics.wasserstein1(a, b)
        dba = metrics.wasserstein1(b, a)
        assert dab == pytest.approx(dba, abs=1e-12)
        assert dab >= 0
        assert metrics.wasserstein1(a, a) == pytest.approx(0.0, abs=1e-12)
        assert dab <= metrics.wasserstein1(a, c) + metrics.wasserstein1(c, b) + 1e-9


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

class TestDice:
    def test_cases(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        a[:2] = 1
        assert metrics.dice(a, a) == 1.0
        b = np.zeros_like(a)
        b[2:] = 1
        assert metrics.dice(a, b) == 0.0
        # |A|=|B|=4, overlap 2 -> 0.5
        a2 = np.zeros((4, 4), dtype=np.uint8)
        b2 = np.zeros_like(a2)
        a2[0, :4] = 1
        b2[0, 2:4] = 1
        b2[1, :2] = 1
        assert metrics.dice(a2, b2) == 0.5
        assert metrics.dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(8)
        a = rng.random((16, 16)) > 0.5
        b = rng.random((16, 16)) > 0.5
        d = metrics.dice(a, b)
        assert d == metrics.dice(b, a)
        assert 0.0 <= d <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(GeometryError):
            metrics.dice(np.zeros((2, 2)), np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# Classification report
# ---------------------------------------------------------------------------

class TestClassificationReport:
    def test_majority_vote(self):
        preds = [["A4C"] * 6 + ["PLAX"] * 4]
        rep = metrics.classification_report(preds, ["A4C"])
        assert rep.video_predictions == ["A4C"]

    def test_perfect_predictions(self):
        preds = [["A"] * 10, ["B"] * 10, ["C"] * 10]
        rep = metrics.classification_report(preds, ["A", "B", "C"])
        assert all(f == 1.0 for f in rep.per_class_f1.values())
        assert rep.overall_f1 == 1.0
        assert np.array_equal(rep.confusion, np.eye(3))

    def test_hand_computed_three_class(self):
        # Videos (true -> predicted): A->A, A->B, B->B, B->B, C->A, C->C
        preds = [["A"] * 10, ["B"] * 10, ["B"] * 10, ["B"] * 10, ["A"] * 10, ["C"] * 10]
        labels = ["A", "A", "B", "B", "C", "C"]
        rep = metrics.classification_report(preds, labels)
        # A: tp=1 fp=1 fn=1 -> f1 = 2/4 = 0.5
        # B: tp=2 fp=1 fn=0 -> f1 = 4/5 = 0.8
        # C: tp=1 fp=0 fn=1 -> f1 = 2/3
        assert rep.per_class_f1["A"] == pytest.approx(0.5)
        assert rep.per_class_f1["B"] == pytest.approx(0.8)
        assert rep.per_class_f1["C"] == pytest.approx(2 / 3)
        assert rep.overall_f1 == pytest.approx((2 * 0.5 + 2 * 0.8 + 2 * (2 / 3)) / 6)
        # Row-normalized confusion: A row = [.5, .5, 0]
        assert rep.confusion[0].tolist() == [0.5, 0.5, 0.0]

    def test_tie_breaks(self):
        # Tie without confidences -> lowest class in sort order
        rep = metrics.classification_report([["B"] * 5 + ["A"] * 5], ["A"])
        assert rep.video_predictions == ["A"]
        # Tie with confidences -> highest mean confidence
        conf = [[0.9] * 5 + [0.1] * 5]
        rep = metrics.classification_report([["B"] * 5 + ["A"] * 5], ["A"], conf)
        assert rep.video_predictions == ["B"]

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            metrics.classification_report([], [])


# ---------------------------------------------------------------------------
# Mann-Whitney U
# ---------------------------------------------------------------------------

class TestMwu:
    def test_identical_multisets(self):
        _, p = metrics.mwu([1, 2, 3], [1, 2, 3])
        assert p >= 0.99

    def test_textbook_case(self):
        u, p = metrics.mwu([1, 2], [3, 4])
        assert u == 0.0
        assert p == pytest.approx(1 / 3, abs=1e-12)

    def test_against_enumeration_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            na, nb = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            a = rng.integers(0, 5, size=na).tolist()  # ties likely
            b = rng.integers(0, 5, size=nb).tolist()
            u, p = metrics.mwu(a, b)
            u_ref, p_ref = mwu_exact_oracle(a, b)
            assert u == pytest.approx(u_ref, abs=1e-12)
            assert p == pytest.approx(float(p_ref), abs=1e-12)

    def test_all_values_identical(self):
        _, p = metrics.mwu([5, 5, 5], [5, 5])
        assert p == 1.0

    def test_large_sample_normal_path(self):
        rng = np.random.default_rng(10)
        a = rng.normal(0, 1, 50)
        b = rng.normal(2, 1, 60)
        _, p = metrics.mwu(a, b)
        assert p < 1e-6  # strong shift
        _, p_same = metrics.mwu(rng.normal(0, 1, 50), rng.normal(0, 1, 60))
        assert p_same > 0.01


# ---------------------------------------------------------------------------
# Fool rate
# ---------------------------------------------------------------------------

class TestFoolRate:
    def test_proportion(self):
        out = metrics.fool_rate_analysis({"v1": [True, True, False]}, {})
        assert out.fool_rates["v1"] == pytest.approx(2 / 3)

    def test_perfect_linear(self):
        ssim = {f"v{i}": 0.8 + 0.02 * i for i in range(6)}
        rates = {k: 5 * (v - 0.8) for k, v in ssim.items()}
        responses = {k: [True] * int(round(r * 10)) + [False] * (10 - int(round(r * 10)))
                     for k, r in rates.items()}
        out = metrics.fool_rate_analysis(responses, ssim)
        assert out.r_squared == pytest.approx(1.0, abs=1e-9)

    def test_against_ols_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.random(20)
        y = 0.3 * x + 0.1 + rng.normal(0, 0.01, 20)
        responses = {f"v{i}": [bool(yv > rng.random())] for i, yv in enumerate(y)}
        # Direct check of the regression path with many raters encoding y exactly:
        responses = {f"v{i}": [True] * int(round(yv * 1000)) + [False] * (1000 - int(round(yv * 1000)))
                     for i, yv in enumerate(np.clip(y, 0, 1))}
        ssim = {f"v{i}": xv for i, xv in enumerate(x)}
        out = metrics.fool_rate_analysis(responses, ssim)
        y_quant = np.array([round(yv * 1000) / 1000 for yv in np.clip(y, 0, 1)])
        slope, intercept, r2 = ols_oracle(x, y_quant)
        assert out.slope == pytest.approx(slope, abs=1e-9)
        assert out.intercept == pytest.approx(intercept, abs=1e-9)
        assert out.r_squared == pytest.approx(r2, abs=1e-9)

    def test_constant_ssim_undefined(self):
        out = metrics.fool_rate_analysis({"a": [True], "b": [False]}, {"a": 0.9, "b": 0.9})
        assert out.r_squared is None
        assert out.slope is None


# ---------------------------------------------------------------------------
# Report aggregation
# ---------------------------------------------------------------------------

def test_stratified_report_shapes():
    ssim_s = {"a": 0.95, "b": 0.90, "c": 0.85}
    ssim_c = {"a": 0.80, "b": 0.78, "c": 0.70}
    quart = {"a": "Q1", "b": "Q1", "c": "Q4"}
    strata = metrics.stratified_report(ssim_s, ssim_c, quart)
    assert set(strata) == {"Q1", "Q4", "OVERALL"}
    assert strata["OVERALL"]["synthetic"].count == 3
    assert strata["Q1"]["wasserstein"] == pytest.approx(
        metrics.wasserstein1([0.95, 0.90], [0.80, 0.78]))
