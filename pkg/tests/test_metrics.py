import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scout import metrics as M
from scout.tensor import DimensionError

EPS = np.finfo(float).eps


def random_fixture(seed, size=24):
    rng = np.random.default_rng(seed)
    gt = np.zeros((size, size))
    r0, c0 = rng.integers(2, size // 2, size=2)
    r1, c1 = r0 + rng.integers(4, size // 2), c0 + rng.integers(4, size // 2)
    gt[r0:r1, c0:c1] = 1.0
    pred = np.clip(gt * 0.7 + rng.uniform(0, 0.3, gt.shape), 0, 1)
    return pred, gt


# -- oracles ------------------------------------------------------------------


def matlab_round(x):
    return math.floor(x + 0.5)


def s_measure_oracle(pred, gt):
    """Line-by-line transliteration of the published structure-measure pseudocode."""
    gt = gt.astype(bool)
    y = gt.mean()
    if y == 0:
        return 1.0 - pred.mean()
    if y == 1:
        return pred.mean()

    def obj(p, g):
        vals = p[g]
        x = vals.mean()
        sigma_x = vals.std(ddof=1)
        return 2.0 * x / (x * x + 1.0 + sigma_x + EPS)

    fg = pred.copy()
    fg[~gt] = 0
    bg = 1.0 - pred
    bg[gt] = 0
    u = gt.mean()
    s_obj = u * obj(fg, gt) + (1 - u) * obj(bg, ~gt)

    rows, cols = gt.shape
    total = gt.sum()
    X = matlab_round(sum(gt[:, i - 1].sum() * i for i in range(1, cols + 1)) / total)
    Y = matlab_round(sum(gt[j - 1, :].sum() * j for j in range(1, rows + 1)) / total)
    area = rows * cols
    quads = [
        (gt[:Y, :X], pred[:Y, :X], X * Y / area),
        (gt[:Y, X:], pred[:Y, X:], (cols - X) * Y / area),
        (gt[Y:, :X], pred[Y:, :X], X * (rows - Y) / area),
    ]
    w4 = 1.0 - sum(q[2] for q in quads)
    quads.append((gt[Y:, X:], pred[Y:, X:], w4))

    def qssim(p, g):
        g = g.astype(float)
        n = p.size
        x, yy = p.mean(), g.mean()
        sx = ((p - x) ** 2).sum() / (n - 1 + EPS)
        sy = ((g - yy) ** 2).sum() / (n - 1 + EPS)
        sxy = ((p - x) * (g - yy)).sum() / (n - 1 + EPS)
        a = 4 * x * yy * sxy
        b = (x * x + yy * yy) * (sx + sy)
        if a != 0:
            return a / (b + EPS)
        return 1.0 if b == 0 else 0.0

    s_reg = sum(w * qssim(p, g) for g, p, w in quads)
    q = 0.5 * s_obj + 0.5 * s_reg
    return max(q, 0.0)


def f_curve_oracle(pred, gt, beta2=0.3):
    out = []
    for i in range(256):
        t = (i + 1) / 256
        tp = fp = fn = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            b = p >= t
            tp += b and g == 1
            fp += b and g == 0
            fn += (not b) and g == 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        out.append((1 + beta2) * prec * rec / (beta2 * prec + rec) if prec + rec else 0.0)
    return np.array(out)


def e_curve_oracle(pred, gt):
    out = []
    n = gt.size
    for i in range(256):
        fm = (pred >= (i + 1) / 256).astype(float)
        if gt.sum() == 0:
            enh = 1.0 - fm
        elif gt.sum() == n:
            enh = fm
        else:
            a, b = fm - fm.mean(), gt - gt.mean()
            align = 2 * a * b / (a * a + b * b + EPS)
            enh = (align + 1) ** 2 / 4
        out.append(enh.sum() / n)
    return np.array(out)


def weighted_f_oracle(pred, gt, beta2=1.0):
    """Brute-force nearest-foreground search and explicit 7x7 correlation."""
    g = gt.astype(bool)
    h, w = g.shape
    fg = np.argwhere(g)
    err = np.abs(pred - gt)
    et = err.copy()
    dist = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            if not g[i, j]:
                d = np.hypot(fg[:, 0] - i, fg[:, 1] - j)
                k = np.argmin(d)
                dist[i, j] = d[k]
                et[i, j] = err[fg[k, 0], fg[k, 1]]
    r = np.arange(7) - 3
    ker = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / 50.0)
    ker /= ker.sum()
    pad = np.pad(et, 3)
    ea = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            ea[i, j] = (pad[i : i + 7, j : j + 7] * ker).sum()
    mn = np.where(g & (ea < err), ea, err)
    b = np.where(g, 1.0, 2.0 - np.exp(np.log(0.5) / 5 * dist))
    ew = mn * b
    tpw = g.sum() - ew[g].sum()
    fpw = ew[~g].sum()
    rec = 1 - ew[g].mean()
    prec = tpw / (EPS + tpw + fpw)
    return (1 + beta2) * rec * prec / (EPS + rec + beta2 * prec)


# -- mae / ssim -----------------------------------------------------------------


def test_mae_basic():
    z, o = np.zeros((4, 4)), np.ones((4, 4))
    assert M.mae(z, z) == 0.0
    assert M.mae(z, o) == 1.0


def test_mae_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    s = 0.0
    for i in range(16):
        for j in range(16):
            s += abs(a[i, j] - b[i, j])
    assert M.mae(a, b) == pytest.approx(s / 256, abs=1e-12)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        M.mae(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(DimensionError):
        M.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    assert M.ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert M.ssim(a, b) == pytest.approx(M.ssim(b, a), abs=1e-15)


def test_ssim_constant_patches():
    c1, c2 = 0.01**2, 0.03**2
    # constant patches: zero variances, means 0 and 1
    oracle = ((2 * 0 * 1 + c1) * (0 + c2)) / ((0**2 + 1**2 + c1) * (0 + 0 + c2))
    assert M.ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(oracle, abs=1e-12)


# -- S-measure ------------------------------------------------------------------


def test_s_measure_exact_match():
    _, gt = random_fixture(3)
    assert M.s_measure(gt, gt) == pytest.approx(1.0, abs=1e-9)


def test_s_measure_degenerate():
    z = np.zeros((8, 8))
    assert M.s_measure(z, z) == 1.0
    p = np.full((8, 8), 0.25)
    assert M.s_measure(p, z) == pytest.approx(0.75)
    assert M.s_measure(p, np.ones((8, 8))) == pytest.approx(0.25)


def test_s_measure_transliteration_32():
    rng = np.random.default_rng(42)
    yy, xx = np.mgrid[0:32, 0:32]
    gt = (((yy - 13.3) ** 2 / 60 + (xx - 18.6) ** 2 / 30) < 1).astype(float)
    pred = np.clip(0.6 * gt + rng.uniform(0, 0.4, gt.shape), 0, 1)
    assert M.s_measure(pred, gt) == pytest.approx(s_measure_oracle(pred, gt), abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_s_measure_random_oracle(seed):
    pred, gt = random_fixture(seed, 20)
    assert M.s_measure(pred, gt) == pytest.approx(s_measure_oracle(pred, gt), abs=1e-9)


def test_non_binary_gt():
    with pytest.raises(M.NonBinaryGroundTruthError):
        M.s_measure(np.zeros((4, 4)), np.full((4, 4), 0.5))
    with pytest.raises(M.NonBinaryGroundTruthError):
        M.e_measure(np.zeros((4, 4)), np.full((4, 4), 0.5))


# -- E-measure ------------------------------------------------------------------


def test_e_measure_exact_match():
    _, gt = random_fixture(4)
    mean, mx = M.e_measure(gt, gt)
    assert mean == pytest.approx(1.0) and mx == pytest.approx(1.0)


def test_e_measure_inverse_low():
    _, gt = random_fixture(5)
    _, mx = M.e_measure(1.0 - gt, gt)
    assert mx < 0.25


@pytest.mark.parametrize("seed", range(3))
def test_e_measure_loop_oracle(seed):
    pred, gt = random_fixture(seed, 16)
    np.testing.assert_allclose(M.e_measure_curve(pred, gt), e_curve_oracle(pred, gt), atol=1e-12)


def test_e_measure_tiling_invariance():
    pred, gt = random_fixture(6, 16)
    big_p, big_g = np.kron(pred, np.ones((2, 2))), np.kron(gt, np.ones((2, 2)))
    np.testing.assert_allclose(M.e_measure(big_p, big_g), M.e_measure(pred, gt), atol=1e-12)


def test_e_measure_degenerate_gt():
    z = np.zeros((6, 6))
    assert M.e_measure(z, z) == (1.0, 1.0)
    assert M.e_measure(np.ones((6, 6)), np.ones((6, 6))) == (1.0, 1.0)


# -- F-measure ------------------------------------------------------------------


def test_f_measure_exact_match():
    _, gt = random_fixture(7)
    mean, weighted = M.f_measure(gt, gt)
    assert mean == pytest.approx(1.0) and weighted == pytest.approx(1.0, abs=1e-9)


def test_f_measure_half_ones_closed_form():
    gt = np.zeros((16, 16))
    gt[:, :8] = 1
    mean, _ = M.f_measure(np.ones((16, 16)), gt)
    assert mean == pytest.approx(1.3 * 0.5 / (0.3 * 0.5 + 1), abs=1e-12)
    assert mean == pytest.approx(0.5652, abs=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_f_curve_loop_oracle(seed):
    pred, gt = random_fixture(seed, 12)
    np.testing.assert_allclose(M.f_measure_curve(pred, gt), f_curve_oracle(pred, gt), atol=1e-9)


def test_weighted_f_oracle():
    rng = np.random.default_rng(8)
    gt = np.zeros((20, 20))
    gt[5:13, 6:15] = 1
    # constant error on the object makes nearest-pixel ties irrelevant
    pred = np.where(gt == 1, 0.8, rng.uniform(0, 0.6, gt.shape))
    assert M.weighted_f_measure(pred, gt) == pytest.approx(weighted_f_oracle(pred, gt), abs=1e-9)


def test_weighted_f_empty_gt():
    with pytest.raises(M.EmptyGroundTruthError):
        M.weighted_f_measure(np.zeros((8, 8)), np.zeros((8, 8)))


# -- reports and properties ---------------------------------------------------


def test_evaluate_perfect():
    _, gt = random_fixture(9)
    r = M.evaluate(gt, gt)
    assert r.mae == 0.0
    for v in (r.ssim, r.s_measure, r.e_measure_mean, r.e_measure_max, r.f_measure_mean, r.f_measure_weighted):
        assert v == pytest.approx(1.0, abs=1e-9)


def test_evaluate_composition():
    pred, gt = random_fixture(10)
    r = M.evaluate(pred, gt)
    assert r.mae == M.mae(pred, gt)
    assert r.ssim == M.ssim(pred, gt)
    assert r.s_measure == M.s_measure(pred, gt)
    assert (r.e_measure_mean, r.e_measure_max) == M.e_measure(pred, gt)
    assert (r.f_measure_mean, r.f_measure_weighted) == M.f_measure(pred, gt)


def test_mean_report_arithmetic():
    reps = [M.evaluate(*random_fixture(s)) for s in range(4)]
    mean = M.mean_report(reps)
    for k, v in mean.to_dict().items():
        assert v == pytest.approx(sum(getattr(r, k) for r in reps) / 4, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_report_ranges_and_flip(seed):
    pred, gt = random_fixture(seed, 16)
    r = M.evaluate(pred, gt)
    assert 0 <= r.mae <= 1 and -1 <= r.ssim <= 1
    for v in (r.s_measure, r.e_measure_mean, r.e_measure_max, r.f_measure_mean, r.f_measure_weighted):
        assert 0 <= v <= 1
    assert M.mae(pred, gt) == M.mae(gt, pred)
    fp, fg = pred[:, ::-1], gt[:, ::-1]
    assert M.mae(fp, fg) == pytest.approx(r.mae, abs=1e-12)
    assert M.ssim(fp, fg) == pytest.approx(r.ssim, abs=1e-12)
    np.testing.assert_allclose(M.e_measure(fp, fg), (r.e_measure_mean, r.e_measure_max), atol=1e-12)
    assert M.f_measure_curve(fp, fg).mean() == pytest.approx(r.f_measure_mean, abs=1e-12)


def test_s_measure_flip_near_invariant():
    # the reference centroid rounds to a pixel boundary, so a flipped image is
    # split into different quadrants and the region term shifts slightly
    for seed in range(10):
        pred, gt = random_fixture(seed, 20)
        a = M.s_measure(pred, gt)
        b = M.s_measure(pred[:, ::-1], gt[:, ::-1])
        assert b == pytest.approx(s_measure_oracle(pred[:, ::-1], gt[:, ::-1]), abs=1e-9)
        assert abs(a - b) < 0.05


def test_score_identity_is_one():
    rng = np.random.default_rng(12)
    a = rng.uniform(size=(16, 16))
    assert M.ssim(a, a) - M.mae(a, a) == pytest.approx(1.0, abs=1e-12)
