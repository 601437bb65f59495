import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from scout import tensor as T
from scout.adas import (
    DegenerateScoresError,
    kde_normalize,
    kmeans,
    kmeans_init,
    parse_mode,
    rank_reports,
    run_selection_round,
    score,
    score_samples,
    select,
    silverman_bandwidth,
)
from scout.augment import AugmenterParams
from scout.metrics import mae, ssim
from scout.segnet import SegConfig, SegModel

# scores on a 1e-6 grid; spreads near the float floor are covered by test_kde_degenerate
distinct_scores = st.lists(st.integers(-10**6, 10**6).map(lambda i: i / 1e6), min_size=3, max_size=30).filter(
    lambda v: len(set(v)) > 1
)


def kde_cdf_oracle(s, x):
    """Integrate the Gaussian KDE density numerically from far left up to x."""
    s = np.asarray(s, dtype=float)
    h = 1.06 * s.std(ddof=1) * len(s) ** -0.2
    grid = np.linspace(s.min() - 12 * h, x, 20001)
    dens = np.exp(-0.5 * ((grid[:, None] - s[None, :]) / h) ** 2).sum(axis=1) / (len(s) * h * math.sqrt(2 * math.pi))
    return np.trapezoid(dens, grid)


# -- scoring --------------------------------------------------------------------


def test_score_identical_is_one():
    p = np.random.default_rng(0).uniform(size=(16, 16))
    assert score(p, p) == pytest.approx(1.0, abs=1e-12)


def test_score_constant_maps():
    a, b = np.zeros((16, 16)), np.ones((16, 16))
    assert score(a, b) == pytest.approx(ssim(a, b) - 1.0, abs=1e-15)
    assert score(a, b) < 0


def test_score_composition():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(1, 16, 16)), rng.uniform(size=(1, 16, 16))
    assert score(a, b) == ssim(a[0], b[0]) - mae(a[0], b[0])


# -- normalization ----------------------------------------------------------------


def test_kde_three_points_middle():
    n = kde_normalize([-1.0, 0.0, 1.0])
    assert n[1] == pytest.approx(0.5, abs=1e-12)
    assert n[0] + n[2] == pytest.approx(1.0, abs=1e-12)


def test_silverman():
    s = np.array([0.1, 0.4, 0.2, 0.9])
    assert silverman_bandwidth(s) == pytest.approx(1.06 * np.std(s, ddof=1) * 4**-0.2)


def test_kde_matches_numeric_integration():
    s = np.random.default_rng(2).normal(0.3, 0.2, size=25)
    n = kde_normalize(s)
    oracle = np.array([kde_cdf_oracle(s, x) for x in s])
    np.testing.assert_allclose(n, oracle, atol=1e-6)


def test_kde_roughly_uniform_for_smooth_scores():
    s = np.random.default_rng(3).beta(2, 5, size=400)
    assert stats.kstest(kde_normalize(s), "uniform").statistic < 0.1


def test_kde_degenerate():
    with pytest.raises(DegenerateScoresError):
        kde_normalize([0.3, 0.3, 0.3])
    with pytest.raises(DegenerateScoresError):
        kde_normalize([0.3])
    with pytest.raises(DegenerateScoresError):
        kde_normalize([0.0, 0.0, 1e-300])


@settings(max_examples=60, deadline=None)
@given(distinct_scores, st.integers(0, 1000))
def test_kde_monotone_and_permutation_equivariant(s, seed):
    s = np.array(s)
    n = kde_normalize(s)
    assert np.all((n > 0) & (n < 1))
    order = np.argsort(s, kind="stable")
    assert np.all(np.diff(n[order]) >= -1e-12)
    perm = np.random.default_rng(seed).permutation(len(s))
    np.testing.assert_allclose(kde_normalize(s[perm]), n[perm], atol=1e-12)


# -- selection --------------------------------------------------------------------


def brute_select(ids, norm, budget, center):
    """Sort by distance to the center, ties by id, take the first ``budget``."""
    pairs = sorted(zip(ids, norm), key=lambda p: (abs(p[1] - center), p[0]))
    return [p[0] for p in pairs[:budget]]


@pytest.mark.parametrize("center", [0.5, 0.2, 0.9])
def test_center_selection_brute_force(center):
    rng = np.random.default_rng(4)
    ids = [f"s{i:02d}" for i in range(30)]
    raw = rng.normal(size=30)
    norm = kde_normalize(raw)
    res = select(rank_reports(ids, raw, norm), 7, "center", center)
    assert res.selected == brute_select(ids, norm, 7, center)


def test_center_tie_break_by_id():
    ids = ["b", "a", "c", "d"]
    norm = [0.6, 0.4, 0.5, 0.9]
    res = select(rank_reports(ids, norm, norm), 3, "center")
    assert res.selected == ["c", "a", "b"]


def test_top_k_modes():
    ids = ["a", "b", "c", "d"]
    norm = [0.1, 0.9, 0.5, 0.7]
    reps = rank_reports(ids, norm, norm)
    assert select(reps, 2, "top_k_easy").selected == ["b", "d"]
    assert select(reps, 2, "top_k_hard").selected == ["a", "c"]
    assert [r.rank for r in reps] == [4, 1, 3, 2]


def test_parse_mode():
    assert parse_mode("center") == ("center", 0.5)
    assert parse_mode("center_0.3") == ("center", 0.3)
    with pytest.raises(ValueError):
        parse_mode("nearest")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 25), st.data())
def test_selection_partitions_pool(m, data):
    budget = data.draw(st.integers(0, m))
    mode = data.draw(st.sampled_from(["center", "top_k_easy", "top_k_hard", "random"]))
    rng = np.random.default_rng(m)
    ids = [f"id{i}" for i in range(m)]
    raw = rng.normal(size=m)
    norm = raw if m < 2 else kde_normalize(raw)
    res = select(rank_reports(ids, raw, norm), budget, mode)
    assert len(res.selected) == budget == len(set(res.selected))
    assert set(res.selected) | set(res.remaining) == set(ids)
    assert not set(res.selected) & set(res.remaining)
    assert sum(r.selected for r in res.reports) == budget


def test_budget_zero():
    reps = rank_reports(["a", "b"], [0.1, 0.2], [0.3, 0.7])
    res = select(reps, 0)
    assert res.selected == [] and res.remaining == ["a", "b"]


def test_random_mode_seeded():
    ids = [f"x{i}" for i in range(20)]
    reps = rank_reports(ids, [0.0] * 20, [0.5] * 20)
    a = select(reps, 5, "random", seed=3).selected
    assert a == select(reps, 5, "random", seed=3).selected
    assert a != select(reps, 5, "random", seed=4).selected


# -- cold start -------------------------------------------------------------------


def blobs(seed=5, per=10):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    return np.concatenate([c + rng.normal(0, 0.3, size=(per, 2)) for c in centers])


def test_kmeans_recovers_blobs():
    x = blobs()
    c, labels = kmeans(x, 3, seed=0)
    for b in range(3):
        assert len(set(labels[b * 10 : (b + 1) * 10])) == 1
    assert len(set(labels)) == 3


def test_kmeans_init_one_per_blob():
    x = blobs()
    picked = kmeans_init(x, 3, seed=1)
    assert sorted(int(p) // 10 for p in picked) == [0, 1, 2]
    assert picked == kmeans_init(x, 3, seed=1)


def test_kmeans_init_k_equals_m():
    x = np.random.default_rng(6).normal(size=(6, 3))
    ids = list("abcdef")
    assert sorted(kmeans_init(x, 6, seed=0, ids=ids)) == ids


def test_kmeans_init_duplicates_fall_back():
    x = np.zeros((4, 2))
    assert sorted(kmeans_init(x, 3, seed=0)) == ["0", "1", "2"]


def test_kmeans_init_errors():
    with pytest.raises(ValueError):
        kmeans_init(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        kmeans_init(np.zeros((3, 2)), 0)


# -- rounds -------------------------------------------------------------------------


def make_samples(n=6, size=16, seed=7):
    rng = np.random.default_rng(seed)
    return [(f"u{i}", rng.uniform(size=(3, size, size))) for i in range(n)]


def test_identical_models_uniform_fallback():
    model = SegModel(SegConfig(channels=(4, 8)), seed=0)
    res = run_selection_round(make_samples(), model, model, None, 2)
    assert all(r.raw_score == pytest.approx(1.0) for r in res.reports)
    assert all(r.norm_score == 0.5 for r in res.reports)
    assert res.selected == ["u0", "u1"]


def test_round_recomposes_from_parts():
    cfg = SegConfig(channels=(4, 8))
    teacher, student = SegModel(cfg, seed=1), SegModel(cfg, seed=2)
    samples = make_samples()
    p = AugmenterParams(brightness=0.1, angle=0.2)
    res = run_selection_round(samples, teacher, student, p, 3, "center", seed=0)
    raw = score_samples(samples, teacher, student, p)
    manual = select(rank_reports([s for s, _ in samples], raw, kde_normalize(raw)), 3, "center")
    assert res.selected == manual.selected
    assert [r.raw_score for r in res.reports] == raw


def test_scoring_batch_size_invariant():
    cfg = SegConfig(channels=(4, 8))
    teacher, student = SegModel(cfg, seed=1), SegModel(cfg, seed=2)
    samples = make_samples()
    a = score_samples(samples, teacher, student, batch_size=1)
    b = score_samples(samples, teacher, student, batch_size=4)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_budget_exceeds_pool():
    model = SegModel(SegConfig(channels=(4, 8)), seed=0)
    with pytest.raises(ValueError):
        run_selection_round(make_samples(3), model, model, None, 4)


def test_scoring_builds_no_graph():
    cfg = SegConfig(channels=(4, 8))
    teacher, student = SegModel(cfg, seed=1), SegModel(cfg, seed=2)
    seen = []

    def spy(model):
        def f(x):
            out = model(x)
            seen.append(out.requires_grad or T.grad_enabled())
            return out

        return f

    score_samples(make_samples(2), spy(teacher), spy(student))
    assert seen and not any(seen)
