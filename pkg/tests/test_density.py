import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import ks_2samp

from replaycl.density import (
    GmmModel,
    KdeModel,
    bandwidth_grid,
    density_from_dict,
    density_to_dict,
    gmm_fit_em,
    gmm_sample,
    gmm_score,
    gmm_select_and_fit,
    kde_log_likelihood,
    kde_sample,
    kde_select_and_fit,
    ks_two_sample,
)
from replaycl.errors import FormatError, InvalidInput

from oracles import gaussian_logpdf, kde_density_1d, ks_brute, mixture_avg_loglik

RIDGE = 1e-6


def three_clusters(seed, n=1000, d=10, gap=10.0):
    rng = np.random.default_rng(seed)
    means = np.zeros((3, d))
    for c in range(3):
        means[c, c] = gap
    comp = rng.integers(3, size=n)
    return rng.standard_normal((n, d)) + means[comp], means


# ----------------------------------------------------------------------- EM


def em_dataset(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(10, 60)), int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    centers = rng.standard_normal((k, d)) * 4
    return rng.standard_normal((n, d)) + centers[rng.integers(k, size=n)], k


@pytest.mark.parametrize("seed", range(10))
def test_em_log_likelihood_never_decreases(seed):
    x, k = em_dataset(seed)
    model = gmm_fit_em(x, k, seed=seed, tol=0.0, max_iter=60)
    assert np.all(np.diff(model.history) >= -1e-8)


def test_em_single_component_closed_form():
    x = np.random.default_rng(3).standard_normal((200, 3)) @ np.array([[2, 0, 0], [1, 1, 0], [0, 0.5, 3]])
    m = gmm_fit_em(x, 1)
    np.testing.assert_allclose(m.weights, [1.0], atol=1e-12)
    np.testing.assert_allclose(m.means[0], x.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(m.covariances[0] - RIDGE * np.eye(3), np.cov(x, rowvar=False, bias=True), atol=1e-9)


def test_em_recovers_two_clusters():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-5, 0.5, 1000), rng.normal(5, 0.5, 1000)])[:, None]
    m = gmm_fit_em(x, 2, seed=1)
    np.testing.assert_allclose(np.sort(m.means[:, 0]), [-5, 5], atol=0.2)


def test_em_invariants_on_simplex_and_pd():
    x, _ = three_clusters(0, n=300, d=3)
    m = gmm_fit_em(x, 4, seed=2)
    assert abs(m.weights.sum() - 1) < 1e-9 and np.all(m.weights >= 0)
    for c in m.covariances:
        np.testing.assert_allclose(c, c.T, atol=1e-9)
        np.linalg.cholesky(c)


def test_em_duplicate_rows_stay_regularized():
    x = np.repeat(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]]), 10, axis=0)
    m = gmm_fit_em(x, 3, seed=0)
    assert np.all(np.isfinite(m.history))


def test_em_errors():
    with pytest.raises(InvalidInput):
        gmm_fit_em(np.zeros((2, 1)), 3)
    with pytest.raises(InvalidInput):
        gmm_fit_em(np.zeros((2, 1)), 0)


# -------------------------------------------------------------------- score


def test_score_standard_normal_at_zero():
    m = GmmModel(np.array([1.0]), np.zeros((1, 1)), np.ones((1, 1, 1)))
    assert abs(gmm_score(m, np.zeros((1, 1))) - math.log(1 / math.sqrt(2 * math.pi))) < 1e-12


def test_score_identical_components_collapse():
    cov = np.array([[[2.0, 0.3], [0.3, 1.0]]])
    one = GmmModel(np.array([1.0]), np.array([[1.0, -1.0]]), cov)
    two = GmmModel(np.array([0.5, 0.5]), np.array([[1.0, -1.0]] * 2), np.repeat(cov, 2, axis=0))
    x = np.random.default_rng(0).standard_normal((50, 2))
    assert abs(gmm_score(one, x) - gmm_score(two, x)) < 1e-12


def test_score_matches_direct_density_oracle():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((3, 3))
    covs = np.stack([a @ a.T + np.eye(3), np.eye(3) * 0.5])
    m = GmmModel(np.array([0.3, 0.7]), rng.standard_normal((2, 3)), covs)
    x = rng.standard_normal((40, 3)) * 3
    assert abs(gmm_score(m, x) - mixture_avg_loglik(x, m.weights, m.means, m.covariances)) < 1e-10


def test_score_prefers_own_samples():
    m = GmmModel(np.array([1.0]), np.zeros((1, 2)), np.eye(2)[None])
    own = gmm_sample(m, 500, 0)
    assert gmm_score(m, own) >= gmm_score(m, own + 10.0)


def test_score_far_points_stay_finite():
    m = GmmModel(np.array([1.0]), np.zeros((1, 2)), np.eye(2)[None] * 1e-6)
    assert math.isfinite(gmm_score(m, np.full((1, 2), 1e4)))


def test_score_errors():
    m = GmmModel(np.array([1.0]), np.zeros((1, 2)), np.eye(2)[None])
    with pytest.raises(InvalidInput):
        gmm_score(m, np.zeros((3, 3)))
    with pytest.raises(InvalidInput):
        gmm_score(m, np.zeros((0, 2)))


# ---------------------------------------------------------------- selection


def test_selection_picks_argmax_with_smallest_ties():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((200, 2)) * 0.1
    m = gmm_select_and_fit(x[:150], x[150:], c_max=5)
    best = max(m.selection_scores.values())
    chosen = min(c for c, s in m.selection_scores.items() if s == best)
    assert m.n_components == chosen
    assert m.selection_scores[chosen] >= m.selection_scores[5]


def test_selection_three_clusters_close_to_truth():
    x, means = three_clusters(1)
    x_val, _ = three_clusters(2, n=300)
    m = gmm_select_and_fit(x, x_val, c_max=6, seed=0)
    truth = mixture_avg_loglik(x_val, [1 / 3] * 3, means, [np.eye(10)] * 3)
    assert abs(gmm_score(m, x_val) - truth) <= 0.01 * abs(truth)


def test_selection_c_max_one_is_closed_form():
    x = np.random.default_rng(5).standard_normal((50, 2))
    m = gmm_select_and_fit(x, x, c_max=1)
    np.testing.assert_allclose(m.means[0], x.mean(axis=0), atol=1e-9)
    assert list(m.selection_scores) == [1]


# ----------------------------------------------------------------- sampling


def test_gmm_sampling_boundaries_and_means():
    m = GmmModel(np.array([1.0]), np.zeros((1, 3)), np.eye(3)[None])
    assert gmm_sample(m, 0, 0).shape == (0, 3)
    s = gmm_sample(m, 50_000, 1)
    assert np.all(np.abs(s.mean(axis=0)) < 0.05)
    assert np.array_equal(gmm_sample(m, 10, 7), gmm_sample(m, 10, 7))


def test_gmm_degenerate_weights_sample_one_component():
    m = GmmModel(np.array([1.0, 0.0]), np.array([[0.0], [100.0]]), np.ones((2, 1, 1)) * 0.01)
    assert np.all(gmm_sample(m, 1000, 3) < 10)


# ---------------------------------------------------------------------- KDE


def test_kde_peak_value():
    m = KdeModel(1.0, np.zeros((1, 1)))
    assert abs(kde_log_likelihood(m, np.zeros((1, 1))) - math.log(1 / math.sqrt(2 * math.pi))) < 1e-12


def test_kde_matches_univariate_textbook_formula():
    rng = np.random.default_rng(0)
    centers = rng.standard_normal(30)
    grid = np.linspace(-4, 4, 41)
    m = KdeModel(0.3, centers[:, None])
    np.testing.assert_allclose(np.exp(m.log_density(grid[:, None])), kde_density_1d(grid, centers, 0.3), rtol=1e-10)


def test_kde_integrates_to_one():
    centers = np.random.default_rng(1).standard_normal(25) * 2
    m = KdeModel(0.2, centers[:, None])
    grid = np.linspace(-20, 20, 40_001)
    assert abs(np.trapezoid(np.exp(m.log_density(grid[:, None])), grid) - 1.0) < 1e-3


def test_kde_duplicated_centers_same_density():
    c = np.random.default_rng(2).standard_normal((10, 2))
    x = np.random.default_rng(3).standard_normal((5, 2))
    a = KdeModel(0.4, c).log_density(x)
    b = KdeModel(0.4, np.vstack([c, c])).log_density(x)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_kde_multivariate_matches_isotropic_gaussian_sum():
    rng = np.random.default_rng(6)
    c, x, h = rng.standard_normal((7, 3)), rng.standard_normal((4, 3)), 0.35
    dens = np.mean([np.exp(gaussian_logpdf(x, ci, h * h * np.eye(3))) for ci in c], axis=0)
    np.testing.assert_allclose(np.exp(KdeModel(h, c).log_density(x)), dens, rtol=1e-10)


def test_bandwidth_selection():
    assert bandwidth_grid(0.5) == [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5]
    x = np.random.default_rng(0).standard_normal((40, 2))
    assert kde_select_and_fit(x, x, h_max=0.05).bandwidth == 0.05
    m = kde_select_and_fit(x[:30], x[30:], h_max=0.5)
    assert m.selection_scores[m.bandwidth] == max(m.selection_scores.values())


def test_bandwidth_interior_optimum():
    rng = np.random.default_rng(0)
    x, v = rng.standard_normal((500, 2)), rng.standard_normal((500, 2))
    h = kde_select_and_fit(x, v, h_max=0.5).bandwidth
    assert 0.05 < h < 0.5


def test_kde_errors():
    with pytest.raises(InvalidInput):
        kde_select_and_fit(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(InvalidInput):
        kde_select_and_fit(np.zeros((3, 2)), np.zeros((3, 2)), h_max=0.01)
    with pytest.raises(InvalidInput):
        KdeModel(0.1, np.zeros((2, 2))).log_density(np.zeros((1, 3)))


def test_kde_sampling():
    c = np.array([[3.0, -1.0]])
    s = kde_sample(KdeModel(1e-9, c), 100, 0)
    assert np.all(np.abs(s - c) < 1e-6)
    assert kde_sample(KdeModel(0.1, c), 0, 0).shape == (0, 2)
    m = KdeModel(0.1, np.array([[-5.0], [5.0]]))
    assert ks_two_sample(kde_sample(m, 20_000, 1), kde_sample(m, 20_000, 2)).aggregate < 0.02


# ----------------------------------------------------------------------- KS


def test_ks_reference_cases():
    assert ks_two_sample(np.arange(5.0)[:, None], np.arange(5.0)[:, None]).aggregate == 0.0
    rng = np.random.default_rng(0)
    assert ks_two_sample(rng.random((30, 1)), 2 + rng.random((20, 1))).aggregate == 1.0
    r = ks_two_sample(np.array([[1.0], [2.0], [3.0]]), np.array([[1.5], [2.5], [3.5]]))
    assert r.aggregate == 1 / 3


# scipy's p-value path warns on tiny samples; only its statistic is used
@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 25), st.integers(1, 3)), elements=st.integers(-5, 5).map(float)),
       arrays(np.float64, st.tuples(st.integers(1, 25), st.integers(1, 3)), elements=st.integers(-5, 5).map(float)))
def test_ks_matches_oracles(a, b):
    d = min(a.shape[1], b.shape[1])
    a, b = a[:, :d], b[:, :d]
    r = ks_two_sample(a, b)
    for j in range(d):
        assert abs(r.per_feature_statistics[j] - ks_brute(a[:, j].tolist(), b[:, j].tolist())) < 1e-12
        assert abs(r.per_feature_statistics[j] - ks_2samp(a[:, j], b[:, j], method="asymp").statistic) < 1e-12
    assert abs(r.aggregate - r.per_feature_statistics.mean()) < 1e-15
    assert np.all((0 <= r.per_feature_statistics) & (r.per_feature_statistics <= 1))


def test_ks_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((50, 2)), rng.standard_normal((40, 2)) + 0.3
    r1 = ks_two_sample(a, b)
    r2 = ks_two_sample(np.exp(a) * 3 - 1, np.exp(b) * 3 - 1)
    np.testing.assert_allclose(r1.per_feature_statistics, r2.per_feature_statistics, atol=1e-15)


def test_ks_width_mismatch():
    with pytest.raises(InvalidInput):
        ks_two_sample(np.zeros((3, 2)), np.zeros((3, 1)))


# -------------------------------------------------------------- persistence


def test_density_round_trip():
    x = np.random.default_rng(0).standard_normal((60, 2))
    for model in (gmm_fit_em(x, 2), KdeModel(0.2, x)):
        back = density_from_dict(density_to_dict(model))
        np.testing.assert_array_equal(back.sample(5, 1), model.sample(5, 1))
    d = density_to_dict(KdeModel(0.2, x))
    assert np.array_equal(np.array(d["centers"]), x)
    with pytest.raises(FormatError):
        density_from_dict({**d, "version": 2})
    with pytest.raises(FormatError):
        density_from_dict({**d, "kind": "flow"})
