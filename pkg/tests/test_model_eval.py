import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from soundscape_hbm.gibbs import ModelSpec
from soundscape_hbm.model_eval import (
    FoldPlan,
    ScoreReport,
    compare_models,
    coverage,
    crps_empirical,
    elpd,
    kfold_validate,
    write_scores,
)

from conftest import quick


def crps_pairs_oracle(x, y):
    x = np.asarray(x, float)
    return np.mean(np.abs(x - y)) - 0.5 * np.mean(np.abs(x[:, None] - x[None, :]))


class TestCrps:
    def test_point_mass(self):
        assert crps_empirical([0.3], 0.7) == pytest.approx(0.4)
        assert crps_empirical([0.5, 0.5, 0.5], 0.5) == 0.0

    def test_two_point(self):
        # E|X-y| = 0.5, E|X-X'| = 0.5 -> 0.25
        assert crps_empirical([0.0, 1.0], 0.5) == pytest.approx(0.25)

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=40), st.floats(-5, 5))
    @settings(max_examples=60)
    def test_matches_pairs(self, xs, y):
        assert crps_empirical(xs, y) == pytest.approx(crps_pairs_oracle(xs, y), abs=1e-9)

    def test_uniform_limit(self):
        # U(0,1) at y: y^2 - y + 1/3
        x = (np.arange(20000) + 0.5) / 20000
        assert crps_empirical(x, 0.2) == pytest.approx(0.04 - 0.2 + 1 / 3, abs=1e-6)

    @given(st.floats(0.1, 10), st.floats(-3, 3))
    @settings(max_examples=30)
    def test_homogeneity(self, a, b):
        x = np.random.default_rng(1).normal(size=50)
        assert crps_empirical(a * x + b, a * 0.4 + b) == pytest.approx(a * crps_empirical(x, 0.4), rel=1e-9)

    def test_vectorized(self, rng):
        x = rng.normal(size=(4, 30))
        y = rng.normal(size=4)
        np.testing.assert_allclose(crps_empirical(x, y), [crps_pairs_oracle(x[i], y[i]) for i in range(4)])

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            crps_empirical(np.empty(0), 0.5)


class TestElpd:
    def test_against_naive_average(self, rng):
        mu = rng.uniform(0.1, 0.9, (30, 5))
        phi = rng.uniform(5, 50, (30, 1))
        y = rng.uniform(0.05, 0.95, 5)
        dens = stats.beta.pdf(y[None], mu * phi, (1 - mu) * phi)
        assert elpd(y, mu, phi) == pytest.approx(np.sum(np.log(dens.mean(axis=0))), rel=1e-10)

    def test_single_iteration(self):
        v = elpd(np.array([0.3]), np.array([[0.3]]), np.array([[20.0]]))
        assert v == pytest.approx(stats.beta.logpdf(0.3, 6.0, 14.0))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            elpd(np.array([1.0]), np.array([[0.5]]), np.array([[2.0]]))


class TestCoverage:
    def test_fraction(self):
        samples = np.tile(np.linspace(0, 1, 1001), (4, 1))
        assert coverage(samples, np.array([0.5, 0.01, 0.99, 0.975])) == 50.0


class TestFoldPlan:
    def test_partition(self):
        plan = FoldPlan.make((8, 3, 29), k=6, seed=2)
        assert plan.assignment.shape == (8, 3)
        sizes = plan.fold_sizes()
        assert sizes.sum() == 24 and sizes.max() - sizes.min() <= 1
        masks = sum(plan.test_mask(f, (8, 3, 29)).astype(int) for f in range(6))
        np.testing.assert_array_equal(masks, 1)

    def test_blocks_are_whole(self):
        plan = FoldPlan.make((5, 3, 29), k=3, seed=0)
        m = plan.test_mask(1, (5, 3, 29))
        assert np.all(m.all(axis=2) == m.any(axis=2))

    def test_per_minute(self):
        plan = FoldPlan.make((2, 3, 29), k=6, seed=0, per_minute=True)
        assert plan.assignment.shape == (2, 3, 29)

    def test_deterministic(self):
        a = FoldPlan.make((8, 3, 29), seed=9)
        b = FoldPlan.make((8, 3, 29), seed=9)
        np.testing.assert_array_equal(a.assignment, b.assignment)
        assert not np.array_equal(a.assignment, FoldPlan.make((8, 3, 29), seed=10).assignment)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            FoldPlan.make((1, 3, 29), k=6)


@pytest.fixture(scope="module")
def reports(small_data):
    data, _, _ = small_data
    s1 = quick(ModelSpec(1, 1), iterations=400, burn_in=200, thin=2, n_chains=1, seed=3)
    s2 = quick(ModelSpec(1, 2), iterations=400, burn_in=200, thin=2, n_chains=1, seed=4)
    plan = FoldPlan.make(data.shape, k=3, seed=1)
    first = compare_models({"m1": (s1, s2)}, data, plan)
    second = compare_models({"m1": (s1, s2)}, data, plan)
    return first, second, data


class TestKfold:
    def test_fold_too_small(self, small_data):
        data, _, _ = small_data
        one_site = data.masked(np.broadcast_to(np.arange(data.n_sites)[:, None, None] > 0, data.shape))
        plan = FoldPlan.make(data.shape, k=3, seed=0)
        with pytest.raises(ValueError, match="fold too small"):
            kfold_validate(quick(ModelSpec(1, 1)), quick(ModelSpec(1, 2)), one_site, plan)

    def test_deterministic(self, reports):
        a, b, _ = reports
        assert a[0].rows() == b[0].rows()

    def test_report_contents(self, reports, tmp_path):
        (r,), _, data = reports
        assert len(r.folds) == 3
        assert sum(f[4] for f in r.folds) == np.sum(~np.isnan(data.y))
        assert np.isfinite(r.total_elpd) and r.mean_crps > 0
        assert 0 <= r.coverage95 <= 100
        p = tmp_path / "scores.csv"
        write_scores(p, [r])
        assert len(p.read_text().splitlines()) == 1 + 4


class TestScoreReport:
    def test_rows(self):
        r = ScoreReport("x", [(0, -1.0, 0.1, 90.0, 10)], -1.0, 0.1, 90.0)
        assert r.rows()[-1] == ("x", "total", -1.0, 0.1, 90.0)
