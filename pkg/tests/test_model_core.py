import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from soundscape_hbm.model_core import (
    KroneckerCov,
    PrecisionModel,
    SplineBasis,
    ar1_covariance,
    ar1_crossprods,
    ar1_inner,
    ar1_logdet,
    ar1_precision,
    apply_ar1_precision,
    beta_logdensity,
    bspline_design,
    build_mean,
    inv_logit,
    kron_covariance,
    logit,
    precision_at,
)


# -- independent oracle: textbook Cox-de Boor recursion -----------------------

def cox_de_boor(x, knots, i, k):
    """B_{i,k}(x) by direct recursion, with the last span closed on the right."""
    if k == 0:
        left, right = knots[i], knots[i + 1]
        if left <= x < right:
            return 1.0
        last = np.flatnonzero(knots < knots[-1])[-1]
        return 1.0 if (x == knots[-1] and i == last) else 0.0
    out = 0.0
    d1 = knots[i + k] - knots[i]
    if d1 > 0:
        out += (x - knots[i]) / d1 * cox_de_boor(x, knots, i, k - 1)
    d2 = knots[i + k + 1] - knots[i + 1]
    if d2 > 0:
        out += (knots[i + k + 1] - x) / d2 * cox_de_boor(x, knots, i + 1, k - 1)
    return out


def lower_half_mass(logpdf, shape):
    """Integral of exp(logpdf) over (0, 1/2) with v = s**k, k large enough that a
    shape below 1 leaves a bounded integrand."""
    k = max(1, int(np.ceil(1.0 / shape)))
    g = lambda s: np.exp(logpdf(s**k)) * k * s ** (k - 1) if s > 0 else 0.0
    return integrate.quad(g, 0.0, 0.5 ** (1.0 / k), limit=400, epsabs=1e-12, epsrel=1e-12)[0]


def dense_ar1(sigma2, rho, n):
    return np.array([[sigma2 * rho ** abs(i - j) for j in range(n)] for i in range(n)])


class TestBetaDensity:
    GRID = [(mu, phi) for mu in (0.2, 0.5, 0.9) for phi in (2.0, 50.0, 5000.0)]

    @pytest.mark.parametrize("mu,phi", GRID)
    def test_integrates_to_one(self, mu, phi):
        # the upper half is the lower half of the reflected density
        total = lower_half_mass(lambda v: beta_logdensity(v, mu, phi), mu * phi) + lower_half_mass(
            lambda v: beta_logdensity(v, 1 - mu, phi), (1 - mu) * phi)
        assert abs(total - 1.0) < 1e-6

    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.5, 500.0))
    def test_reflection(self, v, mu, phi):
        assert abs(beta_logdensity(v, mu, phi) - beta_logdensity(1 - v, 1 - mu, phi)) < 1e-10

    def test_matches_scipy(self):
        v = np.linspace(0.05, 0.95, 7)
        ref = stats.beta.logpdf(v, 0.3 * 40, 0.7 * 40)
        np.testing.assert_allclose(beta_logdensity(v, 0.3, 40.0), ref, rtol=1e-12)

    def test_monte_carlo_mean(self):
        # draws by inverse-cdf from the implemented density on a fine grid
        v = np.linspace(1e-6, 1 - 1e-6, 200001)
        pdf = np.exp(beta_logdensity(v, 0.3, 100.0))
        cdf = np.cumsum(pdf)
        cdf /= cdf[-1]
        draws = np.interp(np.random.default_rng(3).uniform(size=10**6), cdf, v)
        se = np.sqrt(0.3 * 0.7 / 101 / 10**6)
        assert abs(draws.mean() - 0.3) < 3 * se + 1e-5

    def test_uniform_case_is_zero(self):
        assert beta_logdensity(0.37, 0.5, 2.0) == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.parametrize("v", [0.0, 1.0, -0.1, 1.5])
    def test_outside_support(self, v):
        with pytest.raises(ValueError, match="outside beta support"):
            beta_logdensity(v, 0.5, 10.0)

    def test_bad_shape(self):
        with pytest.raises(ValueError, match="shape parameters"):
            beta_logdensity(0.5, 0.5, -1.0)


class TestLink:
    def test_inverse_pair(self):
        z = np.linspace(-8, 8, 33)
        np.testing.assert_allclose(logit(inv_logit(z)), z, atol=1e-9)

    def test_extremes_stay_open(self):
        p = inv_logit(np.array([-1e4, 1e4]))
        assert 0 < p[0] < p[1] < 1

    def test_build_mean(self):
        assert build_mean(np.array([1.0, 2.0]), np.array([0.5, -0.25]), 0.0) == pytest.approx(0.5)
        assert build_mean(np.array([1.0]), np.array([0.0]), 1.0) == pytest.approx(inv_logit(1.0))


class TestSpline:
    def test_matches_cox_de_boor(self):
        b = SplineBasis((0.0, 10.0), (2.0, 3.5, 7.0), 7)
        x = np.concatenate([np.linspace(0, 10, 41), [2.0, 3.5, 7.0, 10.0]])
        got = b.basis(x)
        ref = np.array([[cox_de_boor(v, b.knots, i, 3) for i in range(got.shape[1])] for v in x])
        np.testing.assert_allclose(got, ref, atol=1e-10)

    @given(st.lists(st.floats(-5, 15), min_size=1, max_size=20))
    def test_partition_of_unity(self, xs):
        b = SplineBasis((0.0, 10.0), (4.0,), 5)
        np.testing.assert_allclose(b.basis(np.array(xs)).sum(axis=1), 1.0, atol=1e-12)

    def test_left_boundary(self):
        b = SplineBasis((0.0, 1.0), (0.5,), 5)
        row = b.basis(np.array([0.0]))[0]
        assert row[0] == pytest.approx(1.0) and np.allclose(row[1:], 0.0)

    def test_design_shape_and_rank(self, rng):
        x = rng.uniform(0, 1, 200)
        Z = bspline_design(x, 8)
        assert Z.shape == (200, 8)
        assert np.all(Z[:, 0] == 1.0)
        assert np.linalg.matrix_rank(Z) == 8

    def test_cubic_reproduced_exactly(self, rng):
        x = rng.uniform(-2, 3, 300)
        Z = bspline_design(x, 6)
        y = 0.5 * x**3 - x + 2
        coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
        np.testing.assert_allclose(Z @ coef, y, atol=1e-8)

    def test_clamped_outside(self):
        b = SplineBasis((0.0, 1.0), (0.5,), 5)
        np.testing.assert_array_equal(b.design(np.array([-3.0, 9.0])), b.design(np.array([0.0, 1.0])))

    def test_intercept_only(self):
        Z = bspline_design(np.arange(5.0), 1)
        np.testing.assert_array_equal(Z, np.ones((5, 1)))

    def test_knot_errors(self):
        with pytest.raises(ValueError):
            SplineBasis((0.0, 1.0), (), 5)
        with pytest.raises(ValueError):
            SplineBasis((0.0, 1.0), (2.0,), 5)
        with pytest.raises(ValueError, match="distinct"):
            SplineBasis.from_data(np.ones(10), 6)

    def test_roundtrip(self):
        b = SplineBasis.from_data(np.linspace(0, 1, 50), 8)
        assert SplineBasis.from_dict(b.to_dict()) == b


class TestAr1:
    def test_entries(self):
        for rho in (0.1, 0.7, 0.89, 0.99):
            np.testing.assert_array_equal(ar1_covariance(2.0, rho, 29), dense_ar1(2.0, rho, 29))

    def test_precision_inverts(self):
        for rho in (0.1, 0.5, 0.95):
            P = ar1_precision(1.7, rho, 29)
            np.testing.assert_allclose(P @ ar1_covariance(1.7, rho, 29), np.eye(29), atol=1e-9)

    def test_logdet(self):
        sign, ld = np.linalg.slogdet(dense_ar1(3.0, 0.89, 29))
        assert sign > 0 and ar1_logdet(0.89, 29, 3.0) == pytest.approx(ld, abs=1e-9)

    @given(st.floats(0.1, 0.98))
    @settings(max_examples=25)
    def test_apply_precision(self, rho):
        r = np.random.default_rng(1).standard_normal((4, 29))
        np.testing.assert_allclose(apply_ar1_precision(r, rho), r @ ar1_precision(1.0, rho, 29), atol=1e-9)

    def test_crossprod_quadratic_form(self, rng):
        w = rng.standard_normal((5, 3, 29))
        A = np.linalg.inv(np.array([[1.0, 0.2, 0.1], [0.2, 2.0, 0.3], [0.1, 0.3, 1.5]]))
        rho = 0.8
        Ri = ar1_precision(1.0, rho, 29)
        direct = sum(np.trace(A @ wj @ Ri @ wj.T) for wj in w)
        assert np.trace(A @ ar1_inner(ar1_crossprods(w), rho)) == pytest.approx(direct, rel=1e-10)


class TestKronecker:
    LAM = np.array([[1.2, 0.3, -0.2], [0.3, 0.8, 0.1], [-0.2, 0.1, 1.5]])

    def test_dense_layout(self):
        dense = KroneckerCov(self.LAM, 0.6).dense()
        assert dense.shape == (87, 87)
        assert dense[29 * 0 + 3, 29 * 1 + 5] == pytest.approx(self.LAM[0, 1] * 0.6**2)

    def test_logpdf_against_dense(self, rng):
        cov = kron_covariance(self.LAM, 0.89)
        big = np.kron(self.LAM, dense_ar1(1.0, 0.89, 29))
        w = rng.standard_normal((2, 3, 29))
        ref = sum(stats.multivariate_normal(np.zeros(87), big).logpdf(wj.ravel()) for wj in w)
        assert abs(cov.logpdf(w) - ref) < 1e-8

    def test_logdet(self):
        cov = KroneckerCov(self.LAM, 0.4)
        assert cov.logdet() == pytest.approx(np.linalg.slogdet(cov.dense())[1], abs=1e-8)

    def test_logdet_factorizes(self):
        cov = KroneckerCov(self.LAM, 0.89)
        ref = 29 * np.linalg.slogdet(self.LAM)[1] + 3 * np.linalg.slogdet(dense_ar1(1.0, 0.89, 29))[1]
        assert cov.logdet() == pytest.approx(ref, abs=1e-9)

    def test_identity_factor_is_block_diagonal(self):
        dense = KroneckerCov(np.eye(3), 0.5).dense()
        np.testing.assert_allclose(dense[:29, :29], dense_ar1(1.0, 0.5, 29))
        assert np.all(dense[:29, 29:] == 0)

    def test_not_pd(self):
        with pytest.raises(ValueError, match="positive definite"):
            KroneckerCov(np.diag([1.0, -1.0, 1.0]), 0.5)


class TestPrecision:
    def test_constant(self):
        assert precision_at(PrecisionModel("constant", {"phi": 7.0}), 3.0) == 7.0

    def test_split_threshold(self):
        pm = PrecisionModel("split", {"phi_l": 10.0, "phi_u": 99.0})
        np.testing.assert_array_equal(precision_at(pm, np.array([1.99, 2.0, 5.0])), [10.0, 99.0, 99.0])

    def test_exp(self):
        pm = PrecisionModel("exp", {"phi_1": 2.0, "phi_2": 3.0})
        assert precision_at(pm, 0.5) == pytest.approx(2.0 + 3.0 * np.exp(0.5))
