import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jetnormal.jet import (FitProblem, JetCoefficients, SingularFitError, check_order,
                           design_matrix, evaluate,
                           exponents, fit_system, monomial_row, n_coeffs, normal_from_jet,
                           normal_from_slopes, normal_jacobian, wls_fit)


def term_sum(beta, order, x, y):
    """Independent evaluation: explicit loop over degree then x power."""
    total, k = 0.0, 0
    for d in range(order + 1):
        for a in range(d, -1, -1):
            total += beta[k] * x ** a * y ** (d - a)
            k += 1
    return total


def weighted_orthogonality(problem, beta):
    """Cosine between the weighted residual and each weighted design column."""
    pts = problem.shifted
    m = design_matrix(problem.order, pts[:, 0], pts[:, 1])
    sw = np.sqrt(problem.weights)
    r = sw * (m @ beta - pts[:, 2])
    cols = sw[:, None] * m
    denom = np.linalg.norm(cols, axis=0) * max(np.linalg.norm(sw * pts[:, 2]), 1e-300)
    return np.max(np.abs(cols.T @ r) / denom)


def random_problem(r, order, n=None, noise=0.05):
    n = n or int(r.integers(n_coeffs(order) + 5, 60))
    xy = r.uniform(-1, 1, size=(n, 2)) * r.uniform(0.01, 10)
    beta = r.normal(size=n_coeffs(order))
    z = design_matrix(order, xy[:, 0], xy[:, 1]) @ beta + noise * r.normal(size=n)
    w = r.uniform(0.05, 2.0, size=n)
    return FitProblem(np.column_stack([xy, z]), order, w)


class TestMonomials:
    def test_ordering(self):
        assert exponents(2) == ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))

    def test_direct_rows(self):
        np.testing.assert_array_equal(monomial_row(1, 2, 3), [1, 2, 3])
        np.testing.assert_array_equal(monomial_row(2, 1, 2), [1, 1, 2, 1, 2, 4])
        row = monomial_row(3, 0, 0)
        assert row.shape == (10,)
        np.testing.assert_array_equal(row, np.eye(10)[0])

    @pytest.mark.parametrize("order", [0, 7])
    def test_bad_order(self, order):
        with pytest.raises(ValueError):
            check_order(order)
        with pytest.raises(ValueError):
            FitProblem(np.zeros((30, 3)), order)

    @given(st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_evaluate_matches_term_sum(self, order, seed):
        r = np.random.default_rng(seed)
        beta = r.normal(size=n_coeffs(order))
        x, y = r.uniform(-2, 2, size=2)
        assert evaluate(JetCoefficients(order, beta), x, y) == pytest.approx(
            term_sum(beta, order, x, y), rel=1e-12, abs=1e-12)

    def test_evaluate_examples(self):
        assert evaluate(JetCoefficients(1, [1, 2, 3]), 1.0, 1.0) == 6.0
        assert evaluate(JetCoefficients(2, [7, 1, 1, 1, 1, 1]), 0.0, 0.0) == 7.0


class TestWLSFit:
    def test_three_point_solve(self):
        pts = np.array([[0, 0, 1], [1, 0, 3], [0, 1, 4]], dtype=float)
        beta = wls_fit(FitProblem(pts, 1)).beta
        np.testing.assert_allclose(beta, [1, 2, 3], atol=1e-12)
        # oracle: plain 3x3 solve
        np.testing.assert_allclose(beta, np.linalg.solve(design_matrix(1, pts[:, 0], pts[:, 1]),
                                                         pts[:, 2]), atol=1e-12)

    def test_generator_recovery(self, rng):
        beta = rng.normal(size=10)
        xy = rng.uniform(-1, 1, size=(25, 2))
        z = design_matrix(3, xy[:, 0], xy[:, 1]) @ beta
        np.testing.assert_allclose(wls_fit(FitProblem(np.column_stack([xy, z]), 3)).beta, beta,
                                   atol=1e-8)

    def test_zero_weight_removes_point(self, rng):
        p = random_problem(rng, 2, 30)
        pts = p.points.copy()
        pts[4, 2] = 1e6
        w = p.weights.copy()
        w[4] = 0.0
        full = wls_fit(FitProblem(pts, 2, w)).beta
        drop = wls_fit(FitProblem(np.delete(pts, 4, 0), 2, np.delete(w, 4))).beta
        np.testing.assert_allclose(full, drop, rtol=1e-10, atol=1e-12)

    def test_offsets_are_added(self, rng):
        p = random_problem(rng, 2, 20)
        off = rng.normal(size=(20, 3)) * 0.01
        a = wls_fit(FitProblem(p.points, 2, p.weights, off)).beta
        b = wls_fit(FitProblem(p.points + off, 2, p.weights)).beta
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_too_few_points(self):
        with pytest.raises(SingularFitError):
            wls_fit(FitProblem(np.zeros((5, 3)) + [1, 1, 0], 2))

    def test_collinear_is_damped_not_fatal(self):
        # the ridge keeps a rank-deficient system factorisable
        x = np.linspace(-1, 1, 12)
        pts = np.column_stack([x, 2 * x, x ** 2])
        beta = wls_fit(FitProblem(pts, 2)).beta
        assert np.all(np.isfinite(beta))
        np.testing.assert_allclose(evaluate(JetCoefficients(2, beta), x, 2 * x), x ** 2, atol=1e-6)

    def test_points_on_axis_are_singular(self):
        pts = np.column_stack([np.zeros(6), np.zeros(6), np.arange(6.0)])
        with pytest.raises(SingularFitError):
            wls_fit(FitProblem(pts, 1))

    def test_steep_patch_is_well_conditioned(self, rng):
        # tall z extent must not shrink the in-plane scaling
        xy = rng.uniform(-1, 1, size=(40, 2))
        beta = rng.normal(size=10) * 100
        z = design_matrix(3, xy[:, 0], xy[:, 1]) @ beta
        system = fit_system(FitProblem(np.column_stack([xy, z]), 3))
        assert system.condition_number < 1e6
        np.testing.assert_allclose(system.coefficients.beta, beta, rtol=1e-9, atol=1e-9)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            FitProblem(np.zeros((4, 3)), 1, -np.ones(4))
        with pytest.raises(ValueError):
            FitProblem(np.zeros((4, 3)), 1, np.ones(3))

    @given(st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_residual_orthogonality(self, order, seed):
        p = random_problem(np.random.default_rng(seed), order)
        assert weighted_orthogonality(p, wls_fit(p).beta) < 1e-8

    @given(st.integers(1, 3), st.integers(0, 2**32 - 1),
           st.floats(1e-6, 1e6, allow_nan=False))
    def test_weight_scaling_invariance(self, order, seed, c):
        p = random_problem(np.random.default_rng(seed), order)
        a = wls_fit(p).beta
        b = wls_fit(FitProblem(p.points, order, c * p.weights)).beta
        np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-9 * np.max(np.abs(a)))

    @given(st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_duplicate_equals_double_weight(self, order, seed):
        r = np.random.default_rng(seed)
        p = random_problem(r, order)
        i = int(r.integers(len(p)))
        w2 = p.weights.copy()
        w2[i] *= 2
        a = wls_fit(FitProblem(p.points, order, w2)).beta
        b = wls_fit(FitProblem(np.vstack([p.points, p.points[i]]), order,
                               np.append(p.weights, p.weights[i]))).beta
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10 * np.max(np.abs(a)))

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_exact_recovery_lower_order_generator(self, k, n, seed):
        k = min(k, n)
        r = np.random.default_rng(seed)
        xy = r.uniform(-1, 1, size=(int(r.integers(n_coeffs(n) + 3, 40)), 2))
        gen = r.normal(size=n_coeffs(k))
        z = design_matrix(k, xy[:, 0], xy[:, 1]) @ gen
        fit = wls_fit(FitProblem(np.column_stack([xy, z]), n, r.uniform(0.1, 1, len(xy))))
        truth = normal_from_slopes(gen[1], gen[2])
        n_hat = normal_from_jet(fit)
        assert n_hat[2] > 0
        assert np.arctan2(np.linalg.norm(np.cross(n_hat, truth)), abs(n_hat @ truth)) < 1e-8

    def test_condition_number_finite(self, rng):
        system = fit_system(random_problem(rng, 3, 40))
        assert 1.0 <= system.condition_number < 1e12


class TestNormals:
    def test_examples(self):
        np.testing.assert_array_equal(normal_from_slopes(0, 0), [0, 0, 1])
        np.testing.assert_allclose(normal_from_slopes(1, 0), np.array([-1, 0, 1]) / np.sqrt(2))
        np.testing.assert_allclose(normal_from_slopes(1, 1), np.array([-1, -1, 1]) / np.sqrt(3))

    def test_uses_linear_terms_only(self):
        n = normal_from_jet(JetCoefficients(2, [5, 0.5, -0.25, 9, 9, 9]))
        np.testing.assert_allclose(n, normal_from_slopes(0.5, -0.25))

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_jacobian_matches_fd(self, b1, b2):
        h = 1e-6
        fd = np.column_stack([
            (normal_from_slopes(b1 + h, b2) - normal_from_slopes(b1 - h, b2)) / (2 * h),
            (normal_from_slopes(b1, b2 + h) - normal_from_slopes(b1, b2 - h)) / (2 * h)])
        np.testing.assert_allclose(normal_jacobian(b1, b2), fd, atol=1e-8)
