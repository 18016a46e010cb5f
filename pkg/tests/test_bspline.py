import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from emiquant import bspline
from emiquant.bspline import Interpolator, KnotVector
from emiquant.errors import DegenerateFeature, DomainError, SingularSystem


def random_clamped(rng, degree, n_interior):
    interior = np.sort(rng.random(n_interior))
    return KnotVector(np.r_[np.zeros(degree + 1), interior, np.ones(degree + 1)], degree)


class TestKnotVector:
    def test_basis_count(self):
        kv = KnotVector([0, 0, 0, 0, 0.5, 1, 1, 1, 1], 3)
        assert kv.n_basis == 5 and kv.is_clamped and (kv.lo, kv.hi) == (0.0, 1.0)

    @pytest.mark.parametrize("knots,d", [([0, 1], 1), ([0, 2, 1, 3], 1), ([0, np.nan, 1], 0)])
    def test_invalid(self, knots, d):
        with pytest.raises(DomainError):
            KnotVector(knots, d)

    def test_unclamped(self):
        assert not KnotVector([0, 1, 2, 3, 4], 2).is_clamped


class TestBasis:
    def test_degree_zero_indicator(self):
        kv = KnotVector([0.0, 1.0, 2.0], 0)
        assert bspline.basis(0, kv, 0.5) == 1.0
        assert bspline.basis(0, kv, 1.5) == 0.0
        assert bspline.basis(1, kv, 1.5) == 1.0

    def test_clamped_cubic_left_endpoint(self):
        kv = KnotVector([0, 0, 0, 0, 1, 1, 1, 1], 3)
        assert [bspline.basis(j, kv, 0.0) for j in range(4)] == [1.0, 0.0, 0.0, 0.0]

    def test_quadratic_against_naive_recursion(self):
        knots = [0, 0, 0, 0.5, 1, 1, 1]
        kv = KnotVector(knots, 2)
        got = [bspline.basis(j, kv, 0.25) for j in range(4)]
        want = [oracles.bspline_naive(j, 2, knots, 0.25) for j in range(4)]
        assert np.max(np.abs(np.subtract(got, want))) <= 1e-15
        # hand expansion of the recursion at 0.25 with interior knot 0.5
        np.testing.assert_allclose(got, [0.25, 0.625, 0.125, 0.0], atol=1e-15)

    def test_lower_degree_on_same_knots(self):
        kv = KnotVector([0, 0, 0, 0.5, 1, 1, 1], 2)
        assert bspline.basis(1, kv, 0.25, degree=1) == pytest.approx(oracles.bspline_naive(1, 1, list(kv.knots), 0.25))

    @pytest.mark.parametrize("j", [-1, 4])
    def test_index_out_of_range(self, j):
        with pytest.raises(DomainError):
            bspline.basis(j, KnotVector([0, 0, 0, 0.5, 1, 1, 1], 2), 0.3)


class TestMakeClampedKnots:
    def test_no_interior(self):
        kv = bspline.make_clamped_knots(np.linspace(0, 1, 11), degree=3, n_interior=0)
        assert kv.knots.tolist() == [0, 0, 0, 0, 1, 1, 1, 1] and kv.n_basis == 4

    def test_single_interior_at_median(self):
        kv = bspline.make_clamped_knots([-2.0, -1.0, 0.0, 1.0, 2.0], degree=2, n_interior=1)
        assert kv.knots[3] == 0.0

    def test_constant_feature(self):
        with pytest.raises(DegenerateFeature):
            bspline.make_clamped_knots([3.0, 3.0, 3.0])

    def test_boundaries_match_data(self):
        v = np.random.default_rng(0).normal(size=50)
        kv = bspline.make_clamped_knots(v)
        assert kv.lo == v.min() and kv.hi == v.max() and kv.n_basis == 10


class TestDesignMatrix:
    @pytest.mark.parametrize("degree", [1, 2, 3])
    def test_matches_naive_oracle(self, degree):
        rng = np.random.default_rng(degree)
        kv = random_clamped(rng, degree, 5)
        x = np.r_[rng.random(60), 0.0, 1.0, kv.knots[degree + 2]]
        B = bspline.design_matrix(x, kv)
        ref = oracles.bspline_naive_matrix(x, degree, kv.knots)
        assert np.max(np.abs(B - ref)) <= 1e-12

    def test_left_boundary_row(self):
        kv = random_clamped(np.random.default_rng(1), 3, 4)
        row = bspline.design_matrix([0.0], kv)[0]
        assert row[0] == 1.0 and not np.any(row[1:])

    def test_right_boundary_row(self):
        kv = random_clamped(np.random.default_rng(1), 3, 4)
        row = bspline.design_matrix([1.0], kv)[0]
        assert row[-1] == 1.0 and not np.any(row[:-1])

    def test_out_of_range_rows_are_zero(self):
        kv = random_clamped(np.random.default_rng(1), 2, 3)
        assert not np.any(bspline.design_matrix([-0.1, 1.1], kv))

    def test_repeated_interior_knot(self):
        knots = [0, 0, 0, 0, 0.4, 0.4, 0.7, 1, 1, 1, 1]
        kv = KnotVector(knots, 3)
        x = np.linspace(0, 1, 51)
        assert np.max(np.abs(bspline.design_matrix(x, kv) - oracles.bspline_naive_matrix(x, 3, knots))) <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), degree=st.integers(0, 4), n_int=st.integers(0, 8))
    def test_partition_support_nonnegativity(self, seed, degree, n_int):
        rng = np.random.default_rng(seed)
        kv = random_clamped(rng, degree, n_int)
        x = np.r_[rng.random(200), 0.0, 1.0]
        B = bspline.design_matrix(x, kv)
        assert np.max(np.abs(B.sum(axis=1) - 1.0)) <= 1e-12
        assert np.all(B >= 0)
        t = kv.knots
        for j in range(kv.n_basis):
            outside = (x < t[j]) | (x > t[j + degree + 1])
            assert not np.any(B[outside, j])


class TestLocalBasis:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), degree=st.integers(1, 3), x=st.floats(0.0, 1.0))
    def test_matches_design_row(self, seed, degree, x):
        kv = random_clamped(np.random.default_rng(seed), degree, 6)
        first, vals = bspline.nonzero_basis(kv, x)
        row = np.zeros(kv.n_basis)
        row[first : first + degree + 1] = vals
        np.testing.assert_allclose(row, bspline.design_matrix([x], kv)[0], atol=1e-14)
        assert all(isinstance(v, float) for v in vals)


class TestNearestValue:
    def test_interior_and_ends(self):
        v = [0.0, 1.0, 3.0]
        assert bspline.nearest_value(v, 2.2) == 3.0
        assert bspline.nearest_value(v, -5) == 0.0
        assert bspline.nearest_value(v, 9) == 3.0

    def test_tie_goes_low(self):
        assert bspline.nearest_value([0.0, 1.0, 3.0], 2.0) == 1.0


def features_and_dims(seed, n=80, p=3, degree=3, n_interior=4):
    F = np.random.default_rng(seed).random((n, p))
    return F, bspline.knots_for_features(F, degree, n_interior)


class TestFitCoefficients:
    def test_constant_targets(self):
        F, dims = features_and_dims(0)
        t = bspline.fit_coefficients(F, np.full(len(F), 2.4), dims)
        resid = bspline.stacked_design(F, dims) @ t - 2.4
        assert np.max(np.abs(resid)) <= 1e-10
        np.testing.assert_allclose(t, 2.4 / 3, atol=1e-10)

    def test_square_system_reproduces_targets(self):
        x = np.linspace(0.0, 1.0, 8)
        kv = bspline.make_clamped_knots(x, degree=3, n_interior=4)
        assert kv.n_basis == len(x)
        targets = np.sin(3 * x)
        itp = bspline.fit_interpolator(x, targets, degree=3, n_interior=4)
        assert np.linalg.cond(bspline.design_matrix(x, kv)) < 1e3
        for xi, yi in zip(x, targets):
            assert abs(bspline.evaluate(itp, [xi]) - yi) <= 1e-8

    @pytest.mark.parametrize("mode", ["shared", "per_dim"])
    def test_normal_equation_oracle(self, mode):
        F, dims = features_and_dims(1, n=200, p=2)
        y = np.random.default_rng(2).normal(size=200)
        t = bspline.fit_coefficients(F, y, dims, mode)
        A = bspline.stacked_design(F, dims, mode)
        if mode == "shared":
            ref = oracles.normal_equations(A, y)
            np.testing.assert_allclose(t, ref, atol=1e-8)
        else:
            assert t.shape == (2, dims[0].n_basis)
            # constants can move between dimensions; dropping one column removes that
            # null direction without changing the column space
            ref = oracles.normal_equations(A[:, :-1], y)
            np.testing.assert_allclose(A @ t.reshape(-1), A[:, :-1] @ ref, atol=1e-8)

    def test_underdetermined_minimum_norm(self):
        F, dims = features_and_dims(3, n=5, p=1)
        y = np.arange(5.0)
        t = bspline.fit_coefficients(F, y, dims)
        A = bspline.stacked_design(F, dims)
        np.testing.assert_allclose(t, np.linalg.pinv(A) @ y, atol=1e-10)

    def test_all_zero_design(self):
        dims = [KnotVector([0, 0, 1, 1], 1)]
        with pytest.raises(SingularSystem):
            bspline.fit_coefficients(np.array([[2.0], [3.0]]), [1.0, 2.0], dims)

    def test_mismatched_basis_counts(self):
        dims = [KnotVector([0, 0, 1, 1], 1), KnotVector([0, 0, 0.5, 1, 1], 1)]
        with pytest.raises(DomainError):
            bspline.fit_coefficients(np.zeros((3, 2)), np.zeros(3), dims)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_never_worse_than_zero(self, seed):
        F, dims = features_and_dims(seed, n=40, p=2, n_interior=3)
        y = np.random.default_rng(seed + 1).normal(size=40)
        t = bspline.fit_coefficients(F, y, dims)
        A = bspline.stacked_design(F, dims)
        assert np.linalg.norm(A @ t - y) <= np.linalg.norm(y) + 1e-12


class TestInterpolator:
    def make(self, seed=4, mode="shared"):
        F, dims = features_and_dims(seed)
        y = F.sum(axis=1) ** 2
        return F, bspline.fit_interpolator(F, y, degree=3, n_interior=4, mode=mode)

    def test_shape_checks(self):
        F, itp = self.make()
        with pytest.raises(DomainError):
            Interpolator(itp.dims, np.zeros(3), itp.fallback_values, 3)
        with pytest.raises(DomainError):
            bspline.evaluate(itp, [0.5, 0.5])

    def test_constant_surface(self):
        F, dims = features_and_dims(5)
        itp = bspline.fit_interpolator(F, np.full(len(F), 1.7), 3, 4)
        x = F.mean(axis=0)
        assert bspline.evaluate(itp, x) == pytest.approx(1.7, abs=1e-10)

    def test_clamp_below_min(self):
        F, itp = self.make()
        x = [F[:, 0].min() - 0.3, 0.5, 0.5]
        xc, clamped = bspline.clamp(itp, x)
        assert clamped == [0] and xc[0] == F[:, 0].min()
        assert bspline.evaluate(itp, x) == bspline.evaluate(itp, xc)

    @pytest.mark.parametrize("mode", ["shared", "per_dim"])
    def test_evaluate_many_matches_scalar(self, mode):
        F, itp = self.make(mode=mode)
        Q = np.random.default_rng(7).uniform(-0.2, 1.2, (50, 3))
        fast = bspline.evaluate_many(itp, Q)
        slow = [bspline.evaluate(itp, q) for q in Q]
        np.testing.assert_allclose(fast, slow, atol=1e-12)

    def test_scalar_returns_python_float(self):
        F, itp = self.make()
        assert type(bspline.evaluate(itp, F[0])) is float

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(float, 3, elements=st.floats(-3, 4)), st.integers(0, 2), st.floats(0.01, 5))
    def test_constant_along_outward_ray(self, x, dim, step):
        F, itp = self.make()
        kv = itp.dims[dim]
        x = x.copy()
        x[dim] = kv.hi + 1e-3
        y = x.copy()
        y[dim] = kv.hi + step
        assert bspline.evaluate(itp, x) == bspline.evaluate(itp, y)

    def test_continuous_inside_box(self):
        F, itp = self.make()
        x = F.mean(axis=0)
        for h in (1e-6, 1e-8):
            assert abs(bspline.evaluate(itp, x + h) - bspline.evaluate(itp, x)) < 1e3 * h
