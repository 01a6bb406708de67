import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlearn.errors import DimensionError, NonFiniteError
from qlearn.quantizer import (
    LatticeVector,
    error_covariance_trace,
    is_on_lattice,
    quantize_array,
    quantize_integer_grid,
    quantize_scalar,
    quantize_vector,
)


class TestQuantizeScalar:
    def test_zero(self):
        assert quantize_scalar(0.0, 4) == (0.0, 0.0)

    def test_on_lattice_value_is_fixed(self):
        assert quantize_scalar(0.5, 2) == (0.5, 0.0)

    def test_rounds_down(self):
        xq, eps = quantize_scalar(0.3, 4)
        assert xq == 0.25
        # eps is in lattice units: q*(xq - x) = 1 - 1.2
        assert eps == pytest.approx(-0.2, abs=1e-12)

    def test_tie_goes_up(self):
        assert quantize_scalar(0.125, 4)[0] == 0.25
        assert quantize_scalar(-0.125, 4)[0] == 0.0

    @pytest.mark.parametrize("bad", [0, -2, 1.5, True])
    def test_rejects_bad_level(self, bad):
        with pytest.raises(ValueError):
            quantize_scalar(0.1, bad)

    @pytest.mark.parametrize("x", [math.nan, math.inf, -math.inf])
    def test_rejects_non_finite(self, x):
        with pytest.raises(NonFiniteError):
            quantize_scalar(x, 4)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-1e6, 1e6, allow_nan=False), st.integers(1, 2**20))
    def test_error_bound_and_reconstruction(self, x, q):
        xq, eps = quantize_scalar(x, q)
        assert -0.5 <= eps < 0.5 + 1e-9
        assert abs(xq - x) <= 0.5 / q + 1e-9 * max(1.0, abs(x))
        lv, _ = quantize_vector([x], q)
        assert xq == lv.values[0]
        assert Fraction(int(lv.numerators[0]), q) == Fraction(math.floor(Fraction(x) * q + Fraction(1, 2)), q)


class TestQuantizeVector:
    def test_symmetric_pair(self):
        lv, eps = quantize_vector([0.3, -0.3], 4)
        np.testing.assert_array_equal(lv.values, [0.25, -0.25])
        np.testing.assert_allclose(eps, [-0.2, 0.2], atol=1e-12)

    def test_exact_on_finer_lattice(self):
        k = np.arange(-40, 41)
        lv, eps = quantize_vector(0.0625 * k, 16)
        np.testing.assert_array_equal(lv.numerators, k)
        np.testing.assert_array_equal(eps, 0.0)

    def test_rejects_matrix(self):
        with pytest.raises(DimensionError):
            quantize_vector(np.zeros((2, 2)), 4)

    def test_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            quantize_vector([0.0, np.nan], 4)


class TestExactRounding:
    def test_false_tie_rounds_down(self):
        # 2365 * -1.1 rounds to -2601.5 in float64; the exact product is just below it
        assert Fraction(2365) * Fraction(-1.1) < Fraction(-52003, 20)
        k, eps = quantize_array([-1.1], np.array([2365]))
        assert int(k[0]) == -2602
        assert eps[0] < 0.5
        lv, _ = quantize_vector([-1.1], 2365)
        assert int(lv.numerators[0]) == -2602
        assert quantize_scalar(-1.1, 2365)[0] == -2602 / 2365

    def test_level_beyond_float_precision(self):
        q = 2**60 + 1
        k, eps = quantize_array([0.3], np.array([q]))
        exact = Fraction(q) * Fraction(0.3)
        assert int(k[0]) == math.floor(exact + Fraction(1, 2))
        assert abs(eps[0]) <= 0.5

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=20), st.integers(1, 2**20))
    def test_array_matches_rational_rounding(self, xs, q):
        k, eps = quantize_array(xs, np.int64(q))
        for ki, ei, x in zip(k, eps, xs):
            exact = Fraction(q) * Fraction(x)
            assert int(ki) == math.floor(exact + Fraction(1, 2))
            assert ei == pytest.approx(float(int(ki) - exact), abs=1e-9)


class TestQuantizeArray:
    def test_per_element_levels(self):
        k, eps = quantize_array([0.3, 0.3, 0.3], np.array([1, 4, 16]))
        np.testing.assert_array_equal(k, [0, 1, 5])
        np.testing.assert_allclose(eps, [-0.3, -0.2, 0.2], atol=1e-12)

    def test_rejects_float_levels(self):
        with pytest.raises(ValueError):
            quantize_array([0.3], np.array([4.0]))

    def test_rejects_zero_level(self):
        with pytest.raises(ValueError):
            quantize_array([0.3], np.array([0]))


class TestIntegerGrid:
    def test_example(self):
        k, eps = quantize_integer_grid([1.7, 2.5, -0.2])
        np.testing.assert_array_equal(k, [2, 3, 0])
        np.testing.assert_allclose(eps, [0.3, 0.5, 0.2], atol=1e-12)


class TestLatticeVector:
    def test_values_from_numerators(self):
        lv = LatticeVector(np.array([1, -3, 8]), 8)
        np.testing.assert_array_equal(lv.values, [0.125, -0.375, 1.0])

    def test_on_lattice(self):
        lv = LatticeVector(np.array([2, 6]), 8)
        assert lv.on_lattice(4)
        assert not lv.on_lattice(2)

    def test_with_denominator(self):
        lv = LatticeVector(np.array([1, 3]), 4).with_denominator(12)
        np.testing.assert_array_equal(lv.numerators, [3, 9])
        with pytest.raises(ValueError):
            lv.with_denominator(8)

    def test_big_numerators_stay_exact(self):
        lv = LatticeVector(np.array([2**61]), 1).with_denominator(2**10)
        assert lv.numerators.dtype == object
        assert int(lv.numerators[0]) == 2**71
        assert lv.on_lattice(1)

    def test_zero(self):
        assert LatticeVector.zeros(3, 4).is_zero()
        assert not LatticeVector(np.array([0, 1]), 4).is_zero()


class TestHelpers:
    @pytest.mark.parametrize("n,q,expected", [(1, 1, 1 / 12), (12, 1, 1.0), (3, 4, 0.015625)])
    def test_error_covariance_trace(self, n, q, expected):
        assert error_covariance_trace(n, q) == pytest.approx(expected, rel=1e-15)

    def test_error_covariance_trace_bad_dim(self):
        with pytest.raises(ValueError):
            error_covariance_trace(0, 4)

    def test_is_on_lattice(self):
        assert is_on_lattice([0.25, -1.5], 4)
        assert not is_on_lattice([0.3], 4)
