import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from amckfac.errors import ContractError, UndefinedMetricError
from amckfac.numeric import (
    FixedPointSpec,
    as_matrix,
    mvm,
    quantize,
    quantize_fixed,
    relative_error,
    unvectorize,
    vectorize,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_mvm_identity():
    assert np.array_equal(mvm(np.eye(3), [1, 2, 3]), [1, 2, 3])


def test_mvm_hand_sum():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    expected = [sum(a[i, j] * 1.0 for j in range(2)) for i in range(2)]
    assert np.array_equal(mvm(a, [1, 1]), expected)
    assert expected == [3.0, 7.0]


def test_mvm_zero_vector():
    assert np.array_equal(mvm(np.arange(6.0).reshape(2, 3), np.zeros(3)), np.zeros(2))


def test_mvm_dimension_mismatch():
    with pytest.raises(ContractError):
        mvm(np.eye(3), [1, 2])


def test_matrix_rejects_nonfinite():
    with pytest.raises(ContractError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ContractError):
        as_matrix([[1.0, 2.0]], square=True)


def test_relative_error_examples():
    assert relative_error([1, 2], [1, 2]) == 0.0
    assert relative_error([0, 1], [1, 0]) == pytest.approx(np.sqrt(2))
    assert relative_error([3, 0], [3, 4]) == pytest.approx(0.8)


def test_relative_error_zero_reference():
    with pytest.raises(UndefinedMetricError):
        relative_error([1, 2], [0, 0])


def test_relative_error_shape_mismatch():
    with pytest.raises(ContractError):
        relative_error([1, 2, 3], [1, 2])


@given(hnp.arrays(np.float64, st.integers(1, 8), elements=finite.filter(lambda v: abs(v) > 1e-3)),
       st.floats(-10, 10, allow_nan=False))
def test_relative_error_of_scaled_reference(v_star, alpha):
    assert relative_error(alpha * v_star, v_star) == pytest.approx(abs(alpha - 1), rel=1e-9, abs=1e-12)


def test_fixed_point_spec():
    assert FixedPointSpec(24).tolerance() == 2.0 ** -23
    assert FixedPointSpec(2).tolerance() == 0.5
    with pytest.raises(ContractError):
        FixedPointSpec(1)


def test_quantize_examples():
    assert quantize_fixed(0.0, FixedPointSpec(8)) == 0.0
    # 3-bit grid is {-1, -0.75, ..., 0.75}; 0.3 is closest to 0.25
    grid = np.arange(-4, 4) / 4
    assert grid[np.argmin(np.abs(grid - 0.3))] == 0.25
    assert quantize_fixed(0.3, FixedPointSpec(3)) == 0.25
    assert quantize_fixed(0.9999999, FixedPointSpec(8)) == 127 / 128
    q, sat = quantize_fixed(0.99, FixedPointSpec(8), return_flag=True)
    assert q == 127 / 128 and not sat


def test_quantize_saturation():
    q, sat = quantize_fixed(1.0, FixedPointSpec(8), return_flag=True)
    assert q == 127 / 128 and sat
    q, sat = quantize_fixed(-3.0, FixedPointSpec(8), return_flag=True)
    assert q == -1.0 and sat
    q, sat = quantize_fixed(-1.0, FixedPointSpec(8), return_flag=True)
    assert q == -1.0 and not sat


def test_quantize_ties_to_even():
    spec = FixedPointSpec(3)
    assert quantize_fixed(0.125, spec) == 0.0      # 0.5 steps -> 0
    assert quantize_fixed(0.375, spec) == 0.5      # 1.5 steps -> 2


def test_quantize_with_full_scale():
    q, sat = quantize(np.array([0.3, -2.5]), 4, full_scale=2.0)
    assert np.allclose(q, [0.25, -2.0]) and sat


@given(st.floats(-0.999, 0.999), st.integers(2, 30))
def test_quantize_error_bound(x, bits):
    spec = FixedPointSpec(bits)
    q = quantize_fixed(x, spec)
    if x < 1 - spec.step / 2:
        assert abs(q - x) <= spec.tolerance() / 2 + 1e-15


@given(st.floats(-2, 2), st.integers(2, 30))
def test_quantize_idempotent(x, bits):
    spec = FixedPointSpec(bits)
    q = quantize_fixed(x, spec)
    assert quantize_fixed(q, spec) == q


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(2, 30))
def test_quantize_monotone(x, y, bits):
    spec = FixedPointSpec(bits)
    lo, hi = sorted((x, y))
    assert quantize_fixed(lo, spec) <= quantize_fixed(hi, spec)


def test_vectorize_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(vectorize(m), [1, 3, 2, 4])
    assert np.array_equal(unvectorize([1, 3, 2, 4], 2, 2), m)


def test_unvectorize_size_mismatch():
    with pytest.raises(ContractError):
        unvectorize(np.arange(5.0), 2, 2)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=7), elements=finite))
def test_vectorize_round_trip(m):
    assert np.array_equal(unvectorize(vectorize(m), *m.shape), m)


def _kron_brute(a, b):
    p, q = a.shape[0], b.shape[0]
    out = np.zeros((p * q, p * q))
    for i in range(p):
        for j in range(p):
            for k in range(q):
                for m in range(q):
                    out[i * q + k, j * q + m] = a[i, j] * b[k, m]
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_kronecker_vec_identity(p, q, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((p, p))
    b = rng.standard_normal((q, q))
    x = rng.standard_normal((q, p))
    lhs = vectorize(b @ x @ a.T)
    rhs = _kron_brute(a, b) @ vectorize(x)
    assert relative_error(lhs, rhs) <= 1e-12
