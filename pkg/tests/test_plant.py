import numpy as np
import pytest

from sparse_smpc.errors import DimensionMismatch
from sparse_smpc.plant import (DisturbanceModel, ImpulseResponse, build_shift_operators, make_rng,
                               sample_disturbance, shift_regressor, step)

TRUTH = [[-1.0, 0, 0, 0, 0, 0, 0, 0, -2.0, 0]]


def unit(i, n=10):
    e = np.zeros(n)
    e[i] = 1.0
    return e


def test_output_selects_coefficients():
    H = ImpulseResponse(TRUTH, 2)
    assert step(H, unit(0), [0.0])[0] == -1.0
    assert step(H, unit(8), [0.05])[0] == pytest.approx(-1.95, abs=1e-15)
    assert step(ImpulseResponse(np.zeros((1, 10))), np.arange(10.0), [0.0])[0] == 0.0


def test_output_is_linear_in_regressor(rng):
    H = ImpulseResponse(rng.normal(size=(2, 6)))
    a, b = rng.normal(size=6), rng.normal(size=6)
    zero = np.zeros(2)
    np.testing.assert_allclose(step(H, 2 * a - b, zero), 2 * step(H, a, zero) - step(H, b, zero), atol=1e-12)


def test_output_dimension_errors():
    H = ImpulseResponse(TRUTH)
    with pytest.raises(DimensionMismatch):
        step(H, np.zeros(9), [0.0])
    with pytest.raises(DimensionMismatch):
        step(H, np.zeros(10), [0.0, 0.0])


def test_sparsity_index_enforced():
    with pytest.raises(ValueError):
        ImpulseResponse(TRUTH, 1)
    assert ImpulseResponse(TRUTH, 2).sparsity_index == 2
    np.testing.assert_array_equal(ImpulseResponse(TRUTH).vectorized(), TRUTH[0])


def test_shift_is_a_delay_line():
    ops = build_shift_operators(1, 3)
    np.testing.assert_array_equal(shift_regressor(ops, np.zeros(3), 1.0), [1, 0, 0])
    np.testing.assert_array_equal(shift_regressor(ops, [1, 2, 3], 5.0), [5, 1, 2])
    with pytest.raises(DimensionMismatch):
        shift_regressor(ops, np.zeros(3), [1.0, 2.0])


def test_shift_is_nilpotent(rng):
    ops = build_shift_operators(2, 4)
    phi = rng.normal(size=8)
    for _ in range(4):
        phi = shift_regressor(ops, phi, np.zeros(2))
    np.testing.assert_array_equal(phi, np.zeros(8))


def test_operator_structure():
    ops = build_shift_operators(1, 2)
    np.testing.assert_array_equal(ops.W, [[0, 0], [1, 0]])
    np.testing.assert_array_equal(ops.Z, [[1], [0]])
    two = build_shift_operators(2, 2)
    np.testing.assert_array_equal(two.W, np.kron(np.eye(2), ops.W))
    np.testing.assert_array_equal(two.Z, np.kron(np.eye(2), ops.Z))


def test_steady_state_map_repeats_input():
    ops = build_shift_operators(2, 3)
    u = np.array([0.7, -1.5])
    np.testing.assert_allclose(ops.steady_state_map @ u, [0.7] * 3 + [-1.5] * 3, atol=1e-15)


def test_uniform_disturbance_bounds_and_variance():
    model = DisturbanceModel([0.1])
    w = sample_disturbance(model, make_rng(3), size=1_000_000)
    assert np.all(np.abs(w) <= 0.1)
    assert np.var(w) == pytest.approx(0.04 / 12, rel=0.05)
    assert model.variance[0, 0] == pytest.approx(1 / 300, rel=1e-15)


def test_zero_bound_gives_zero_noise():
    w = sample_disturbance(DisturbanceModel([0.0, 0.0]), make_rng(1), size=50)
    assert w.shape == (50, 2)
    assert not np.any(w)


def test_streams_are_reproducible_and_distinct():
    model = DisturbanceModel([0.1])
    a = sample_disturbance(model, make_rng(1000, 4), size=21)
    b = sample_disturbance(model, make_rng(1000, 4), size=21)
    c = sample_disturbance(model, make_rng(1000, 5), size=21)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_disturbance_validation():
    with pytest.raises(ValueError):
        DisturbanceModel([-0.1])
    with pytest.raises(ValueError):
        DisturbanceModel([0.1], distribution="gaussian")
