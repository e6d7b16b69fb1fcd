import numpy as np
import pytest

from decoupleseg.gradcheck import grad_check, rel_err


def test_linear_op_exact():
    x = np.array([0.3, -1.2, 4.0])
    rep = grad_check(lambda: float(np.sum(2 * x)), [x], [np.full(3, 2.0)])
    assert rep.passed
    assert rep.max_rel_err < 1e-9
    assert rep.n_checked == 3


def test_detects_wrong_gradient():
    x = np.array([1.0, 2.0])
    rep = grad_check(lambda: float(np.sum(x ** 2)), [x], [x.copy()])  # should be 2x
    assert not rep.passed
    assert rep.max_rel_err == pytest.approx(0.5, rel=1e-6)


def test_inputs_restored_after_check():
    x = np.array([1.0, 2.0, 3.0])
    before = x.copy()
    grad_check(lambda: float(np.sum(x ** 3)), [x], [3 * x ** 2])
    np.testing.assert_array_equal(x, before)


def test_requires_float64():
    x = np.zeros(2, dtype=np.float32)
    with pytest.raises(TypeError):
        grad_check(lambda: 0.0, [x], [x])


def test_non_finite_is_a_failure_with_location():
    x = np.array([1.0, 2.0])
    rep = grad_check(lambda: float(np.sum(x)), [x], [np.array([1.0, np.inf])])
    assert not rep.passed
    assert rep.worst == (0, 1)
    assert "index 1" in rep.failure


def test_coordinate_sampling():
    x = np.arange(100, dtype=np.float64)
    rep = grad_check(lambda: float(np.sum(x)), [x], [np.ones(100)], max_coords=10)
    assert rep.n_checked == 10 and rep.passed


def test_rel_err_denominator_floor():
    assert rel_err(0.0, 0.0) == 0.0
    assert rel_err(1e-9, 0.0) == pytest.approx(0.1)
