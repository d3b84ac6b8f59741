import numpy as np
import pytest

from aewin.numerics import Tensor, grad_check, mul, numeric_gradient, relative_error, sum_all
from aewin.verify import GRAD_TOL, OP_GRAD_TOL, PRIMITIVE_OPS, op_grad_errors


def test_sum_gradient_exact(rng):
    assert grad_check(sum_all, Tensor(rng.standard_normal((3, 4)))) < 1e-10


def test_square_gradient():
    assert grad_check(lambda x: sum_all(mul(x, x)), Tensor([1.0, 2.0])) < 1e-9


def test_numeric_gradient_of_square():
    g = numeric_gradient(lambda x: sum_all(mul(x, x)), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)


def test_non_scalar_rejected():
    with pytest.raises(ValueError):
        grad_check(lambda x: mul(x, x), Tensor([1.0, 2.0]))


def test_relative_error_floor():
    # both tiny: the floor keeps the ratio from exploding
    assert relative_error(np.array([1e-12]), np.array([0.0])) < 1e-3


def test_detects_a_wrong_gradient():
    from aewin.numerics.tensor import _emit

    def bad_square(x):
        return _emit(x.data**2, (x,), lambda g: (g * 3 * x.data,))

    assert grad_check(lambda x: sum_all(bad_square(x)), Tensor([1.0, 2.0])) > 0.1


@pytest.mark.parametrize("seed", range(20))
def test_op_vjps(seed):
    errors = op_grad_errors(np.random.default_rng(seed))
    for name, err in errors.items():
        tol = OP_GRAD_TOL if name in PRIMITIVE_OPS else GRAD_TOL
        assert err < tol, f"{name}: {err:.2e}"


def test_gelu_tail_is_precise():
    # 1 + erf(x) cancels for x << 0; the forward must not
    from aewin.numerics import gelu

    x = -6.1566638203960675
    # x * Phi(x), Phi via mpmath at 50 digits
    expected = -2.2869949972209281e-09
    assert gelu(Tensor([x])).data[0] == pytest.approx(expected, rel=1e-13)
