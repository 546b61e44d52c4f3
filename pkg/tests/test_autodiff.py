import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.model import autodiff as ad
from src.utils.errors import DomainError, ValidationError


def test_product_rule_and_unused_leaf():
    tape = ad.Tape()
    x = tape.variable([1.0, -2.0, 3.0])
    unused = tape.variable(5.0)
    y = ad.sum_(x * x)
    gx, gu = tape.gradient(y)
    assert_allclose(gx, [2.0, -4.0, 6.0])
    assert gu == 0.0


def test_broadcast_gradient_is_reduced():
    tape = ad.Tape()
    x = tape.variable(np.ones((3, 2)))
    b = tape.variable([0.5, -0.5])
    y = ad.sum_(ad.mul(x + b, 2.0))
    gx, gb = ad.gradient(tape, y, [x, b])
    assert gx.shape == (3, 2)
    assert_allclose(gb, [6.0, 6.0])


def test_take_with_repeated_indices_accumulates():
    tape = ad.Tape()
    x = tape.variable([1.0, 2.0, 3.0])
    y = ad.sum_(ad.take(x, [0, 0, 1]))
    (g,) = tape.gradient(y, [x])
    assert_allclose(g, [2.0, 1.0, 0.0])


def test_concat_splits_gradient():
    tape = ad.Tape()
    a = tape.variable(np.ones((2, 1)))
    b = tape.variable(np.ones((2, 2)))
    y = ad.sum_(ad.concat([a, b * 3.0], axis=1))
    ga, gb = tape.gradient(y, [a, b])
    assert_allclose(ga, np.ones((2, 1)))
    assert_allclose(gb, 3.0 * np.ones((2, 2)))


def test_affine_matches_numeric_gradient():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)

    def fn(x):
        return ad.sum_(ad.tanh(ad.affine(ad.take(x, [0, 1, 2]), W, b)))

    result = ad.gradient_check(fn, rng.standard_normal(3))
    assert result.max_rel_error <= 1e-4
    assert not result.nondifferentiable


def test_composite_gradient_check():
    rng = np.random.default_rng(1)
    W = rng.standard_normal((4, 4))

    def fn(x):
        h = ad.tanh(ad.matmul(W, x))
        return (
            ad.sum_(h * x)
            + ad.mean(ad.exp(x * 0.1))
            + ad.sum_(ad.log(ad.square(x) + 1.0))
            - ad.sum_(ad.div(x, ad.square(x) + 2.0))
        )

    result = ad.gradient_check(fn, rng.standard_normal(4))
    assert result.max_rel_error <= 1e-4


def test_jacobian_of_linear_map():
    A = np.arange(6, dtype=float).reshape(2, 3)
    J = ad.jacobian(lambda x: ad.matmul(A, x), [1.0, 2.0, 3.0])
    assert_allclose(J, A)


def test_jacobian_of_scalar_output():
    J = ad.jacobian(lambda x: ad.sum_(ad.square(x)), [1.0, 2.0])
    assert J.shape == (1, 2)
    assert_allclose(J, [[2.0, 4.0]])


def test_abs_kink_is_flagged():
    result = ad.gradient_check(lambda x: ad.sum_(ad.abs_(x)), [0.0, 1.0])
    assert result.nondifferentiable
    assert result.kink_coordinates == (0,)
    assert result.analytic[0] == 0.0


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: ad.log(x - 1.0),
        lambda x: ad.div(x, x - 1.0),
        lambda x: ad.exp(x * 1000.0),
    ],
)
def test_domain_violations(fn):
    tape = ad.Tape()
    with pytest.raises(DomainError):
        fn(tape.variable(1.0))


def test_gradient_requires_scalar_output():
    tape = ad.Tape()
    x = tape.variable([1.0, 2.0])
    with pytest.raises(ValidationError):
        tape.gradient(x * 2.0)


def test_tapes_cannot_be_mixed():
    a = ad.Tape().variable(1.0)
    b = ad.Tape().variable(2.0)
    with pytest.raises(ValidationError):
        ad.add(a, b)


def test_primitive_eval_dispatch():
    tape = ad.Tape()
    x = tape.variable([1.0, 4.0])
    y = ad.primitive_eval("sum", ad.primitive_eval("square", x))
    assert y.value == 17.0
    assert tape.kinds[-1] == "sum"
    with pytest.raises(ValidationError):
        ad.primitive_eval("sqrt", x)


def test_gradient_check_rejects_bad_step():
    with pytest.raises(ValidationError):
        ad.gradient_check(lambda x: ad.sum_(x), [1.0], h=0.0)
