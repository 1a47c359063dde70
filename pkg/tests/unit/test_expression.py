"""
Unit tests for the coefficient expression grammar.
"""
import numpy as np
import pytest

from src.exceptions import ConfigError
from src.utils.expression import Expression


class TestExpression:
    """Test suite for Expression."""

    def test_polynomial_in_x(self):
        expr = Expression("x*(1-x)")
        x = np.array([0.0, 0.25, 0.5, 1.0])
        np.testing.assert_allclose(expr(x), x * (1 - x))

    def test_caret_is_power(self):
        assert float(Expression("x^2")(3.0)) == pytest.approx(9.0)

    def test_parameters_and_constants(self):
        expr = Expression("gamma*sin(pi*x/ell)", {"gamma": 2.0, "ell": 1.0})
        assert float(expr(0.5)) == pytest.approx(2.0)

    def test_constant_broadcasts_to_input_shape(self):
        values = Expression("1.5")(np.linspace(0, 1, 7))
        assert values.shape == (7,)
        assert np.all(values == 1.5)

    def test_time_dependence_detected(self):
        assert Expression("x + t").depends_on_t
        assert not Expression("exp(-x)").depends_on_t
        assert float(Expression("x*t")(2.0, t=3.0)) == pytest.approx(6.0)

    def test_unary_minus(self):
        assert float(Expression("-x + 1")(0.25)) == pytest.approx(0.75)

    @pytest.mark.parametrize("text", [
        "y + 1",
        "log(x)",
        "x.real",
        "__import__('os')",
        "x if x else 1",
        "exp(x, 2)",
        "'a'",
        "x +",
    ])
    def test_rejects_bad_input(self, text):
        with pytest.raises(ConfigError):
            Expression(text)
