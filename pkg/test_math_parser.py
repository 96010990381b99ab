import numpy as np
import pytest
import sympy as sp

from errors import ConfigError
from math_parser import MathParser


@pytest.fixture
def parser():
    return MathParser()


def test_profile_expression_becomes_vectorized_callable(parser):
    expr = parser.parse('r^(1/2) + ln(r)')
    f = parser.to_callable(expr)
    r = np.array([0.25, 1.0, 4.0])
    np.testing.assert_allclose(f(r), np.sqrt(r) + np.log(r))


def test_constant_expression_broadcasts(parser):
    f = parser.to_callable(parser.parse('3/2'))
    assert f(np.ones(4)).shape == (4,)
    np.testing.assert_allclose(f(np.ones(4)), 1.5)


def test_unicode_symbols_are_normalized(parser):
    expr = parser.parse('2×r²')
    assert sp.simplify(expr - 2 * sp.Symbol('r', positive=True) ** 2) == 0


@pytest.mark.parametrize("text", ['r + x', 'r +* 2'])
def test_bad_expressions_are_config_errors(parser, text):
    with pytest.raises(ConfigError):
        parser.parse(text)


def test_unsupported_variable(parser):
    with pytest.raises(ConfigError):
        parser.parse('s**2', variable='s')


def test_log_measure_antiderivative(parser):
    r = sp.Symbol('r', positive=True)
    F = parser.log_measure_antiderivative(parser.parse('r**(1/2)'))
    assert sp.simplify(sp.diff(F, r) - sp.sqrt(r) / r) == 0


def test_derivative(parser):
    r = sp.Symbol('r', positive=True)
    assert sp.simplify(parser.derivative(parser.parse('r**3'), order=2) - 6 * r) == 0


def test_parse_list(parser):
    assert parser.parse_list('0, 1/2, sqrt(4)') == [0.0, 0.5, 2.0]
    assert parser.parse_list(' , ') == []
    with pytest.raises(ConfigError):
        parser.parse_list('1, r')
