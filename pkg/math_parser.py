import logging
import re
from typing import Callable, Dict, List, Optional

import numpy as np
import sympy as sp

from errors import ConfigError

logger = logging.getLogger(__name__)


class MathParser:
    """Parses radial profile expressions written in manifests.

    Profiles are one-variable expressions such as ``r**(1/2)`` or
    ``-1/(1 + 2*log(r))``. They are turned into vectorized numpy callables,
    and antiderivatives are attempted symbolically for closed-form oracles.
    """

    def __init__(self):
        self.allowed_variables = ['r', 't']
        self.allowed_functions = {
            'log': sp.log,
            'exp': sp.exp,
            'sqrt': sp.sqrt,
            'sin': sp.sin,
            'cos': sp.cos,
            'pi': sp.pi,
            'E': sp.E,
        }

    def _clean_text(self, text: str) -> str:
        """Clean and normalize mathematical text"""
        # Remove extra whitespace
        text = re.sub(r'\s+', ' ', text.strip())

        # Replace common math symbols
        replacements = {
            '×': '*',
            '÷': '/',
            '²': '**2',
            '³': '**3',
            '√': 'sqrt',
            'π': 'pi',
            '^': '**',
            '−': '-',
            'ln': 'log',
        }

        for old, new in replacements.items():
            text = text.replace(old, new)

        return text

    def parse(self, text: str, variable: str = 'r') -> sp.Expr:
        """Convert a profile expression to a SymPy expression in one variable"""
        if variable not in self.allowed_variables:
            raise ConfigError(f"unsupported profile variable '{variable}'",
                              allowed=self.allowed_variables)
        cleaned = self._clean_text(text)
        symbol = sp.Symbol(variable, positive=True)
        namespace: Dict[str, object] = dict(self.allowed_functions)
        namespace[variable] = symbol
        try:
            expr = sp.sympify(cleaned, locals=namespace)
        except (sp.SympifyError, SyntaxError, TypeError) as e:
            raise ConfigError(f"cannot parse expression '{text}'", reason=str(e))

        stray = sorted(str(s) for s in expr.free_symbols if s != symbol)
        if stray:
            raise ConfigError(f"expression '{text}' has free symbols {stray}",
                              variable=variable)
        return expr

    def to_callable(self, expr: sp.Expr, variable: str = 'r') -> Callable[[np.ndarray], np.ndarray]:
        """Lambdify a one-variable expression into a vectorized function"""
        symbol = sp.Symbol(variable, positive=True)
        func = sp.lambdify(symbol, expr, modules='numpy')

        def evaluate(values):
            values = np.asarray(values, dtype=float)
            # Constants lambdify to scalars; broadcast them to the input shape
            return np.broadcast_to(np.asarray(func(values), dtype=float), values.shape).copy()

        return evaluate

    def derivative(self, expr: sp.Expr, variable: str = 'r', order: int = 1) -> sp.Expr:
        symbol = sp.Symbol(variable, positive=True)
        return sp.simplify(sp.diff(expr, symbol, order))

    def antiderivative(self, expr: sp.Expr, variable: str = 'r') -> Optional[sp.Expr]:
        """Symbolic antiderivative, or None when SymPy leaves an unevaluated integral"""
        symbol = sp.Symbol(variable, positive=True)
        try:
            result = sp.integrate(expr, symbol)
        except Exception as e:
            logger.debug("Symbolic integration failed for %s: %s", expr, e)
            return None
        if result.has(sp.Integral):
            return None
        return result

    def log_measure_antiderivative(self, expr: sp.Expr, variable: str = 'r') -> Optional[sp.Expr]:
        """Antiderivative of expr(r)/r, the measure used by the indicator integrals"""
        symbol = sp.Symbol(variable, positive=True)
        return self.antiderivative(expr / symbol, variable)

    def describe(self, expr: sp.Expr) -> Dict[str, object]:
        """Summary used in provenance headers"""
        return {
            'expression': str(expr),
            'latex': sp.latex(expr),
            'symbols': sorted(str(s) for s in expr.free_symbols),
        }

    def parse_list(self, text: str) -> List[float]:
        """Parse a comma separated list of numeric expressions (e.g. '0, 0, 1/2')"""
        items = [item for item in (part.strip() for part in text.split(',')) if item]
        values = []
        for item in items:
            expr = sp.sympify(self._clean_text(item), locals=dict(self.allowed_functions))
            if expr.free_symbols:
                raise ConfigError(f"expected a number, got '{item}'")
            values.append(float(expr))
        return values
