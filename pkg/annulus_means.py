"""Annulus L^p means, spherical means and shell integrals.

Everything in the laboratory is measured with the quantities defined here:
the p-mean of a field over the annulus r < |x - y| < 2r, the derivative
weighted mean M_{2,p}, and spherical averages. Quadratures are tensor rules
(product rule on the sphere, Gauss-Legendre in log r).
"""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import CubicSpline
from scipy.special import gamma, roots_jacobi

from config import Config
from errors import ContractError, DivergenceError, DomainError, EvaluationError

logger = logging.getLogger(__name__)

MEAN_REPORT_COLUMNS = ['r', 'p', 'Mp', 'M1inf', 'M2p', 'derivative_source']


def sphere_area(n: int) -> float:
    """|S^{n-1}| = 2 pi^{n/2} / Gamma(n/2)"""
    return 2.0 * math.pi ** (n / 2.0) / float(gamma(n / 2.0))


@dataclass(frozen=True)
class SphericalQuadrature:
    dimension: int
    nodes: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def area(self) -> float:
        return sphere_area(self.dimension)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate nodal values (first axis runs over nodes)"""
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))

    def mean(self, values: np.ndarray) -> np.ndarray:
        return self.integrate(values) / self.area


def build_spherical_quadrature(n: int, degree: int) -> SphericalQuadrature:
    """Product rule on S^{n-1} exact for polynomials up to ``degree``.

    The circle gets degree + 1 equispaced azimuths; each added dimension k
    adds Gauss-Jacobi nodes in the new polar cosine with weight
    (1 - t^2)^{(k-3)/2}.
    """
    if n < 3:
        raise ContractError("dimension must be at least 3", dimension=n)
    if degree < 1:
        raise ContractError("exactness degree must be positive", degree=degree)

    count = degree + 1
    angles = 2.0 * np.pi * np.arange(count) / count
    nodes = np.column_stack([np.cos(angles), np.sin(angles)])
    weights = np.full(count, 2.0 * np.pi / count)

    polar_count = degree // 2 + 1
    for k in range(3, n + 1):
        a = (k - 3) / 2.0
        t, wt = roots_jacobi(polar_count, a, a)
        s = np.sqrt(np.clip(1.0 - t ** 2, 0.0, None))
        lifted = np.concatenate([
            np.repeat(t, len(weights))[:, None],
            (s[:, None, None] * nodes[None, :, :]).reshape(-1, k - 1),
        ], axis=1)
        weights = np.outer(wt, weights).ravel()
        nodes = lifted

    logger.debug("Spherical quadrature n=%d degree=%d with %d nodes", n, degree, len(weights))
    return SphericalQuadrature(dimension=n, nodes=nodes, weights=weights, degree=degree)


@lru_cache(maxsize=16)
def default_sphere(n: int, degree: Optional[int] = None) -> SphericalQuadrature:
    if degree is None:
        degree = 2 * Config.HARMONIC_DEGREE + 4
    return build_spherical_quadrature(n, degree)


class RadialGrid:
    """Log-spaced radii with Gauss-Legendre sub-nodes on every panel.

    Tabulated quantities live on ``points``; integrals in u = log r are done
    on the panel sub-nodes, either from exact evaluations there or from a
    cubic spline through the tabulated values.
    """

    def __init__(self, r_min: float, r_max: float, points_per_decade: int = None,
                 panel_order: int = None):
        if not (0.0 < r_min < r_max):
            raise DomainError("radial grid needs 0 < r_min < r_max", r_min=r_min, r_max=r_max)
        self.r_min = float(r_min)
        self.r_max = float(r_max)
        self.points_per_decade = int(points_per_decade or Config.POINTS_PER_DECADE)
        self.panel_order = int(panel_order or Config.PANEL_ORDER)

        intervals = max(1, int(math.ceil(self.decades * self.points_per_decade - 1e-9)))
        self.u = np.linspace(math.log(self.r_min), math.log(self.r_max), intervals + 1)
        self.points = np.exp(self.u)
        self.points[0], self.points[-1] = self.r_min, self.r_max

        x, w = leggauss(self.panel_order)
        left, right = self.u[:-1], self.u[1:]
        half = 0.5 * (right - left)
        self.sub_u = 0.5 * (left + right)[:, None] + half[:, None] * x[None, :]
        self.sub_w = half[:, None] * w[None, :]
        self.sub_r = np.exp(self.sub_u)

    @property
    def decades(self) -> float:
        return math.log10(self.r_max / self.r_min)

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def step(self) -> float:
        return float(self.u[1] - self.u[0])

    def spline(self, values: np.ndarray) -> CubicSpline:
        return CubicSpline(self.u, np.asarray(values), axis=0)

    def at_subnodes(self, values: np.ndarray) -> np.ndarray:
        """Interpolate tabulated values (first axis = grid) onto the panel sub-nodes"""
        return self.spline(values)(self.sub_u)

    def panel_integrals(self, integrand_sub: np.ndarray) -> np.ndarray:
        """Integral over each panel in du of sub-node values"""
        integrand_sub = np.asarray(integrand_sub)
        weights = self.sub_w.reshape(self.sub_w.shape + (1,) * (integrand_sub.ndim - 2))
        return np.sum(weights * integrand_sub, axis=1)

    def cumulative(self, integrand_sub: np.ndarray) -> np.ndarray:
        """int_{u_0}^{u_i} g du at every grid point"""
        panels = self.panel_integrals(integrand_sub)
        zero = np.zeros((1,) + panels.shape[1:])
        return np.concatenate([zero, np.cumsum(panels, axis=0)], axis=0)

    def cumulative_to_end(self, integrand_sub: np.ndarray) -> np.ndarray:
        """int_{u_i}^{u_end} g du at every grid point"""
        running = self.cumulative(integrand_sub)
        return running[-1] - running

    def locate(self, r: np.ndarray) -> np.ndarray:
        return (np.log(np.asarray(r, dtype=float)) - self.u[0]) / self.step

    def covers(self, r: np.ndarray, slack: float = 1e-9) -> bool:
        r = np.asarray(r, dtype=float)
        return bool(np.all(r >= self.r_min * (1 - slack)) and np.all(r <= self.r_max * (1 + slack)))

    def describe(self) -> Dict[str, float]:
        return {
            'r_min': self.r_min,
            'r_max': self.r_max,
            'points_per_decade': self.points_per_decade,
            'size': self.size,
        }


class AnnulusQuadrature:
    """Tensor rule: Gauss-Legendre in log rho times a spherical quadrature"""

    def __init__(self, sphere: SphericalQuadrature, radial_nodes: int = None):
        self.sphere = sphere
        self.radial_nodes = int(radial_nodes or Config.ANNULUS_NODES)
        self._x, self._w = leggauss(self.radial_nodes)

    @property
    def dimension(self) -> int:
        return self.sphere.dimension

    def shell(self, a: float, b: float, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Nodes and volume weights for a < |x - y| < b"""
        if a <= 0 or b <= a:
            raise DomainError("shell needs 0 < a < b", a=a, b=b)
        ua, ub = math.log(a), math.log(b)
        u = 0.5 * (ua + ub) + 0.5 * (ub - ua) * self._x
        rho = np.exp(u)
        radial_w = 0.5 * (ub - ua) * self._w * rho ** self.dimension
        points = (np.asarray(y, dtype=float)[None, None, :]
                  + rho[:, None, None] * self.sphere.nodes[None, :, :]).reshape(-1, self.dimension)
        weights = np.outer(radial_w, self.sphere.weights).ravel()
        return points, weights

    def annulus(self, r: float, y: np.ndarray, wide: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        if r <= 0:
            raise DomainError("annulus radius must be positive", r=r)
        if wide:
            return self.shell(0.5 * r, 4.0 * r, y)
        return self.shell(r, 2.0 * r, y)


@lru_cache(maxsize=16)
def default_annulus(n: int) -> AnnulusQuadrature:
    return AnnulusQuadrature(default_sphere(n))


@dataclass
class MeanReport:
    r: float
    p: float
    value: float
    m1inf: Optional[float] = None
    m2p: Optional[float] = None
    wide: bool = False
    derivative_source: Optional[str] = None

    def to_row(self) -> List[object]:
        return [self.r, self.p, self.value, self.m1inf, self.m2p, self.derivative_source or '']


@dataclass(frozen=True)
class DifferentiableField:
    """Field with derivative evaluators, all vectorized over (N, n) points.

    ``jet`` may return (value, gradient, hessian) in a single pass; otherwise
    the three callables are used. ``source`` records the derivative provenance
    (analytic, spectral or finite-difference).
    """
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    source: str = 'analytic'
    jet: Optional[Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]]] = None

    def evaluate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.jet is not None:
            return self.jet(points)
        if self.gradient is None or self.hessian is None:
            raise ContractError("derivative samples are required for M_{2,p}",
                                has_gradient=self.gradient is not None,
                                has_hessian=self.hessian is not None)
        return self.value(points), self.gradient(points), self.hessian(points)


def _pointwise_norm(values: np.ndarray, count: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim == 0:
        values = np.full(count, float(values))
    flat = values.reshape(count, -1)
    if flat.shape[1] == 1:
        return np.abs(flat[:, 0])
    return np.sqrt(np.sum(flat ** 2, axis=1))


def _check_finite(values: np.ndarray, points: np.ndarray, what: str):
    values = np.asarray(values)
    bad = ~np.isfinite(values.reshape(len(points), -1)).all(axis=1) if values.ndim else \
        np.array([not np.isfinite(values)])
    if np.any(bad):
        index = int(np.argmax(bad))
        raise EvaluationError(f"non-finite {what} at quadrature node {index}",
                              node=points[index].tolist(), index=index)


def _check_exponent(p: float):
    if not p > 1:
        raise ContractError("mean exponent must lie in (1, inf]", p=p)


def weighted_power_mean(magnitudes: np.ndarray, weights: np.ndarray, p: float) -> float:
    """p-th root of the weighted average of |w|^p; nodal max when p is infinite"""
    if np.isinf(p):
        return float(np.max(magnitudes))
    peak = float(np.max(magnitudes))
    if peak == 0.0:
        return 0.0
    # Scaling keeps large p away from overflow
    scaled = magnitudes / peak
    return peak * float(np.sum(weights * scaled ** p) / np.sum(weights)) ** (1.0 / p)


def lp_mean(w: Callable[[np.ndarray], np.ndarray], p: float, r: float, y: Sequence[float],
            quadrature: AnnulusQuadrature = None, wide: bool = False) -> MeanReport:
    """M_p(w, r; y): p-mean of |w| over the annulus r < |x - y| < 2r.

    Vector and matrix valued fields are measured in the Frobenius norm.
    """
    _check_exponent(p)
    y = np.asarray(y, dtype=float)
    quadrature = quadrature or default_annulus(len(y))
    points, weights = quadrature.annulus(r, y, wide=wide)
    values = w(points)
    _check_finite(values, points, 'field value')
    value = weighted_power_mean(_pointwise_norm(values, len(points)), weights, p)
    return MeanReport(r=r, p=p, value=value, wide=wide)


def m2p_mean(w: DifferentiableField, p: float, r: float, y: Sequence[float],
             quadrature: AnnulusQuadrature = None, wide: bool = False) -> MeanReport:
    """M_{2,p} = r^2 M_p(D^2 w) + r M_p(D w) + M_p(w), with M_{1,inf} alongside"""
    _check_exponent(p)
    y = np.asarray(y, dtype=float)
    quadrature = quadrature or default_annulus(len(y))
    points, weights = quadrature.annulus(r, y, wide=wide)
    value, grad, hess = w.evaluate(points)
    for label, arr in (('field value', value), ('gradient', grad), ('hessian', hess)):
        _check_finite(arr, points, label)

    count = len(points)
    m0 = weighted_power_mean(_pointwise_norm(value, count), weights, p)
    m1 = weighted_power_mean(_pointwise_norm(grad, count), weights, p)
    m2 = weighted_power_mean(_pointwise_norm(hess, count), weights, p)
    sup0 = float(np.max(_pointwise_norm(value, count)))
    sup1 = float(np.max(_pointwise_norm(grad, count)))
    return MeanReport(r=r, p=p, value=m0, m1inf=r * sup1 + sup0,
                      m2p=r * r * m2 + r * m1 + m0, wide=wide, derivative_source=w.source)


def spherical_mean(w: Callable[[np.ndarray], np.ndarray], r: float, y: Sequence[float] = None,
                   sphere: SphericalQuadrature = None, dimension: int = None) -> float:
    """Average of a scalar field over the sphere |x - y| = r"""
    if r <= 0:
        raise DomainError("sphere radius must be positive", r=r)
    if y is None:
        if dimension is None and sphere is None:
            raise ContractError("spherical_mean needs a pole or a dimension")
        n = sphere.dimension if sphere is not None else dimension
        y = np.zeros(n)
    y = np.asarray(y, dtype=float)
    sphere = sphere or default_sphere(len(y))
    points = y[None, :] + r * sphere.nodes
    values = np.asarray(w(points), dtype=float)
    _check_finite(values, points, 'field value')
    return float(sphere.mean(values))


@dataclass
class ShellIntegral:
    value: float
    bound: float
    constant: float
    partial_sums: List[float] = field(default_factory=list)
    shells: int = 0


def shell_constant(n: int) -> float:
    """vol(A_r) / r^n, the constant in int_shell |g| <= c M_p(g, rho) rho^{n-1} d rho"""
    return sphere_area(n) * (2.0 ** n - 1.0) / n


def integral_by_shells(g: Callable[[np.ndarray], np.ndarray], r: float, side: str = 'inside',
                       p: float = 2.0, outer: float = None, y: Sequence[float] = None,
                       dimension: int = 3, quadrature: AnnulusQuadrature = None,
                       max_shells: int = 80, rel_stop: float = 1e-14) -> ShellIntegral:
    """Integral of |g| inside (or outside, up to ``outer``) the ball of radius r.

    Dyadic shells are summed; the shell-wise bound sum_k c M_p(g, rho_k) rho_k^n
    is returned with it.
    """
    if r <= 0:
        raise DomainError("shell integral radius must be positive", r=r)
    _check_exponent(p)
    if y is None:
        y = np.zeros(dimension)
    y = np.asarray(y, dtype=float)
    n = len(y)
    quadrature = quadrature or default_annulus(n)
    constant = shell_constant(n)

    def shell_terms(a: float, b: float) -> Tuple[float, float]:
        points, weights = quadrature.shell(a, b, y)
        values = g(points)
        _check_finite(values, points, 'integrand')
        magnitude = _pointwise_norm(values, len(points))
        volume = float(np.sum(weights))
        return float(np.sum(weights * magnitude)), volume * weighted_power_mean(magnitude, weights, p)

    total, bound = 0.0, 0.0
    partial: List[float] = []

    if side == 'outside':
        if outer is None or outer <= r:
            raise ContractError("outside shell sums need an outer cutoff beyond r", r=r, outer=outer)
        a = r
        while a < outer:
            b = min(2.0 * a, outer)
            contribution, shell_bound = shell_terms(a, b)
            total += contribution
            bound += shell_bound
            partial.append(total)
            a = b
        return ShellIntegral(value=total, bound=bound, constant=constant,
                             partial_sums=partial, shells=len(partial))

    if side != 'inside':
        raise ContractError("side must be 'inside' or 'outside'", side=side)

    previous = None
    for k in range(max_shells):
        b = r * 2.0 ** (-k)
        contribution, shell_bound = shell_terms(0.5 * b, b)
        total += contribution
        bound += shell_bound
        partial.append(total)
        if k >= 2 and contribution <= rel_stop * total:
            if previous and contribution < previous:
                q = contribution / previous
                total += contribution * q / (1.0 - q)
            return ShellIntegral(value=total, bound=bound, constant=constant,
                                 partial_sums=partial, shells=k + 1)
        previous = contribution

    raise DivergenceError("shell sums do not settle; integrand not integrable at the center",
                          partial_sums=partial[-10:], shells=max_shells)


def calibrate_sobolev_constant(fields: Sequence[DifferentiableField], radii: Sequence[float], p: float,
                               y: Sequence[float], dense: AnnulusQuadrature,
                               margin: float = 1.1) -> float:
    """Constant C with M_{1,inf} <= C M_{2,p}, from a dense-grid run"""
    if p <= len(y):
        raise ContractError("pointwise control from M_{2,p} needs p > n", p=p, dimension=len(y))
    worst = 0.0
    for w in fields:
        for r in radii:
            report = m2p_mean(w, p, r, y, quadrature=dense)
            if report.m2p > 0:
                worst = max(worst, report.m1inf / report.m2p)
    logger.info("Sobolev constant calibrated at %.4g over %d fields", worst, len(fields))
    return margin * worst


def sobolev_check(w: DifferentiableField, r: float, p: float, y: Sequence[float], constant: float,
                  quadrature: AnnulusQuadrature = None) -> bool:
    """M_{1,inf}(w, r; y) <= constant * M_{2,p}(w, r; y) on the given rule"""
    if p <= len(y):
        raise ContractError("pointwise control from M_{2,p} needs p > n", p=p, dimension=len(y))
    report = m2p_mean(w, p, r, y, quadrature=quadrature)
    return report.m1inf <= constant * report.m2p
