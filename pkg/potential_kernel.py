"""Newtonian potential on spherical-harmonic modes.

Fields are stored per harmonic degree as nodal arrays on (radial grid x
sphere nodes). A degree-l nodal array is reconstructed anywhere with the
zonal kernel K_l(theta . eta), which also gives exact angular derivatives.
The potential K = Gamma * f is applied mode-wise by the two-integral
formula, with Delta(K f) = f.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import quad
from scipy.interpolate import CubicSpline
from scipy.special import eval_gegenbauer

from annulus_means import (AnnulusQuadrature, DifferentiableField, RadialGrid, SphericalQuadrature,
                           m2p_mean, sphere_area, weighted_power_mean)
from errors import ContractError, GridRangeError, IntegrabilityError

logger = logging.getLogger(__name__)


def harmonic_dimension(l: int, n: int) -> int:
    """Dimension of the space of degree-l spherical harmonics on S^{n-1}"""
    return (2 * l + n - 2) * math.factorial(l + n - 3) // (math.factorial(l) * math.factorial(n - 2))


class ZonalKernel:
    """Reproducing kernel of degree-l harmonics, K_l(t) = dim_l / |S| * C_l(t) / C_l(1)"""

    def __init__(self, degree: int, n: int):
        self.degree = degree
        self.dimension = n
        self.lam = (n - 2) / 2.0
        at_one = float(eval_gegenbauer(degree, self.lam, 1.0))
        self.scale = harmonic_dimension(degree, n) / (sphere_area(n) * at_one)

    def value(self, t: np.ndarray) -> np.ndarray:
        return self.scale * eval_gegenbauer(self.degree, self.lam, t)

    def d1(self, t: np.ndarray) -> np.ndarray:
        if self.degree < 1:
            return np.zeros_like(t)
        return self.scale * 2.0 * self.lam * eval_gegenbauer(self.degree - 1, self.lam + 1.0, t)

    def d2(self, t: np.ndarray) -> np.ndarray:
        if self.degree < 2:
            return np.zeros_like(t)
        return self.scale * 4.0 * self.lam * (self.lam + 1.0) * eval_gegenbauer(self.degree - 2, self.lam + 2.0, t)


class HarmonicProjector:
    """Projection of nodal data onto degree-l harmonics by quadrature against K_l"""

    def __init__(self, sphere: SphericalQuadrature, max_degree: int):
        if sphere.degree < 2 * max_degree:
            raise ContractError("sphere quadrature is not exact enough for the projection",
                                sphere_degree=sphere.degree, max_degree=max_degree)
        self.sphere = sphere
        self.max_degree = max_degree
        t = np.clip(sphere.nodes @ sphere.nodes.T, -1.0, 1.0)
        self.kernels = {l: ZonalKernel(l, sphere.dimension) for l in range(max_degree + 1)}
        self.matrices = {l: k.value(t) * sphere.weights[None, :] for l, k in self.kernels.items()}

    def project(self, values: np.ndarray, degree: int) -> np.ndarray:
        """Degree component of nodal values; the node axis is the last axis"""
        return np.asarray(values) @ self.matrices[degree].T

    def decompose(self, values: np.ndarray, degrees: Sequence[int] = None) -> Dict[int, np.ndarray]:
        degrees = range(self.max_degree + 1) if degrees is None else degrees
        return {l: self.project(values, l) for l in degrees}


@dataclass
class HarmonicModeField:
    """One harmonic degree of a field, tabulated on a radial grid.

    ``values`` is either (G,) (a radial coefficient, with ``angular`` giving
    the nodal pattern) or (G, K) nodal values of the degree-l component.
    ``profile`` evaluates the same quantity exactly at arbitrary radii.
    ``exponent_at_zero`` declares the power law continuing the field below the
    grid; None means the field vanishes there (and likewise at infinity).
    """
    degree: int
    grid: RadialGrid
    values: np.ndarray
    profile: Optional[Callable[[np.ndarray], np.ndarray]] = None
    exponent_at_zero: Optional[float] = None
    exponent_at_infinity: Optional[float] = None
    d1: Optional[np.ndarray] = None
    d2: Optional[np.ndarray] = None
    angular: Optional[np.ndarray] = None
    order: int = 0

    def nodal(self, values: np.ndarray = None) -> np.ndarray:
        values = self.values if values is None else values
        if self.angular is None or values.ndim == 2:
            return values
        return values[:, None] * self.angular[None, :]

    def at_subnodes(self) -> np.ndarray:
        grid = self.grid
        if self.profile is not None:
            flat = np.asarray(self.profile(grid.sub_r.ravel()))
            return flat.reshape(grid.sub_r.shape + flat.shape[1:])
        p0 = self.exponent_at_zero or 0.0
        scale = grid.points ** (-p0)
        scaled = self.values * scale.reshape((-1,) + (1,) * (self.values.ndim - 1))
        sub = grid.at_subnodes(scaled)
        return sub * (grid.sub_r ** p0).reshape(grid.sub_r.shape + (1,) * (self.values.ndim - 1))


def _trailing(a: np.ndarray, ndim: int) -> np.ndarray:
    return a.reshape(a.shape + (1,) * ndim)


def free_space_mode(f: HarmonicModeField, n: int) -> HarmonicModeField:
    """Radial two-integral solution of the degree-l mode of Delta v = f (l = 0 allowed)"""
    l, grid = f.degree, f.grid
    extra = f.values.ndim - 1
    r = _trailing(grid.points, extra)
    sub_r = _trailing(grid.sub_r, extra)
    fs = f.at_subnodes()

    P = grid.cumulative(fs * sub_r ** (l + n))
    Q = grid.cumulative_to_end(fs * sub_r ** (2 - l))

    p0 = f.exponent_at_zero
    if p0 is not None:
        exponent = l + n + p0
        if p0 <= -n - 1 or exponent <= 0:
            raise IntegrabilityError("source is not integrable against |x| near the origin",
                                     exponent_at_zero=p0, degree=l)
        P = P + f.values[0] * grid.r_min ** (l + n) / exponent
    p_inf = f.exponent_at_infinity
    if p_inf is not None:
        exponent = 2 - l + p_inf
        if exponent >= 0:
            raise IntegrabilityError("source decays too slowly at infinity",
                                     exponent_at_infinity=p_inf, degree=l)
        Q = Q - f.values[-1] * grid.r_max ** (2 - l) / exponent

    c = -1.0 / (2 * l + n - 2)
    v = c * (r ** (2 - n - l) * P + r ** l * Q)
    dv = c * ((2 - n - l) * r ** (1 - n - l) * P + l * r ** (l - 1) * Q)
    d2v = f.values - (n - 1) * dv / r + l * (l + n - 2) * v / r ** 2

    behaviour = l if p0 is None else min(p0 + 2.0, float(l))
    return HarmonicModeField(degree=l, grid=grid, values=v, d1=dv, d2=d2v,
                             exponent_at_zero=behaviour, angular=f.angular, order=f.order)


def apply_K_mode(f: HarmonicModeField, n: int = 3) -> HarmonicModeField:
    """v = K f on one harmonic degree l >= 1, with first and second radial derivatives"""
    if f.degree < 1:
        raise ContractError("K is applied to mean-free sources only (degree >= 1)", degree=f.degree)
    return free_space_mode(f, n)


def _assemble_jet(theta: np.ndarray, r: np.ndarray,
                  m: Dict[str, np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Value, gradient and Hessian from the kernel-weighted angular moments.

    With weights over the nodes eta_j (t_j = theta . eta_j):
    a = A2 P, b = A1 P, c = A1 P', d = A0 P'', e = A0 P', value = sum A0 P.
    """
    n = theta.shape[1]
    rr = r[:, None]
    grad = m['b'][:, None] * theta + (m['e_eta'] - m['e_t'][:, None] * theta) / rr

    tt = theta[:, :, None] * theta[:, None, :]
    eye = np.eye(n)[None, :, :]
    c_q = m['c_eta'] - m['c_t'][:, None] * theta
    d_qq = (m['d_eta_eta'] - m['d_t_eta'][:, :, None] * theta[:, None, :]
            - theta[:, :, None] * m['d_t_eta'][:, None, :] + m['d_t2'][:, None, None] * tt)
    e_eta, e_t = m['e_eta'], m['e_t'][:, None, None]
    r1 = rr[:, :, None]
    hess = (m['a'][:, None, None] * tt
            + m['b'][:, None, None] * (eye - tt) / r1
            + (theta[:, :, None] * c_q[:, None, :] + c_q[:, :, None] * theta[:, None, :]) / r1
            + d_qq / r1 ** 2
            + (-(theta[:, :, None] * e_eta[:, None, :] + e_eta[:, :, None] * theta[:, None, :])
               + 3.0 * e_t * tt - e_t * eye) / r1 ** 2)
    return m['value'], grad, hess


class ModeExpansion:
    """Sum of nodal harmonic modes, evaluable with gradient and Hessian at any point.

    inner: 'raise' | 'regular' (r^l continuation) | 'zero' below the grid;
    outer: 'decay' (r^{2-n-l}) | 'raise' | 'zero' beyond it.
    """

    def __init__(self, grid: RadialGrid, sphere: SphericalQuadrature,
                 modes: Dict[int, Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]],
                 inner: str = 'raise', outer: str = 'decay', chunk: int = 2048):
        self.grid = grid
        self.sphere = sphere
        self.inner = inner
        self.outer = outer
        self.chunk = chunk
        self._nodal_cache = None
        n = sphere.dimension
        self.dimension = n
        self.kernels = {l: ZonalKernel(l, n) for l in modes}
        self.modes = {}
        r = grid.points[:, None]
        for l, (values, d1, d2) in modes.items():
            values = np.asarray(values, dtype=float)
            d1 = np.zeros_like(values) if d1 is None else np.asarray(d1, dtype=float)
            d2 = np.zeros_like(values) if d2 is None else np.asarray(d2, dtype=float)
            self.modes[l] = {
                'values': values, 'd1': d1, 'd2': d2,
                'splines': (CubicSpline(grid.u, values * r ** (n - 2), axis=0),
                            CubicSpline(grid.u, d1 * r ** (n - 1), axis=0),
                            CubicSpline(grid.u, d2 * r ** n, axis=0)),
            }

    @classmethod
    def from_fields(cls, fields: Sequence[HarmonicModeField], sphere: SphericalQuadrature,
                    **kwargs) -> 'ModeExpansion':
        modes: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        grid = fields[0].grid
        for f in fields:
            values = f.nodal()
            d1 = f.nodal(f.d1) if f.d1 is not None else np.zeros_like(values)
            d2 = f.nodal(f.d2) if f.d2 is not None else np.zeros_like(values)
            if f.degree in modes:
                old = modes[f.degree]
                modes[f.degree] = (old[0] + values, old[1] + d1, old[2] + d2)
            else:
                modes[f.degree] = (values, d1, d2)
        return cls(grid, sphere, modes, **kwargs)

    @property
    def degrees(self) -> List[int]:
        return sorted(self.modes)

    def _radial(self, l: int, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nodal coefficient arrays (N, K) of value, d/dr and d^2/dr^2 at radii r"""
        mode = self.modes[l]
        n, grid = self.dimension, self.grid
        K = mode['values'].shape[1]
        A0 = np.zeros((len(r), K))
        A1 = np.zeros_like(A0)
        A2 = np.zeros_like(A0)
        low = r < grid.r_min * (1 - 1e-12)
        high = r > grid.r_max * (1 + 1e-12)
        inside = ~(low | high)

        if np.any(inside):
            u = np.log(np.clip(r[inside], grid.r_min, grid.r_max))
            s0, s1, s2 = mode['splines']
            rr = r[inside][:, None]
            A0[inside] = s0(u) * rr ** (2 - n)
            A1[inside] = s1(u) * rr ** (1 - n)
            A2[inside] = s2(u) * rr ** (-n)

        if np.any(low):
            if self.inner == 'raise':
                raise GridRangeError("evaluation below the tabulated radial range",
                                     r_min=grid.r_min, requested=float(np.min(r)))
            if self.inner == 'regular':
                rr = r[low][:, None]
                base = mode['values'][0][None, :] * (rr / grid.r_min) ** l
                A0[low] = base
                A1[low] = l * base / rr
                A2[low] = l * (l - 1) * base / rr ** 2

        if np.any(high):
            if self.outer == 'raise':
                raise GridRangeError("evaluation beyond the tabulated radial range",
                                     r_max=grid.r_max, requested=float(np.max(r)))
            if self.outer == 'decay':
                e = 2 - n - l
                rr = r[high][:, None]
                base = mode['values'][-1][None, :] * (rr / grid.r_max) ** e
                A0[high] = base
                A1[high] = e * base / rr
                A2[high] = e * (e - 1) * base / rr ** 2
        return A0, A1, A2

    def nodal_values(self, radii: np.ndarray) -> np.ndarray:
        """Field values at radius x sphere-node points, shape (M, K)"""
        radii = np.asarray(radii, dtype=float)
        total = np.zeros((len(radii), self.sphere.size))
        for l in self.modes:
            total += self._radial(l, radii)[0]
        return total

    def evaluate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        values, grads, hessians = [], [], []
        for start in range(0, len(points), self.chunk):
            v, g, h = self._evaluate_block(points[start:start + self.chunk])
            values.append(v)
            grads.append(g)
            hessians.append(h)
        return np.concatenate(values), np.concatenate(grads), np.concatenate(hessians)

    def _evaluate_block(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.dimension
        eta = self.sphere.nodes
        w = self.sphere.weights[None, :]
        norms = np.linalg.norm(points, axis=1)
        r = np.where(norms > 0, norms, 1e-12 * self.grid.r_min)
        theta = points / r[:, None]
        theta[norms == 0] = np.eye(n)[0]
        t = np.clip(theta @ eta.T, -1.0, 1.0)

        f0 = np.zeros_like(t)
        a = np.zeros_like(t)
        b = np.zeros_like(t)
        c = np.zeros_like(t)
        d = np.zeros_like(t)
        e = np.zeros_like(t)
        for l, kernel in self.kernels.items():
            A0, A1, A2 = self._radial(l, r)
            P, P1, P2 = kernel.value(t), kernel.d1(t), kernel.d2(t)
            f0 += A0 * P
            a += A2 * P
            b += A1 * P
            c += A1 * P1
            d += A0 * P2
            e += A0 * P1
        f0, a, b, c, d, e = (w * x for x in (f0, a, b, c, d, e))

        eta_outer = (eta[:, :, None] * eta[:, None, :]).reshape(len(eta), n * n)
        moments = {
            'value': f0.sum(axis=1), 'a': a.sum(axis=1), 'b': b.sum(axis=1),
            'c_eta': c @ eta, 'c_t': (c * t).sum(axis=1),
            'e_eta': e @ eta, 'e_t': (e * t).sum(axis=1),
            'd_eta_eta': (d @ eta_outer).reshape(-1, n, n),
            'd_t_eta': (d * t) @ eta, 'd_t2': (d * t * t).sum(axis=1),
        }
        return _assemble_jet(theta, r, moments)

    def _nodal_kernels(self):
        if self._nodal_cache is None:
            eta = self.sphere.nodes
            t = np.clip(eta @ eta.T, -1.0, 1.0)
            self._nodal_cache = {
                l: (k.value(t), k.d1(t), k.d2(t), t) for l, k in self.kernels.items()
            }
        return self._nodal_cache

    def evaluate_nodal(self, radii: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Jet at the points radii[i] * eta_k, shaped (M, K), (M, K, n), (M, K, n, n).

        The angular sums reduce to products with the kernel matrices at the
        sphere nodes, so no pointwise kernel evaluation is needed.
        """
        radii = np.asarray(radii, dtype=float)
        n, eta = self.dimension, self.sphere.nodes
        M, K = len(radii), self.sphere.size
        w = self.sphere.weights[None, :]
        eta_t = eta.T[None, :, :]
        eta_outer = (eta[:, :, None] * eta[:, None, :]).reshape(K, n * n).T[None, :, :]

        value = np.zeros((M, K))
        a = np.zeros((M, K))
        b = np.zeros((M, K))
        c_t = np.zeros((M, K))
        e_t = np.zeros((M, K))
        d_t2 = np.zeros((M, K))
        c_eta = np.zeros((M, n, K))
        e_eta = np.zeros((M, n, K))
        d_t_eta = np.zeros((M, n, K))
        d_eta_eta = np.zeros((M, n * n, K))
        for l, (P, P1, P2, t) in self._nodal_kernels().items():
            A0, A1, A2 = (x * w for x in self._radial(l, radii))
            value += A0 @ P.T
            a += A2 @ P.T
            b += A1 @ P.T
            c_t += A1 @ (P1 * t).T
            e_t += A0 @ (P1 * t).T
            d_t2 += A0 @ (P2 * t * t).T
            c_eta += (A1[:, None, :] * eta_t) @ P1.T
            e_eta += (A0[:, None, :] * eta_t) @ P1.T
            d_t_eta += (A0[:, None, :] * eta_t) @ (P2 * t).T
            d_eta_eta += (A0[:, None, :] * eta_outer) @ P2.T

        flat = lambda x: x.reshape(M * K)
        vec = lambda x: np.swapaxes(x, 1, 2).reshape(M * K, -1)
        moments = {
            'value': flat(value), 'a': flat(a), 'b': flat(b),
            'c_eta': vec(c_eta), 'c_t': flat(c_t), 'e_eta': vec(e_eta), 'e_t': flat(e_t),
            'd_eta_eta': vec(d_eta_eta).reshape(M * K, n, n), 'd_t_eta': vec(d_t_eta), 'd_t2': flat(d_t2),
        }
        theta = np.tile(eta, (M, 1))
        r = np.repeat(radii, K)
        v, g, h = _assemble_jet(theta, r, moments)
        return v.reshape(M, K), g.reshape(M, K, n), h.reshape(M, K, n, n)

    def as_field(self, source: str = 'spectral') -> DifferentiableField:
        return DifferentiableField(value=lambda x: self.evaluate(x)[0], source=source, jet=self.evaluate)


@dataclass(frozen=True)
class KernelTable:
    """Gamma(r) = c_n r^{2-n} with Delta Gamma = delta"""
    dimension: int

    @property
    def c_n(self) -> float:
        n = self.dimension
        return -1.0 / ((n - 2) * sphere_area(n))

    def value(self, x: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(np.atleast_2d(x), axis=1)
        return self.c_n * r ** (2 - self.dimension)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        r = np.linalg.norm(x, axis=1)[:, None]
        return self.c_n * (2 - self.dimension) * r ** (-self.dimension) * x

    def hessian(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        n = self.dimension
        r = np.linalg.norm(x, axis=1)[:, None, None]
        outer = x[:, :, None] * x[:, None, :]
        return self.c_n * (2 - n) * r ** (-n) * (np.eye(n)[None] - n * outer / r ** 2)

    def fd_laplacian(self, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        total = -2.0 * self.dimension * self.value(x)
        for i in range(self.dimension):
            step = np.zeros(self.dimension)
            step[i] = h
            total = total + self.value(x + step) + self.value(x - step)
        return total / h ** 2


def three_piece_mode(f: Callable[[float], float], l: int, n: int, r: float,
                     support: Tuple[float, float]) -> float:
    """Mode-wise K f at radius r assembled from inner (< r/2), near (r/2..4r) and outer (> 4r) pieces"""
    a, b = support

    def integral(g, lo, hi):
        lo, hi = max(lo, a), min(hi, b)
        if hi <= lo:
            return 0.0
        value, _ = quad(g, lo, hi, epsabs=0.0, epsrel=1e-12, limit=400)
        return value

    inner_P = integral(lambda s: s ** (l + n - 1) * f(s), 0.0, 0.5 * r)
    near_P = integral(lambda s: s ** (l + n - 1) * f(s), 0.5 * r, r)
    near_Q = integral(lambda s: s ** (1 - l) * f(s), r, 4.0 * r)
    outer_Q = integral(lambda s: s ** (1 - l) * f(s), 4.0 * r, np.inf if b == np.inf else b)
    P, Q = inner_P + near_P, near_Q + outer_Q
    return -(r ** (2 - n - l) * P + r ** l * Q) / (2 * l + n - 2)


def mode_fd_residual(solution: HarmonicModeField, source: HarmonicModeField, n: int) -> float:
    """Relative residual of the radial mode operator applied to tabulated v by 5-point FD in log r"""
    v = solution.values
    h = solution.grid.step
    l = solution.degree
    v_u = (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * h)
    v_uu = (-v[:-4] + 16 * v[1:-3] - 30 * v[2:-2] + 16 * v[3:-1] - v[4:]) / (12 * h * h)
    r = _trailing(solution.grid.points[2:-2], v.ndim - 1)
    applied = (v_uu + (n - 2) * v_u - l * (l + n - 2) * v[2:-2]) / r ** 2
    f = source.values[2:-2]
    scale = max(float(np.max(np.abs(f))), 1e-300)
    return float(np.max(np.abs(applied - f)) / scale)


# Potential estimates for mean-free sources ---------------------------------------

@dataclass
class Prop1Report:
    radii: List[float]
    lhs: List[float]
    rhs_local: List[float]
    rhs_integral: List[float]
    ratio_local: List[float]
    ratio_integral: List[float]
    constant: float
    passed: bool
    vacuous: bool = False
    trend: float = 0.0
    spread: float = 1.0

    def to_rows(self) -> Tuple[List[str], List[List[float]]]:
        header = ['r', 'M2p_Kf', 'rhs_local', 'rhs_integral', 'ratio_local', 'ratio_integral']
        rows = [list(row) for row in zip(self.radii, self.lhs, self.rhs_local, self.rhs_integral,
                                         self.ratio_local, self.ratio_integral)]
        return header, rows


def inward_trend(radii: Sequence[float], ratios: Sequence[float]) -> float:
    """Slope of log ratio against log r over the inner half of the radii.

    A bounded estimate keeps the slope above about -1; zero and infinite ratios are skipped.
    """
    r = np.asarray(radii, dtype=float)
    q = np.asarray(ratios, dtype=float)
    keep = (q > 0) & np.isfinite(q)
    r, q = r[keep], q[keep]
    order = np.argsort(r)
    r, q = r[order], q[order]
    count = max(2, (len(r) + 1) // 2)
    if len(r) < 2:
        return 0.0
    return float(np.polyfit(np.log(r[:count]), np.log(q[:count]), 1)[0])


def _panels(lo: float, hi: float, per_unit: float = 2.0, order: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights in u on [lo, hi]"""
    if hi <= lo:
        return np.zeros(0), np.zeros(0)
    x, w = leggauss(order)
    count = max(1, int(math.ceil((hi - lo) * per_unit)))
    edges = np.linspace(lo, hi, count + 1)
    half = 0.5 * np.diff(edges)
    u = (0.5 * (edges[:-1] + edges[1:]))[:, None] + half[:, None] * x[None, :]
    return u.ravel(), (half[:, None] * w[None, :]).ravel()


def _nodal_annulus_mean(source: ModeExpansion, r: float, p: float, wide: bool = False,
                        radial_nodes: int = 16) -> float:
    lo, hi = (0.5 * r, 4.0 * r) if wide else (r, 2.0 * r)
    x, w = leggauss(radial_nodes)
    ua, ub = math.log(lo), math.log(hi)
    u = 0.5 * (ua + ub) + 0.5 * (ub - ua) * x
    rho = np.exp(u)
    weights = np.outer(0.5 * (ub - ua) * w * rho ** source.dimension, source.sphere.weights).ravel()
    values = source.nodal_values(rho).ravel()
    return weighted_power_mean(np.abs(values), weights, p)


def _nodal_abs_shell(source: ModeExpansion, rho: np.ndarray) -> np.ndarray:
    """sum_k w_k |f(rho eta_k)|, the angular integral of |f|"""
    return np.abs(source.nodal_values(rho)) @ source.sphere.weights


def verify_prop1(sources: Sequence[HarmonicModeField], p: float, radii: Sequence[float],
                 sphere: SphericalQuadrature, quadrature: AnnulusQuadrature = None,
                 cap: float = 1e3, trend_floor: float = -1.0) -> Prop1Report:
    """M_{2,p}(Kf, r) against the local and the integral right-hand sides.

    Sources vanish outside their radial grid. The check passes when the largest
    ratio stays below ``cap`` and neither ratio grows toward the pole faster than
    r^trend_floor.
    """
    n = sphere.dimension
    quadrature = quadrature or AnnulusQuadrature(sphere)
    grid = sources[0].grid
    for f in sources:
        if f.degree < 1:
            raise ContractError("sources must be mean free", degree=f.degree)
        if f.exponent_at_zero is not None or f.exponent_at_infinity is not None:
            raise ContractError("estimate verification takes sources supported on their grid")

    solutions = [apply_K_mode(f, n) for f in sources]
    v_field = ModeExpansion.from_fields(solutions, sphere, inner='regular', outer='decay').as_field()
    f_exp = ModeExpansion.from_fields(sources, sphere, inner='zero', outer='zero')

    u_lo, u_hi = grid.u[0], grid.u[-1]
    # M_p(f, rho) on the annuli that meet the support
    mp_u, mp_w = _panels(u_lo - math.log(2.0), u_hi)
    mp_rho = np.exp(mp_u)
    mp_values = np.array([_nodal_annulus_mean(f_exp, rho, p) for rho in mp_rho])

    lhs, rhs1, rhs2, q1, q2 = [], [], [], [], []
    for r in radii:
        left = m2p_mean(v_field, p, r, np.zeros(n), quadrature=quadrature).m2p

        inner_u, inner_w = _panels(u_lo, min(math.log(r), u_hi))
        outer_u, outer_w = _panels(max(math.log(r), u_lo), u_hi)
        inside = float(np.sum(inner_w * np.exp(inner_u) ** (n + 1) * _nodal_abs_shell(f_exp, np.exp(inner_u))))
        outside = float(np.sum(outer_w * np.exp(outer_u) * _nodal_abs_shell(f_exp, np.exp(outer_u))))
        local = (r * r * _nodal_annulus_mean(f_exp, r, p, wide=True)
                 + r ** (1 - n) * inside + r * outside)

        below = mp_u <= math.log(r)
        integral = (r ** (1 - n) * float(np.sum((mp_w * mp_values * mp_rho ** (n + 1))[below]))
                    + r * float(np.sum((mp_w * mp_values * mp_rho)[~below])))

        lhs.append(left)
        rhs1.append(local)
        rhs2.append(integral)
        q1.append(left / local if local > 0 else (0.0 if left == 0 else np.inf))
        q2.append(left / integral if integral > 0 else (0.0 if left == 0 else np.inf))

    vacuous = all(x == 0 for x in lhs + rhs1 + rhs2)
    constant = float(max(q1 + q2)) if (q1 or q2) else 0.0
    trend = min(inward_trend(radii, q1), inward_trend(radii, q2))
    positive = [q for q in q1 + q2 if q > 0 and np.isfinite(q)]
    spread = max(positive) / min(positive) if positive else 1.0
    passed = bool(np.isfinite(constant) and constant <= cap and trend >= trend_floor)
    logger.info("Potential estimate constant %.4g over %d radii, inward trend %.3g", constant,
                len(radii), trend)
    return Prop1Report(radii=list(map(float, radii)), lhs=lhs, rhs_local=rhs1, rhs_integral=rhs2,
                       ratio_local=q1, ratio_integral=q2, constant=constant, passed=passed,
                       vacuous=vacuous, trend=trend, spread=spread)
