"""Distributional pairing of -L Z with radial test functions and extraction of
the delta constant C_y.

All integrals are taken in the frame normalized at the pole, where
a(0) = I and the pairing reduces to

    P = |S| int rho^{n-1} [m1(rho) phi(rho) + h'(rho) phi'(rho)] d rho,
    m1 = -mean_{|x|=rho}(beta : D^2 Z),   beta = a - I.

The improper inner limit is handled by dyadic shells down to eta. A second
pairing in the original coordinates checks the sqrt(det A_y) factor.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from annulus_means import AnnulusQuadrature, SphericalQuadrature, default_sphere, sphere_area
from config import Config
from errors import ContractError, ConvergenceError, GridRangeError, UnsupportedCaseError
from indicator import (FINITE, MINUS_INFINITY, SingularityClass, sigma_or_none, classify,
                       theta_from_profile)
from singular_solution import SingularSolution, h2_h3_split

logger = logging.getLogger(__name__)

SHAPES = ('quintic', 'septic')
TRANSITION_PANELS = 4


@dataclass(frozen=True)
class CutoffFamily:
    """chi(t) = 1 on [0, inner], 0 on [outer, inf), polynomial smoothstep between"""
    inner: float = 0.25
    outer: float = 0.5
    shape: str = 'quintic'

    def __post_init__(self):
        if not 0 < self.inner < self.outer:
            raise ContractError("cutoff needs 0 < inner < outer", inner=self.inner, outer=self.outer)
        if self.shape not in SHAPES:
            raise ContractError("unknown cutoff shape", shape=self.shape, known=list(SHAPES))

    @property
    def width(self) -> float:
        return self.outer - self.inner

    def _x(self, t) -> np.ndarray:
        return np.clip((np.asarray(t, dtype=float) - self.inner) / self.width, 0.0, 1.0)

    def value(self, t) -> np.ndarray:
        x = self._x(t)
        if self.shape == 'quintic':
            step = x ** 3 * (10 - 15 * x + 6 * x * x)
        else:
            step = x ** 4 * (35 - 84 * x + 70 * x * x - 20 * x ** 3)
        return 1.0 - step

    def derivative(self, t) -> np.ndarray:
        x = self._x(t)
        if self.shape == 'quintic':
            slope = 30 * x * x * (1 - x) ** 2
        else:
            slope = 140 * x ** 3 * (1 - x) ** 3
        return -slope / self.width

    def second_derivative(self, t) -> np.ndarray:
        x = self._x(t)
        if self.shape == 'quintic':
            curve = 60 * x * (1 - x) * (1 - 2 * x)
        else:
            curve = 420 * x * x * (1 - x) ** 2 * (1 - 2 * x)
        return -curve / self.width ** 2

    def __call__(self, t) -> np.ndarray:
        return self.value(t)


def _gauss_in_u(a: float, b: float, panels: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes rho and weights for int_a^b (.) d rho / rho, Gauss-Legendre in u = log rho"""
    x, w = leggauss(Config.PANEL_ORDER)
    edges = np.linspace(math.log(a), math.log(b), panels + 1)
    half = 0.5 * np.diff(edges)
    u = (0.5 * (edges[:-1] + edges[1:]))[:, None] + half[:, None] * x[None, :]
    return np.exp(u.ravel()), (half[:, None] * w[None, :]).ravel()


@dataclass
class PairingResult:
    eps: float
    eta: float
    value: float
    tail_estimate: float
    cauchy: bool
    partial_sums: List[float]
    components: Dict[str, float] = field(default_factory=dict)


class _ShellIntegrands:
    """Pairing densities rho^n (m1 phi + q' phi') of each part of Z at given radii"""

    def __init__(self, Z: SingularSolution):
        self.Z = Z
        self.n = Z.dimension

    def __call__(self, rho: np.ndarray, phi: np.ndarray, dphi: np.ndarray) -> Dict[str, np.ndarray]:
        Z, n = self.Z, self.n
        alpha, alpha_n = Z.profile.means(rho)
        out = {}
        for name, (dq, d2q) in h2_h3_split(Z.radial, rho).items():
            m1 = -((alpha - 1.0) * d2q + (alpha_n - n - alpha + 1.0) * dq / rho)
            out[name] = rho ** n * (m1 * phi + dq * dphi)
        out['v'] = rho ** n * self._v_density(rho) * phi
        return out

    def _v_density(self, rho: np.ndarray) -> np.ndarray:
        """-mean(beta : D^2 v) on each sphere; the spherical mean of d_rho v is zero"""
        expansion = self.Z.angular.expansion
        if expansion is None:
            return np.zeros_like(rho)
        nodes = self.Z.sphere.nodes
        K = nodes.shape[0]
        points = (rho[:, None, None] * nodes[None, :, :]).reshape(-1, self.n)
        _, _, hess = expansion.evaluate(points)
        beta = self.Z.field(points) - np.eye(self.n)[None]
        contraction = np.einsum('kab,kab->k', beta, hess).reshape(len(rho), K)
        return -self.Z.sphere.mean(contraction.T)


def pair_LZ(Z: SingularSolution, eps_k: float, eta: float = None, cutoff: CutoffFamily = None,
            tol: float = None, strict: bool = False) -> PairingResult:
    """<-L Z, phi_eps> with phi_eps(x) = chi(|x|/eps) in the normalized frame"""
    cutoff = cutoff or CutoffFamily()
    tol = 1e-2 * Config.TOL_SCALE if tol is None else tol
    eta = eps_k * Config.INNER_CUTOFF_RATIO if eta is None else float(eta)
    grid = Z.radial.grid
    a, b = cutoff.inner * eps_k, cutoff.outer * eps_k
    if b > grid.r_max * (1 + 1e-12) or eta < grid.r_min * (1 - 1e-12):
        raise GridRangeError("pairing support is not covered by the singular profile",
                             support=[eta, b], r_min=grid.r_min, r_max=grid.r_max)
    if not eta < a:
        raise ContractError("inner cutoff must lie below the plateau of chi", eta=eta, plateau=a)

    area = sphere_area(Z.dimension)
    density = _ShellIntegrands(Z)

    rho, w = _gauss_in_u(a, b, TRANSITION_PANELS)
    t = rho / eps_k
    parts = density(rho, cutoff.value(t), cutoff.derivative(t) / eps_k)
    components = {name: area * float(np.dot(w, values)) for name, values in parts.items()}
    partial = [sum(components.values())]
    contributions = []

    hi = a
    while hi > eta * (1 + 1e-12):
        lo = max(0.5 * hi, eta)
        rho, w = _gauss_in_u(lo, hi)
        parts = density(rho, np.ones_like(rho), np.zeros_like(rho))
        shell = 0.0
        for name, values in parts.items():
            piece = area * float(np.dot(w, values))
            components[name] += piece
            shell += piece
        contributions.append(shell)
        partial.append(partial[-1] + shell)
        hi = lo

    value = partial[-1]
    tail = _tail_estimate(contributions, floor=1e-14 * max(abs(value), 1e-300))
    cauchy = tail <= tol * max(abs(value), 1e-300)
    logger.debug("Pairing at eps = %.4g: %.12g (tail %.3g, %d shells)", eps_k, value, tail,
                 len(contributions))
    if strict and not cauchy:
        raise ConvergenceError("shell sums of the pairing are not Cauchy", eps=eps_k,
                               tail_estimate=tail, partial_sums=partial[-6:])
    return PairingResult(eps=float(eps_k), eta=eta, value=value, tail_estimate=tail,
                         cauchy=bool(cauchy), partial_sums=partial, components=components)


def pair_LZ_original(Z: SingularSolution, eps_k: float, eta: float = None, cutoff: CutoffFamily = None,
                     sphere: SphericalQuadrature = None, tol: float = None) -> PairingResult:
    """<-L Z_y, phi> with phi(x) = chi(|x - y| / eps) in the original coordinates.

    -L Z = -A_y : D^2 Z - (A_x - A_y) : D^2 Z. The first part is paired by parts,
    as int A_y grad Z . grad phi, and the second pointwise. The value is C_y itself.
    """
    cutoff = cutoff or CutoffFamily()
    tol = 1e-2 * Config.TOL_SCALE if tol is None else tol
    eta = eps_k * Config.INNER_CUTOFF_RATIO if eta is None else float(eta)
    frame, n = Z.frame, Z.dimension
    grid = Z.radial.grid
    a, b = cutoff.inner * eps_k, cutoff.outer * eps_k
    stretch = float(np.linalg.norm(frame.B, 2))
    shrink = 1.0 / float(np.linalg.norm(frame.Binv, 2))
    if b * stretch > grid.r_max * (1 + 1e-12) or eta * shrink < grid.r_min * (1 - 1e-12):
        raise GridRangeError("pairing support is not covered by the singular profile",
                             support=[eta, b], stretch=stretch, r_min=grid.r_min, r_max=grid.r_max)
    if not eta < a:
        raise ContractError("inner cutoff must lie below the plateau of chi", eta=eta, plateau=a)

    quadrature = AnnulusQuadrature(sphere or default_sphere(n))
    A_y = frame.A_pole

    def shell(lo: float, hi: float, transition: bool) -> float:
        points, weights = quadrature.shell(lo, hi, frame.pole)
        _, grad, hess = Z.evaluate(points)
        A = frame.Binv[None] @ Z.field(frame.to_normalized(points)) @ frame.Binv[None]
        density = -np.einsum('kab,kab->k', A - A_y[None], hess)
        if transition:
            d = points - frame.pole
            rho = np.linalg.norm(d, axis=1)
            t = rho / eps_k
            dphi = (cutoff.derivative(t) / (eps_k * rho))[:, None] * d
            density = density * cutoff.value(t) + np.einsum('ka,ab,kb->k', grad, A_y, dphi)
        return float(np.dot(weights, density))

    edges = np.geomspace(a, b, TRANSITION_PANELS + 1)
    transition = sum(shell(lo, hi, True) for lo, hi in zip(edges[:-1], edges[1:]))
    partial = [transition]
    contributions = []
    hi = a
    while hi > eta * (1 + 1e-12):
        lo = max(0.5 * hi, eta)
        contributions.append(shell(lo, hi, False))
        partial.append(partial[-1] + contributions[-1])
        hi = lo

    value = partial[-1]
    tail = _tail_estimate(contributions, floor=1e-14 * max(abs(value), 1e-300))
    return PairingResult(eps=float(eps_k), eta=eta, value=value, tail_estimate=tail,
                         cauchy=bool(tail <= tol * max(abs(value), 1e-300)), partial_sums=partial,
                         components={'transition': transition, 'inner': value - transition})


def affine_covariance(Z: SingularSolution, eps_k: float, cutoff: CutoffFamily = None,
                      sphere: SphericalQuadrature = None) -> Dict[str, float]:
    """Original-coordinate pairing against sqrt(det A_y) times the normalized one at the same eps"""
    original = pair_LZ_original(Z, eps_k, cutoff=cutoff, sphere=sphere).value
    scaled = math.sqrt(Z.frame.det) * pair_LZ(Z, eps_k, cutoff=cutoff).value
    return {'eps': float(eps_k), 'original': original, 'normalized_scaled': scaled,
            'gap': abs(original - scaled) / max(abs(scaled), 1e-300)}


def _tail_estimate(contributions: Sequence[float], floor: float = 0.0) -> float:
    """Geometric tail of the remaining shells from the last two contributions"""
    if not contributions or abs(contributions[-1]) <= floor:
        return 0.0
    if len(contributions) < 2:
        return math.inf
    last, prev = abs(contributions[-1]), abs(contributions[-2])
    q = last / prev if prev > 0 else math.inf
    return last * q / (1.0 - q) if q < 1 else math.inf


def theoretical_constant(n: int, I0: Optional[float], det: float = 1.0) -> float:
    """|S| sqrt(det A_y) e^{I_y(0)}; zero when I_y(r) -> -inf"""
    if I0 is None:
        return 0.0
    return sphere_area(n) * math.sqrt(det) * math.exp(I0)


@dataclass
class DeltaConstantReport:
    case: str
    schedule: List[float]
    etas: List[float]
    pairings: List[PairingResult]
    rate: List[float]
    rate_name: str
    extrapolated: float
    C_y: float
    theoretical: float
    error_estimate: float
    det: float
    cutoff: CutoffFamily
    remainder_c: float
    certificate: Dict[str, Any] = field(default_factory=dict)

    @property
    def values(self) -> List[float]:
        return [p.value for p in self.pairings]

    @property
    def relative_error(self) -> float:
        if self.theoretical == 0:
            return abs(self.C_y)
        return abs(self.C_y - self.theoretical) / self.theoretical

    def passes(self, tol: float) -> bool:
        if self.case == MINUS_INFINITY:
            return bool(self.certificate.get('monotone_decay')) and abs(self.C_y) <= tol
        return self.relative_error <= tol

    def to_rows(self) -> Tuple[List[str], List[List[float]]]:
        header = ['eps', 'eta', 'pairing', 'tail_estimate', 'rate', 'h2_part', 'h3_part', 'v_part']
        rows = [[p.eps, p.eta, p.value, p.tail_estimate, r, p.components['h2'], p.components['h3'],
                 p.components['v']] for p, r in zip(self.pairings, self.rate)]
        return header, rows

    def summary(self) -> Dict[str, Any]:
        return {
            'case': self.case, 'cutoff': self.cutoff.shape, 'rate': self.rate_name,
            'extrapolated_normalized': self.extrapolated, 'C_y': self.C_y,
            'theoretical': self.theoretical, 'relative_error': self.relative_error,
            'error_estimate': self.error_estimate, 'det_A_y': self.det,
            'remainder_c': self.remainder_c, **self.certificate,
        }


def default_schedule(eps: float, length: int = None) -> List[float]:
    length = int(length or Config.SCHEDULE_LENGTH)
    return [eps * 2.0 ** (-k) for k in range(length)]


def _pairing_rate(Z: SingularSolution, etas: np.ndarray, cls: SingularityClass) -> Tuple[np.ndarray, str]:
    profile = Z.profile
    if cls.variant == MINUS_INFINITY:
        return np.exp(profile.I_at(etas)), 'exp_I'
    omega = np.asarray(profile.modulus(etas), dtype=float)
    sig = sigma_or_none(profile.modulus, etas)
    theta = theta_from_profile(profile, cls.I0)(etas)
    rate = np.maximum(omega, theta)
    if sig is not None:
        rate = np.maximum(rate, sig)
    return rate, 'max(omega,sigma,theta)'


def _extrapolate(values: np.ndarray, rate: np.ndarray) -> float:
    """Intercept of values = C + b rate; the plain mean when the rate is flat"""
    if np.ptp(rate) <= 1e-14 * max(float(np.max(np.abs(rate))), 1e-300):
        return float(np.mean(values))
    design = np.column_stack([np.ones_like(rate), rate])
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    return float(coef[0])


def _covariance_certificate(Z: SingularSolution, schedule: Sequence[float],
                            cutoff: CutoffFamily) -> Dict[str, float]:
    """Affine covariance at the largest schedule radius whose original-coordinate support fits"""
    for eps_k in schedule:
        try:
            check = affine_covariance(Z, eps_k, cutoff=cutoff)
        except GridRangeError:
            continue
        return {'original_frame_C': check['original'], 'original_frame_eps': check['eps'],
                'affine_gap': check['gap']}
    logger.warning("No schedule radius fits the original-coordinate pairing")
    return {}


def extract_Cy(Z: SingularSolution, schedule: Sequence[float] = None, cls: SingularityClass = None,
               cutoff: CutoffFamily = None) -> DeltaConstantReport:
    """Extrapolate P(eps_k) to the delta constant of -L Z_y"""
    cls = cls or classify(Z.profile)
    if cls.variant not in (FINITE, MINUS_INFINITY):
        raise UnsupportedCaseError("the delta constant is only defined for FiniteLimit and "
                                   "MinusInfinity indicators", variant=cls.variant)
    cutoff = cutoff or CutoffFamily()
    schedule = list(schedule or default_schedule(Z.radial.grid.r_max))
    if len(schedule) < 4 or np.any(np.diff(schedule) >= 0):
        raise ContractError("schedule must be decreasing with at least 4 entries", schedule=schedule)

    pairings = []
    for eps_k in schedule:
        result = pair_LZ(Z, eps_k, cutoff=cutoff)
        logger.info("P(%.4g) = %.12g", eps_k, result.value)
        pairings.append(result)

    etas = np.array([p.eta for p in pairings])
    values = np.array([p.value for p in pairings])
    rate, rate_name = _pairing_rate(Z, etas, cls)
    C0 = _extrapolate(values, rate)
    half = len(values) // 2
    C0_late = _extrapolate(values[half:], rate[half:])
    error = abs(C0 - C0_late) + 1e-6 * abs(C0)

    remainder = np.array([p.components['h3'] + p.components['v'] for p in pairings])
    scale = max(float(np.max(np.abs(values))), 1e-300)
    with np.errstate(divide='ignore', invalid='ignore'):
        ratios = np.where(rate > 0, np.abs(remainder) / rate, np.where(np.abs(remainder) <= 1e-12 * scale,
                                                                       0.0, np.inf))

    det = Z.frame.det
    certificate: Dict[str, Any] = {'cauchy': all(p.cauchy for p in pairings),
                                   'max_tail_estimate': max(p.tail_estimate for p in pairings)}
    if cls.variant == MINUS_INFINITY:
        last = values[-3:]
        certificate['monotone_decay'] = bool(np.all(np.diff(last) < 0) and np.all(last > 0))
        certificate['last_pairings'] = last.tolist()
    if not Z.frame.is_identity:
        certificate.update(_covariance_certificate(Z, schedule, cutoff))
    report = DeltaConstantReport(
        case=cls.label(), schedule=schedule, etas=etas.tolist(), pairings=pairings, rate=rate.tolist(),
        rate_name=rate_name, extrapolated=C0, C_y=math.sqrt(det) * C0,
        theoretical=theoretical_constant(Z.dimension, cls.I0 if cls.is_finite else None, det),
        error_estimate=math.sqrt(det) * error, det=det, cutoff=cutoff,
        remainder_c=float(np.max(ratios)), certificate=certificate,
    )
    logger.info("Delta constant C_y = %.10g (theory %.10g, estimate %.2g)", report.C_y,
                report.theoretical, report.error_estimate)
    return report


def cutoff_independence(Z: SingularSolution, cls: SingularityClass = None,
                        shapes: Sequence[str] = SHAPES) -> Dict[str, Any]:
    """Extrapolated constants for several cutoff shapes and their spread"""
    cls = cls or classify(Z.profile)
    reports = {shape: extract_Cy(Z, cls=cls, cutoff=CutoffFamily(shape=shape)) for shape in shapes}
    values = [r.C_y for r in reports.values()]
    estimate = max(r.error_estimate for r in reports.values())
    spread = max(values) - min(values)
    return {'reports': reports, 'spread': spread, 'error_estimate': estimate,
            'consistent': spread <= 2.0 * estimate + 1e-12 * max(abs(v) for v in values)}
