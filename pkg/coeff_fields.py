"""Coefficient fields A_x, their validation, and the affine frame at a pole."""
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import eval_gegenbauer

from annulus_means import sphere_area
from errors import CertificateError, ConfigError, ContractError, EllipticityError
from math_parser import MathParser
from modulus import (ModulusOfContinuity, expression_modulus, log_modulus, loglog_modulus,
                     power_modulus, zero_modulus)

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12


@dataclass
class CoefficientField:
    """Symmetric positive definite matrix field on the ball |x| < domain_radius.

    ``evaluator`` maps points of shape (N, n) to matrices (N, n, n).
    ``radial_profile`` is set for fields of the form I + g(|x|) x x^T / |x|^2.
    """
    dimension: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    modulus: ModulusOfContinuity
    domain_radius: float
    family: str = 'custom'
    params: Dict[str, Any] = field(default_factory=dict)
    radial_profile: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lambda_bounds: Optional[Tuple[float, float]] = None

    @property
    def radial(self) -> bool:
        return self.radial_profile is not None

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.evaluator(points[None, :])[0]
        return self.evaluator(points)

    def at(self, x: Sequence[float]) -> np.ndarray:
        return self(np.asarray(x, dtype=float))

    def describe(self) -> Dict[str, Any]:
        return {
            'family': self.family,
            'dimension': self.dimension,
            'domain_radius': self.domain_radius,
            **{k: v for k, v in self.params.items() if not callable(v)},
        }


class GilbargSerrinField(CoefficientField):
    """a_ij = delta_ij + g(|x|) x_i x_j / |x|^2"""

    @property
    def g(self) -> Callable[[np.ndarray], np.ndarray]:
        return self.radial_profile

    def trace_identity_residual(self, points: np.ndarray) -> float:
        """max |tr A - n <A z, z>/|z|^2 - (1 - n) g(|z|)| over the given points"""
        points = np.asarray(points, dtype=float)
        radii = np.linalg.norm(points, axis=1)
        theta = points / radii[:, None]
        defect = trace_defect(self(points), theta)
        return float(np.max(np.abs(defect - (1 - self.dimension) * self.g(radii))))


@dataclass(frozen=True)
class AffineFrame:
    pole: np.ndarray
    B: np.ndarray
    Binv: np.ndarray
    det: float
    A_pole: np.ndarray

    @property
    def is_identity(self) -> bool:
        return bool(np.allclose(self.B, np.eye(len(self.pole)), atol=1e-14, rtol=0)
                    and not np.any(self.pole))

    def to_normalized(self, x: np.ndarray) -> np.ndarray:
        """x -> B (x - y)"""
        return (np.asarray(x, dtype=float) - self.pole) @ self.B.T

    def from_normalized(self, xt: np.ndarray) -> np.ndarray:
        return self.pole + np.asarray(xt, dtype=float) @ self.Binv.T


def trace_defect(matrices: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """tr A - n <A theta, theta> for unit vectors theta (vectorized)"""
    n = matrices.shape[-1]
    quadratic = np.einsum('...i,...ij,...j->...', theta, matrices, theta)
    return np.trace(matrices, axis1=-2, axis2=-1) - n * quadratic


def _identity_stack(count: int, n: int) -> np.ndarray:
    return np.broadcast_to(np.eye(n), (count, n, n)).copy()


def _unit(vector: Sequence[float], n: int) -> np.ndarray:
    d = np.zeros(n)
    vector = np.asarray(vector, dtype=float)
    d[:min(n, len(vector))] = vector[:n]
    norm = np.linalg.norm(d)
    if norm == 0:
        raise ConfigError("direction vector must be nonzero", direction=vector.tolist())
    return d / norm


def identity_field(n: int = 3, domain_radius: float = 1.0) -> CoefficientField:
    return CoefficientField(
        dimension=n, evaluator=lambda x: _identity_stack(len(x), n), modulus=zero_modulus(),
        domain_radius=domain_radius, family='identity', lambda_bounds=(1.0, 1.0),
    )


def constant_field(matrix: Sequence[Sequence[float]], domain_radius: float = 1.0) -> CoefficientField:
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[0]
    if matrix.shape != (n, n):
        raise ConfigError("constant coefficient matrix must be square", shape=list(matrix.shape))
    eig = np.linalg.eigvalsh(0.5 * (matrix + matrix.T))
    return CoefficientField(
        dimension=n, evaluator=lambda x: np.broadcast_to(matrix, (len(x), n, n)).copy(),
        modulus=zero_modulus(), domain_radius=domain_radius, family='constant',
        params={'matrix': matrix.tolist()}, lambda_bounds=(float(eig[0]), float(eig[-1])),
    )


def holder_field(lam: float = 0.5, amplitude: float = 0.1, n: int = 3, domain_radius: float = 0.5,
                 profile: str = 'power', direction: Sequence[float] = (1.0,), gamma_: float = 1.0,
                 scale: float = math.e) -> CoefficientField:
    """A = I + amplitude * rho(|x|) d d^T with rho(t) = t^lam or log(scale/t)^(-gamma).

    The angular mean of the indicator integrand vanishes, so I(r) = 0 and R = 0.
    """
    d = _unit(direction, n)
    if profile == 'power':
        modulus = power_modulus(lam, amplitude)
        rho = lambda t: np.asarray(t, dtype=float) ** lam
    elif profile == 'log':
        # Subadditivity of rho needs concavity on the whole ball
        if domain_radius > scale * math.exp(-(gamma_ + 1.0)):
            raise ConfigError("log-profile Holder field needs domain_radius <= scale*exp(-(gamma+1))",
                              domain_radius=domain_radius, limit=scale * math.exp(-(gamma_ + 1.0)))
        modulus = log_modulus(gamma_, amplitude, scale)
        rho = lambda t: modulus(t) / amplitude if amplitude else np.zeros_like(t)
    else:
        raise ConfigError(f"unknown Holder profile '{profile}'", profile=profile)

    outer = d[:, None] * d[None, :]

    def evaluator(x):
        x = np.asarray(x, dtype=float)
        s = amplitude * rho(np.linalg.norm(x, axis=1))
        return np.eye(n)[None, :, :] + s[:, None, None] * outer[None, :, :]

    return CoefficientField(
        dimension=n, evaluator=evaluator, modulus=modulus, domain_radius=domain_radius,
        family='holder', params={'lam': lam, 'amplitude': amplitude, 'profile': profile,
                                 'gamma': gamma_, 'direction': d.tolist()},
    )


def _gs_evaluator(g: Callable[[np.ndarray], np.ndarray], n: int):
    def evaluator(x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=1)
        theta = np.zeros_like(x)
        positive = r > 0
        theta[positive] = x[positive] / r[positive, None]
        values = np.zeros_like(r)
        values[positive] = g(r[positive])
        return np.eye(n)[None, :, :] + values[:, None, None] * theta[:, :, None] * theta[:, None, :]
    return evaluator


def gs_field(g: Callable[[np.ndarray], np.ndarray], modulus: ModulusOfContinuity, n: int = 3,
             domain_radius: float = 1.0, params: Dict[str, Any] = None) -> GilbargSerrinField:
    """Gilbarg-Serrin field for a radial profile g with g(0) = 0"""
    return GilbargSerrinField(
        dimension=n, evaluator=_gs_evaluator(g, n), modulus=modulus, domain_radius=domain_radius,
        family='gs', params=dict(params or {}), radial_profile=g,
    )


def gs_power_field(c: float = 1.0, lam: float = 0.5, n: int = 3, domain_radius: float = 1.0) -> GilbargSerrinField:
    """g(r) = c r^lam; the spectral-norm modulus is 3|c| t^lam for lam <= 1"""
    if lam <= 0:
        raise ConfigError("GS power profile needs a positive exponent", lam=lam)
    exponent = min(lam, 0.9)
    amplitude = 3.0 * abs(c) if lam <= 1.0 else abs(c) * (2.0 + lam)
    g = lambda r: c * np.asarray(r, dtype=float) ** lam
    return gs_field(g, power_modulus(exponent, amplitude), n=n, domain_radius=domain_radius,
                    params={'profile': 'power', 'c': c, 'lam': lam})


def gs_counterexample_field(n: int = 3, sign: float = -1.0,
                            domain_radius: float = math.exp(-2.0)) -> GilbargSerrinField:
    """g(r) = sign * (1 + (n-1) log r)^{-1}

    sign = -1 drives I(r) to -infinity, sign = +1 to +infinity. The profile is
    singular at r = exp(-1/(n-1)), so the ball stays inside exp(-2).
    """
    if domain_radius > math.exp(-2.0):
        raise ConfigError("the logarithmic GS profile is only registered on radii <= exp(-2)",
                          domain_radius=domain_radius)
    if sign not in (-1.0, 1.0):
        raise ConfigError("counterexample sign must be -1 or +1", sign=sign)

    def g(r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        positive = r > 0
        out[positive] = sign / (1.0 + (n - 1) * np.log(r[positive]))
        return out

    return gs_field(g, log_modulus(1.0, 3.0, math.e), n=n, domain_radius=domain_radius,
                    params={'profile': 'counterexample', 'sign': sign})


def normalized_harmonic(l: int, n: int) -> Callable[[np.ndarray], np.ndarray]:
    """Zonal harmonic of degree l scaled to 1 at t = 1 (Legendre for n = 3)"""
    lam = (n - 2) / 2.0
    at_one = float(eval_gegenbauer(l, lam, 1.0))
    return lambda t: eval_gegenbauer(l, lam, np.asarray(t, dtype=float)) / at_one


def perturbation_field(degree: int = 2, amplitude: float = 0.05, lam: float = 0.5, n: int = 3,
                       domain_radius: float = 1.0, axis: Sequence[float] = (0.0, 0.0, 1.0)) -> CoefficientField:
    """A = I + amplitude r^lam Y_l(theta . axis) e1 e1^T, an angular perturbation of degree l"""
    if degree < 1:
        raise ConfigError("perturbation degree must be at least 1", degree=degree)
    a = _unit(axis, n)
    harmonic = normalized_harmonic(degree, n)
    # Lipschitz constant of the normalized zonal harmonic on [-1, 1]
    lipschitz = degree * (degree + n - 2) / (n - 1.0)
    modulus = power_modulus(min(lam, 0.9), amplitude * (max(1.0, lam) + 2.0 * lipschitz))
    e1 = np.zeros((n, n))
    e1[0, 0] = 1.0

    def evaluator(x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=1)
        t = np.zeros_like(r)
        positive = r > 0
        t[positive] = x[positive] @ a / r[positive]
        s = amplitude * r ** lam * harmonic(t)
        return np.eye(n)[None, :, :] + s[:, None, None] * e1[None, :, :]

    return CoefficientField(
        dimension=n, evaluator=evaluator, modulus=modulus, domain_radius=domain_radius,
        family='perturbation', params={'degree': degree, 'amplitude': amplitude, 'lam': lam,
                                       'axis': a.tolist()},
    )


def frozen_fundamental_solution(A_y: np.ndarray, d: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Constant-coefficient fundamental solution <A^{-1}d, d>^{(2-n)/2} / ((n-2)|S|sqrt(det A))

    Returns value (N,), gradient (N, n) and Hessian (N, n, n) at offsets d.
    """
    A_y = np.asarray(A_y, dtype=float)
    d = np.atleast_2d(np.asarray(d, dtype=float))
    n = A_y.shape[0]
    inv = np.linalg.inv(A_y)
    c = 1.0 / ((n - 2) * sphere_area(n) * math.sqrt(np.linalg.det(A_y)))
    Ad = d @ inv.T
    q = np.einsum('ij,ij->i', Ad, d)
    value = c * q ** ((2.0 - n) / 2.0)
    grad = c * (2.0 - n) * q[:, None] ** (-n / 2.0) * Ad
    hess = c * (2.0 - n) * (
        q[:, None, None] ** (-n / 2.0) * inv[None, :, :]
        - n * q[:, None, None] ** (-n / 2.0 - 1.0) * Ad[:, :, None] * Ad[:, None, :]
    )
    return value, grad, hess


# Validation -----------------------------------------------------------------

def _ball_samples(rng: np.random.Generator, count: int, n: int, radius: float) -> np.ndarray:
    directions = rng.standard_normal((count, n))
    directions /= np.linalg.norm(directions, axis=1)[:, None]
    radii = radius * rng.random(count) ** (1.0 / n)
    return directions * radii[:, None]


def check_symmetry(f: CoefficientField, points: np.ndarray) -> float:
    A = f(points)
    asym = np.max(np.abs(A - np.swapaxes(A, -1, -2)), axis=(1, 2))
    worst = int(np.argmax(asym))
    if asym[worst] > SYMMETRY_TOL:
        raise EllipticityError("coefficient matrix is not symmetric",
                               point=points[worst].tolist(), asymmetry=float(asym[worst]))
    return float(asym[worst])


def check_ellipticity(f: CoefficientField, rng: np.random.Generator, samples: int = 1000) -> Tuple[float, float]:
    """Extreme eigenvalues over random points of the ball; raises on a non-SPD sample"""
    points = _ball_samples(rng, samples, f.dimension, f.domain_radius)
    points[0] = 0.0
    check_symmetry(f, points)
    eig = np.linalg.eigvalsh(f(points))
    low = eig[:, 0]
    if np.any(low <= 0):
        index = int(np.argmax(low <= 0))
        raise EllipticityError("coefficient matrix is not positive definite",
                               point=points[index].tolist(), eigenvalue=float(low[index]))
    return float(np.min(low)), float(np.max(eig[:, -1]))


def sample_continuity(f: CoefficientField, radii: Sequence[float], pairs: int,
                      rng: np.random.Generator) -> List[Dict[str, Any]]:
    """max ||A_x - A_y||_2 over random pairs with |x - y| = r, against omega(r)"""
    n = f.dimension
    rows = []
    for r in radii:
        y = _ball_samples(rng, pairs, n, max(f.domain_radius - r, 0.0))
        u = rng.standard_normal((pairs, n))
        u /= np.linalg.norm(u, axis=1)[:, None]
        x = y + r * u
        diff = f(x) - f(y)
        norms = np.linalg.norm(diff, ord=2, axis=(1, 2))
        worst = int(np.argmax(norms))
        omega = float(f.modulus(r))
        rows.append({
            'r': float(r),
            'max_norm': float(norms[worst]),
            'omega': omega,
            'ratio': float(norms[worst] / omega) if omega > 0 else (0.0 if norms[worst] == 0 else np.inf),
            'x': x[worst].tolist(),
            'y': y[worst].tolist(),
        })
    return rows


def continuity_certificate(f: CoefficientField, rng: np.random.Generator, pairs: int = 200) -> List[Dict[str, Any]]:
    radii = np.logspace(-3, math.log10(0.5), 10) * f.domain_radius
    rows = sample_continuity(f, radii, pairs, rng)
    for row in rows:
        if row['max_norm'] > row['omega'] * (1 + 1e-9) + 1e-12:
            raise CertificateError("declared modulus is smaller than the sampled oscillation", **row)
    return rows


def validate_field(f: CoefficientField, rng: np.random.Generator = None) -> CoefficientField:
    """Symmetry, ellipticity and continuity checks; fills lambda_bounds"""
    rng = rng or np.random.default_rng(0)
    bounds = check_ellipticity(f, rng)
    continuity_certificate(f, rng)
    f.lambda_bounds = bounds
    logger.info("Validated %s field: lambda in [%.4g, %.4g]", f.family, *bounds)
    return f


# Affine normalization ---------------------------------------------------------

def affine_frame(A_y: np.ndarray, pole: Sequence[float]) -> AffineFrame:
    A_y = np.asarray(A_y, dtype=float)
    if np.max(np.abs(A_y - A_y.T)) > SYMMETRY_TOL:
        raise EllipticityError("A_y is not symmetric", pole=list(pole))
    eig, vec = np.linalg.eigh(A_y)
    if eig[0] <= 0:
        raise EllipticityError("A_y is not positive definite", pole=list(pole), eigenvalues=eig.tolist())
    B = (vec / np.sqrt(eig)) @ vec.T
    Binv = (vec * np.sqrt(eig)) @ vec.T
    return AffineFrame(pole=np.asarray(pole, dtype=float), B=B, Binv=Binv,
                       det=float(np.prod(eig)), A_pole=A_y)


def normalize_at(f: CoefficientField, y: Sequence[float]) -> Tuple[CoefficientField, AffineFrame]:
    """Field in x~ = B (x - y) with a~(0) = I, plus the frame"""
    y = np.asarray(y, dtype=float)
    if np.linalg.norm(y) >= f.domain_radius:
        raise ContractError("pole must lie inside the field's ball", pole=y.tolist(),
                            domain_radius=f.domain_radius)
    frame = affine_frame(f.at(y), y)
    if frame.is_identity:
        return f, frame

    B, Binv = frame.B, frame.Binv
    norm_B = float(np.linalg.norm(B, 2))
    norm_Binv = float(np.linalg.norm(Binv, 2))

    def evaluator(xt):
        A = f(frame.from_normalized(xt))
        return B[None, :, :] @ A @ B[None, :, :]

    radial = f.radial_profile if not np.any(y) and np.allclose(B, np.eye(len(y))) else None
    normalized = CoefficientField(
        dimension=f.dimension, evaluator=evaluator,
        modulus=f.modulus if f.modulus.is_zero else f.modulus.scaled(norm_B ** 2, norm_Binv),
        domain_radius=(f.domain_radius - float(np.linalg.norm(y))) / norm_Binv,
        family=f.family, params={**f.params, 'pole': y.tolist()}, radial_profile=radial,
    )
    return normalized, frame


# Manifest ingestion -------------------------------------------------------------

FIELD_KEYS = {
    'identity': {'family', 'dimension', 'domain_radius'},
    'constant': {'family', 'dimension', 'domain_radius', 'matrix', 'diag'},
    'holder': {'family', 'dimension', 'domain_radius', 'lam', 'amplitude', 'profile', 'gamma',
               'scale', 'direction'},
    'gs': {'family', 'dimension', 'domain_radius', 'g', 'c', 'lam', 'sign'},
    'perturbation': {'family', 'dimension', 'domain_radius', 'degree', 'amplitude', 'lam', 'axis'},
}

MODULUS_KEYS = {
    'power': {'family', 'lam', 'amplitude'},
    'log': {'family', 'gamma', 'amplitude', 'scale'},
    'loglog': {'family', 'gamma', 'amplitude'},
    'expression': {'family', 'omega', 'kappa'},
    'zero': {'family'},
}


def _check_keys(section: Mapping[str, str], allowed: set, where: str):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]", keys=unknown, allowed=sorted(allowed))


def load_modulus(section: Mapping[str, str], parser: MathParser = None) -> ModulusOfContinuity:
    family = section.get('family', '').strip()
    if family not in MODULUS_KEYS:
        raise ConfigError(f"unknown modulus family '{family}'", known=sorted(MODULUS_KEYS))
    _check_keys(section, MODULUS_KEYS[family], 'modulus')
    amplitude = float(section.get('amplitude', 1.0))
    if family == 'power':
        return power_modulus(float(section.get('lam', 0.5)), amplitude)
    if family == 'log':
        return log_modulus(float(section.get('gamma', 1.0)), amplitude,
                           float(section.get('scale', math.e)))
    if family == 'loglog':
        return loglog_modulus(float(section.get('gamma', 1.0)), amplitude)
    if family == 'expression':
        if 'omega' not in section:
            raise ConfigError("expression modulus needs an 'omega' entry")
        kappa = float(section['kappa']) if 'kappa' in section else None
        return expression_modulus(section['omega'], kappa, parser)
    return zero_modulus()


def load_field(config: Mapping[str, Mapping[str, str]], rng: np.random.Generator = None,
               parser: MathParser = None) -> CoefficientField:
    """Build and validate a field from the [field] and [modulus] manifest sections"""
    parser = parser or MathParser()
    if 'field' not in config:
        raise ConfigError("manifest has no [field] section")
    section = dict(config['field'])
    family = section.get('family', '').strip()
    if family not in FIELD_KEYS:
        raise ConfigError(f"unknown field family '{family}'", known=sorted(FIELD_KEYS))
    _check_keys(section, FIELD_KEYS[family], 'field')

    n = int(section.get('dimension', 3))
    if n < 3:
        raise ConfigError("only dimensions n >= 3 are supported", dimension=n)
    radius = float(section.get('domain_radius', 1.0))

    if family == 'identity':
        f = identity_field(n, radius)
    elif family == 'constant':
        if 'matrix' in section:
            rows = [parser.parse_list(row) for row in section['matrix'].split(';')]
            f = constant_field(rows, radius)
        elif 'diag' in section:
            f = constant_field(np.diag(parser.parse_list(section['diag'])), radius)
        else:
            raise ConfigError("constant field needs 'matrix' or 'diag'")
        if f.dimension != n:
            raise ConfigError("matrix size does not match dimension", dimension=n, size=f.dimension)
    elif family == 'holder':
        f = holder_field(lam=float(section.get('lam', 0.5)), amplitude=float(section.get('amplitude', 0.1)),
                         n=n, domain_radius=radius, profile=section.get('profile', 'power').strip(),
                         direction=parser.parse_list(section.get('direction', '1')),
                         gamma_=float(section.get('gamma', 1.0)),
                         scale=float(section.get('scale', math.e)))
    elif family == 'gs':
        g_text = section.get('g', 'power').strip()
        if g_text == 'power':
            f = gs_power_field(float(section.get('c', 1.0)), float(section.get('lam', 0.5)), n, radius)
        elif g_text == 'counterexample':
            f = gs_counterexample_field(n, float(section.get('sign', -1.0)), radius)
        else:
            if 'modulus' not in config:
                raise ConfigError("a GS expression profile needs a [modulus] section", g=g_text)
            expr = parser.parse(g_text, variable='r')
            profile = parser.to_callable(expr, variable='r')
            f = gs_field(profile, load_modulus(config['modulus'], parser), n, radius,
                         params={'profile': 'expression', 'g': str(expr)})
    else:
        f = perturbation_field(degree=int(section.get('degree', 2)),
                               amplitude=float(section.get('amplitude', 0.05)),
                               lam=float(section.get('lam', 0.5)), n=n, domain_radius=radius,
                               axis=parser.parse_list(section.get('axis', '0, 0, 1')))

    if 'modulus' in config and not (family == 'gs' and f.params.get('profile') == 'expression'):
        modulus_section = dict(config['modulus'])
        if modulus_section:
            f.modulus = load_modulus(modulus_section, parser)

    return validate_field(f, rng)


# Export ----------------------------------------------------------------------------

def field_sample_rows(f: CoefficientField, points: np.ndarray) -> Tuple[List[str], List[List[float]]]:
    n = f.dimension
    header = [f'x{i + 1}' for i in range(n)] + [f'a{i + 1}{j + 1}' for i in range(n) for j in range(n)]
    matrices = f(points).reshape(len(points), -1)
    rows = [list(map(float, p)) + list(map(float, m)) for p, m in zip(points, matrices)]
    return header, rows


def write_field_samples(f: CoefficientField, points: np.ndarray, path: str, provenance: str = None):
    header, rows = field_sample_rows(f, np.asarray(points, dtype=float))
    with open(path, 'w', newline='') as handle:
        if provenance:
            handle.write(f'# {provenance}\n')
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
