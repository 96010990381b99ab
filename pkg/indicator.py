"""The indicator integral I(r), the radial reductions alpha, alpha_n, R, E_+-,
the constants A and tau(r), and the three-way singularity classification."""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import quad
from scipy.interpolate import PchipInterpolator

from annulus_means import AnnulusQuadrature, RadialGrid, SphericalQuadrature, default_sphere
from coeff_fields import CoefficientField, normalize_at
from config import Config
from errors import (AccuracyError, ClassificationError, ContractError, DivergenceError, DomainError,
                    EllipticityError, GridRangeError, InsufficientDataError)
from modulus import TAIL_CUTOFFS, ModulusOfContinuity, classify_tail, dini_tail, sigma

logger = logging.getLogger(__name__)

FINITE = 'FiniteLimit'
MINUS_INFINITY = 'MinusInfinity'
PLUS_INFINITY = 'PlusInfinity'
INDETERMINATE = 'Indeterminate'


def sphere_means(f: CoefficientField, radii: np.ndarray, sphere: SphericalQuadrature,
                 chunk: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    """alpha(r) = mean <A theta, theta> and alpha_n(r) = mean tr A on spheres |x| = r"""
    radii = np.asarray(radii, dtype=float).ravel()
    nodes, weights, area = sphere.nodes, sphere.weights, sphere.area
    alpha = np.empty_like(radii)
    alpha_n = np.empty_like(radii)
    for start in range(0, len(radii), chunk):
        block = radii[start:start + chunk]
        points = (block[:, None, None] * nodes[None, :, :]).reshape(-1, f.dimension)
        A = f(points).reshape(len(block), len(weights), f.dimension, f.dimension)
        quadratic = np.einsum('kn,mknl,kl->mk', nodes, A, nodes)
        trace = np.trace(A, axis1=-2, axis2=-1)
        alpha[start:start + chunk] = quadratic @ weights / area
        alpha_n[start:start + chunk] = trace @ weights / area
    return alpha, alpha_n


def indicator_integrand(f: CoefficientField, y: Sequence[float], z: np.ndarray) -> np.ndarray:
    """tr(A_z A_y^{-1}) - n <A_z A_y^{-1/2}(z-y), A_y^{-1/2}(z-y)> / |z-y|^2"""
    y = np.asarray(y, dtype=float)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    d = z - y
    dist2 = np.einsum('ij,ij->i', d, d)
    if np.any(dist2 == 0):
        raise DomainError("indicator integrand is undefined at the pole", pole=y.tolist())
    A_y = f.at(y)
    eig, vec = np.linalg.eigh(A_y)
    if eig[0] <= 0:
        raise EllipticityError("A_y is not positive definite", pole=y.tolist())
    inv = (vec / eig) @ vec.T
    inv_half = (vec / np.sqrt(eig)) @ vec.T
    A_z = f(z)
    trace = np.einsum('kij,ji->k', A_z, inv)
    e = d @ inv_half.T
    quadratic = np.einsum('ki,kij,kj->k', e, A_z, e)
    return trace - f.dimension * quadratic / dist2


def _normalized(f: CoefficientField, y: Optional[Sequence[float]]) -> CoefficientField:
    if y is None:
        return f
    normalized, _ = normalize_at(f, y)
    return normalized


def _shell_integral(g: CoefficientField, a: float, b: float, quadrature: AnnulusQuadrature) -> float:
    """|S|^{-1} int_{a<|z|<b} indicator_integrand(g, 0, z) |z|^{-n} dz"""
    n = g.dimension
    origin = np.zeros(n)
    points, weights = quadrature.shell(a, b, origin)
    rho = np.linalg.norm(points, axis=1)
    values = indicator_integrand(g, origin, points)
    return float(np.sum(weights * values / rho ** n)) / quadrature.sphere.area


def _shell_pass(g: CoefficientField, r: float, eps: float, ratio: float,
                quadrature: AnnulusQuadrature) -> float:
    count = max(1, int(math.ceil(math.log(eps / r) / math.log(ratio))))
    edges = np.geomspace(r, eps, count + 1)
    return sum(_shell_integral(g, a, b, quadrature) for a, b in zip(edges[:-1], edges[1:]))


def compute_I_volume(f: CoefficientField, y: Sequence[float], r: float, eps: float,
                     sphere: SphericalQuadrature = None, tol: float = 1e-6) -> float:
    """|S|^{-1} int_{r<|z|<eps} integrand |z|^{-n} dz in the frame normalized at y.

    The pointwise integrand is summed over geometric shells of the annulus rule,
    independently of the sphere means behind compute_I_radial. Shell ratios 2 and
    sqrt(2) are compared; disagreement above 10 tol raises.
    """
    if not 0 < r < eps:
        raise DomainError("volume indicator needs 0 < r < eps", r=r, eps=eps)
    g = _normalized(f, y)
    if eps > g.domain_radius * (1 + 1e-12):
        raise ContractError("eps exceeds the normalized domain radius", eps=eps,
                            domain_radius=g.domain_radius)
    quadrature = AnnulusQuadrature(sphere or default_sphere(f.dimension))
    coarse = _shell_pass(g, r, eps, 2.0, quadrature)
    fine = _shell_pass(g, r, eps, math.sqrt(2.0), quadrature)
    if abs(fine - coarse) > 10.0 * tol * max(1.0, abs(fine)):
        raise AccuracyError("volume quadrature refinements disagree", coarse=coarse, fine=fine,
                            r=r, eps=eps)
    return fine


@dataclass
class RadialProfile:
    """Log-grid tabulation of the radial reductions of a normalized field"""
    grid: RadialGrid
    dimension: int
    eps: float
    modulus: ModulusOfContinuity
    alpha: np.ndarray
    alpha_n: np.ndarray
    R: np.ndarray
    I: np.ndarray
    log_Eplus: np.ndarray
    tau: np.ndarray
    Aconst: float
    sigma_of_r: Optional[np.ndarray]
    alpha_sub: np.ndarray
    alpha_n_sub: np.ndarray
    R_sub: np.ndarray
    means: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]
    sphere: SphericalQuadrature
    field: CoefficientField = None

    @property
    def Eplus(self) -> np.ndarray:
        return np.exp(self.log_Eplus)

    @property
    def Eminus(self) -> np.ndarray:
        return np.exp(-self.log_Eplus)

    @property
    def points(self) -> np.ndarray:
        return self.grid.points

    @property
    def integrand(self) -> np.ndarray:
        return self.alpha_n - self.dimension * self.alpha

    def _check_range(self, r: np.ndarray):
        if not self.grid.covers(r):
            raise GridRangeError("radius outside the tabulated profile",
                                 r_min=self.grid.r_min, r_max=self.grid.r_max,
                                 requested=[float(np.min(r)), float(np.max(r))])

    def I_at(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        self._check_range(r)
        return self.grid.spline(self.I)(np.log(r))

    def log_Eplus_at(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        self._check_range(r)
        return self.grid.spline(self.log_Eplus)(np.log(r))

    def I_sub(self) -> np.ndarray:
        return self.grid.at_subnodes(self.I)

    def log_Eplus_sub(self) -> np.ndarray:
        return self.grid.at_subnodes(self.log_Eplus)

    def to_rows(self) -> Tuple[List[str], List[List[float]]]:
        header = ['r', 'alpha', 'alpha_n', 'R', 'I', 'Eplus', 'Eminus', 'tau', 'sigma']
        sig = self.sigma_of_r if self.sigma_of_r is not None else np.full(self.grid.size, np.nan)
        rows = np.column_stack([self.points, self.alpha, self.alpha_n, self.R, self.I,
                                self.Eplus, self.Eminus, self.tau, sig])
        return header, rows.tolist()


def sigma_or_none(m: ModulusOfContinuity, radii: np.ndarray) -> Optional[np.ndarray]:
    try:
        return np.asarray(sigma(m, radii), dtype=float)
    except ClassificationError:
        logger.warning("Modulus %s is not square-Dini; sigma left untabulated", m.family)
        return None


def compute_I_radial(f: CoefficientField, eps: float = None, grid: RadialGrid = None,
                     sphere: SphericalQuadrature = None) -> RadialProfile:
    """Tabulate alpha, alpha_n, R, I, E_+-, tau and A for a field normalized at 0"""
    if np.max(np.abs(f.at(np.zeros(f.dimension)) - np.eye(f.dimension))) > 1e-10:
        raise ContractError("compute_I_radial needs a field normalized to A(0) = I; call normalize_at first")
    eps = float(eps or f.domain_radius)
    if eps > f.domain_radius * (1 + 1e-12):
        raise ContractError("eps exceeds the domain radius", eps=eps, domain_radius=f.domain_radius)
    grid = grid or RadialGrid(eps * Config.R_MIN_FACTOR, eps)
    if abs(grid.r_max - eps) > 1e-12 * eps:
        raise ContractError("radial grid must end at eps", r_max=grid.r_max, eps=eps)
    sphere = sphere or default_sphere(f.dimension)
    n = f.dimension

    def means(radii):
        return sphere_means(f, radii, sphere)

    logger.info("Tabulating radial profile of %s field on %d radii", f.family, grid.size)
    alpha, alpha_n = means(grid.points)
    alpha_sub, alpha_n_sub = (a.reshape(grid.sub_r.shape) for a in means(grid.sub_r.ravel()))
    if np.any(alpha <= 0) or np.any(alpha_sub <= 0):
        bad = float(grid.points[np.argmax(alpha <= 0)]) if np.any(alpha <= 0) else None
        raise EllipticityError("spherical mean alpha is not positive", r=bad)

    R = alpha_n / alpha - n
    R_sub = alpha_n_sub / alpha_sub - n
    I = grid.cumulative_to_end(alpha_n_sub - n * alpha_sub)
    log_Eplus = grid.cumulative_to_end(R_sub)
    S = grid.cumulative_to_end(R_sub * (1.0 - alpha_sub))

    sig = sigma_or_none(f.modulus, grid.points)
    tail = 0.0
    omega_min = float(f.modulus(grid.r_min))
    if sig is not None and omega_min > 0:
        f_min = R[0] * (1.0 - alpha[0])
        tail = f_min / omega_min ** 2 * sig[0]
    log_A = S[0] + tail
    tau = np.exp(-(log_A - S)) - 1.0

    return RadialProfile(
        grid=grid, dimension=n, eps=eps, modulus=f.modulus, alpha=alpha, alpha_n=alpha_n, R=R, I=I,
        log_Eplus=log_Eplus, tau=tau, Aconst=math.exp(log_A), sigma_of_r=sig,
        alpha_sub=alpha_sub, alpha_n_sub=alpha_n_sub, R_sub=R_sub, means=means, sphere=sphere,
        field=f,
    )


@dataclass
class SingularityClass:
    variant: str
    I0: Optional[float] = None
    certificate: Dict[str, Any] = field(default_factory=dict)

    @property
    def is_finite(self) -> bool:
        return self.variant == FINITE

    def label(self) -> str:
        if self.is_finite:
            return f"{FINITE}({self.I0:.10g})"
        return self.variant


def _deep_partial_sums(profile: RadialProfile, panel_width: float = math.log(10.0)) -> Tuple[List[float], List[float]]:
    """I at r_min e^{-s_k} for the doubling schedule s_k, from the spherical means"""
    x, w = leggauss(Config.PANEL_ORDER)
    n = profile.dimension
    u_min = math.log(profile.grid.r_min)
    sums, total, left = [float(profile.I[0])], float(profile.I[0]), 0.0
    for right in TAIL_CUTOFFS:
        panels = max(1, int(math.ceil((right - left) / panel_width)))
        edges = np.linspace(left, right, panels + 1)
        half = 0.5 * np.diff(edges)
        s = (0.5 * (edges[:-1] + edges[1:]))[:, None] + half[:, None] * x[None, :]
        alpha, alpha_n = profile.means(np.exp(u_min - s.ravel()))
        total += float(np.sum(half[:, None] * w[None, :] * (alpha_n - n * alpha).reshape(s.shape)))
        sums.append(total)
        left = right
    return [0.0] + list(TAIL_CUTOFFS), sums


def _rate(profile: RadialProfile, radii: np.ndarray, theta: Callable = None) -> Tuple[np.ndarray, str]:
    m = profile.modulus
    if theta is not None:
        return np.asarray(theta(radii), dtype=float), 'theta'
    if m.theta is not None:
        return np.asarray(m.theta(radii), dtype=float), 'theta'
    if m.is_zero:
        return np.zeros_like(radii), 'zero'
    if m.is_dini:
        return np.asarray(dini_tail(m, radii), dtype=float), 'dini_tail'
    return np.asarray(sigma(m, radii), dtype=float), 'sigma'


def _fit_limit(I: np.ndarray, rate: np.ndarray) -> float:
    if np.ptp(rate) <= 1e-14 * max(np.max(np.abs(rate)), 1e-300):
        return float(np.mean(I - rate)) if np.any(rate) else float(np.mean(I))
    design = np.column_stack([np.ones_like(rate), rate])
    coef, *_ = np.linalg.lstsq(design, I, rcond=None)
    return float(coef[0])


def classify(profile: RadialProfile, tol: float = None, escape: float = None,
             theta: Callable = None) -> SingularityClass:
    """FiniteLimit(I0), MinusInfinity, PlusInfinity or Indeterminate, with certificate"""
    tol = Config.CLASSIFY_TOL * Config.TOL_SCALE if tol is None else tol
    escape = Config.ESCAPE_THRESHOLD if escape is None else escape
    grid = profile.grid
    if grid.decades < 5.0 - 1e-9:
        raise InsufficientDataError("classification needs at least 5 decades of tabulation",
                                    decades=grid.decades)

    r, I = grid.points, profile.I
    last3 = r <= grid.r_min * 10 ** 3 * (1 + 1e-12)
    last2 = r <= grid.r_min * 10 ** 2 * (1 + 1e-12)
    last1 = r <= grid.r_min * 10 * (1 + 1e-12)

    cutoffs, sums = _deep_partial_sums(profile)
    # Increments at roundoff level of the sphere rule are noise, not growth
    tail = classify_tail(cutoffs, sums, floor=1e-3 * tol)

    # Logarithmic growth bound |I(r)| <= 0.1 |log r| + C
    c_lambda = float(np.max(np.abs(I) - 0.1 * np.abs(np.log(r))))
    deep_r = grid.r_min * np.exp(-np.asarray(cutoffs))
    log_bound_holds = bool(np.all(np.abs(sums) <= 0.1 * np.abs(np.log(deep_r)) + c_lambda + 1e-9))

    certificate: Dict[str, Any] = {
        'table_r': r[last3].tolist(),
        'table_I': I[last3].tolist(),
        'deep_s': cutoffs,
        'deep_I': sums,
        'tail': tail.label,
        'log_bound_C': c_lambda,
        'log_bound_holds': log_bound_holds,
    }

    if tail.label == 'converges':
        rate2, rate_name = _rate(profile, r[last2], theta)
        rate1, _ = _rate(profile, r[last1], theta)
        I0 = _fit_limit(I[last2], rate2)
        I0_short = _fit_limit(I[last1], rate1)
        oscillation = abs(I0 - I0_short)
        certificate.update({'rate': rate_name, 'I0_two_decades': I0, 'I0_one_decade': I0_short,
                            'extrapolated_tail': tail.extrapolated,
                            'error_estimate': oscillation})
        if oscillation <= tol * max(1.0, abs(I0)):
            logger.info("Indicator has a finite limit I(0) = %.10g", I0)
            return SingularityClass(FINITE, I0, certificate)
        logger.warning("Indicator tail converges but the fitted limit oscillates by %.3g", oscillation)
        return SingularityClass(INDETERMINATE, None, certificate)

    steps = np.diff(sums)
    if tail.label == 'diverges':
        direction = MINUS_INFINITY if steps[-1] < 0 else PLUS_INFINITY
        target = -escape if direction == MINUS_INFINITY else escape
        observed = abs(sums[-1]) >= escape
        log_s = np.log(np.asarray(cutoffs[-4:]))
        slope, intercept = np.polyfit(log_s, np.asarray(sums[-4:]), 1)
        projected_s = None
        if slope != 0 and np.sign(slope) == np.sign(target):
            projected_s = float(np.exp(min((target - intercept) / slope, 700.0)))
        certificate.update({'escape_observed': observed, 'escape_fit': [float(intercept), float(slope)],
                            'escape_projected_s': projected_s})
        if observed or projected_s is not None:
            logger.info("Indicator escapes to %s", direction)
            return SingularityClass(direction, None, certificate)

    return SingularityClass(INDETERMINATE, None, certificate)


def J_y(profile: RadialProfile, r, singularity: SingularityClass) -> np.ndarray:
    """J(r) = I(r) - I(0) = -int_0^r (alpha_n - n alpha) d rho / rho"""
    if not singularity.is_finite:
        raise ContractError("J_y needs a finite limit I(0)", variant=singularity.variant)
    return profile.I_at(r) - singularity.I0


def J_volume(f: CoefficientField, y: Optional[Sequence[float]], r: float,
             sphere: SphericalQuadrature = None, max_shells: int = 400) -> float:
    """-|S|^{-1} int_{0<|z|<r} integrand |z|^{-n} dz by dyadic shells in the normalized frame"""
    g = _normalized(f, y)
    quadrature = AnnulusQuadrature(sphere or default_sphere(f.dimension))
    total, quiet = 0.0, 0
    for k in range(max_shells):
        hi = r * 2.0 ** (-k)
        piece = _shell_integral(g, 0.5 * hi, hi, quadrature)
        total += piece
        quiet = quiet + 1 if abs(piece) <= 1e-13 * max(abs(total), 1e-300) else 0
        if quiet >= 3:
            return -total
    raise DivergenceError("volume form of J does not settle", partial=-total, shells=max_shells)


def radial_indicator_oracle(g: Callable[[np.ndarray], np.ndarray], n: int, r: float, eps: float) -> float:
    """(1 - n) int_r^eps g(rho) d rho / rho for Gilbarg-Serrin profiles"""
    value, _ = quad(lambda u: float(g(np.array([math.exp(u)]))[0]), math.log(r), math.log(eps),
                    epsabs=1e-13, epsrel=1e-12, limit=400)
    return (1 - n) * value


# Diagnostics ------------------------------------------------------------------

def E_doubling_check(profile: RadialProfile) -> Dict[str, float]:
    """c1 E(r) <= E(rho) <= c2 E(r) for r < rho < 2r, for E_+ and E_-"""
    logE = profile.log_Eplus
    ratios = []
    for i, r in enumerate(profile.points):
        window = (profile.points > r) & (profile.points <= 2.0 * r * (1 + 1e-12))
        if np.any(window):
            ratios.append(logE[window] - logE[i])
    diffs = np.concatenate(ratios) if ratios else np.zeros(1)
    return {
        'plus_c1': float(np.exp(np.min(diffs))), 'plus_c2': float(np.exp(np.max(diffs))),
        'minus_c1': float(np.exp(-np.max(diffs))), 'minus_c2': float(np.exp(-np.min(diffs))),
    }


def theta_from_profile(profile: RadialProfile, I0: float) -> Callable[[np.ndarray], np.ndarray]:
    """Nondecreasing majorant of |I(r) - I(0)| built from the tabulation"""
    running = np.maximum.accumulate(np.abs(profile.I - I0))
    # Strictly increasing table for the monotone interpolant
    running = running + 1e-15 * np.arange(len(running))
    interpolant = PchipInterpolator(profile.grid.u, running, extrapolate=False)
    low, high = running[0], running[-1]

    def theta(t):
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, high)
        u = np.log(np.maximum(t, 1e-300))
        inside = (u >= profile.grid.u[0]) & (u <= profile.grid.u[-1])
        out[inside] = interpolant(u[inside])
        out[u < profile.grid.u[0]] = low
        out[t <= 0] = 0.0
        return out

    return theta


def profile_invariants(profile: RadialProfile) -> Dict[str, Any]:
    """Checks with explicit constants, plus fitted constants for the others"""
    n = profile.dimension
    r = profile.points
    omega = profile.modulus(r)
    slack = 1e-10
    alpha_ok = bool(np.all(np.abs(profile.alpha - 1.0) <= omega + slack)
                    and np.all(np.abs(profile.alpha_n - n) <= omega + slack))
    with np.errstate(divide='ignore', invalid='ignore'):
        R_limit = (1.0 + n) / np.maximum(1.0 - omega, 1e-300) * omega
    R_ok = bool(np.all(np.abs(profile.R) <= R_limit + slack))
    product = float(np.max(np.abs(profile.Eplus * profile.Eminus - 1.0)))

    delta = float(profile.sigma_of_r[-1]) if profile.sigma_of_r is not None else 0.0
    u = profile.grid.u
    logE = profile.log_Eplus
    du = u[None, :] - u[:, None]
    dE = np.abs(logE[None, :] - logE[:, None])
    upper = du > 0
    sandwich_c = float(np.max(dE[upper] / du[upper]) / math.sqrt(delta)) if delta > 0 else 0.0

    ratio = np.exp(profile.I - profile.log_Eplus)
    tau_c = 0.0
    if profile.sigma_of_r is not None:
        positive = profile.sigma_of_r > 0
        if np.any(positive):
            tau_c = float(np.max(np.abs(profile.tau[positive]) / profile.sigma_of_r[positive]))

    dI = np.gradient(profile.I, u)
    positive = omega > 0
    derivative_c = float(np.max(np.abs(dI[positive]) / omega[positive])) if np.any(positive) else 0.0
    derivative_gap = float(np.max(np.abs(-dI[2:-2] - profile.integrand[2:-2]))) if len(u) > 4 else 0.0

    return {
        'alpha_bounds': alpha_ok,
        'R_bound': R_ok,
        'E_product_error': product,
        'sandwich_c': sandwich_c,
        'equivalence_c1': float(np.min(ratio)),
        'equivalence_c2': float(np.max(ratio)),
        'tau_sigma_c': tau_c,
        'I_derivative_c': derivative_c,
        'I_derivative_gap': derivative_gap,
        'Aconst': profile.Aconst,
    }
