"""Local fundamental solution F(x, y) = eta_y Z_y / C_y + v(x, y) on a ball around y.

Everything is solved in the frame normalized at the pole, x~ = B (x - y),
where the ball V has radius ``ball_radius``. There
F~ = eta Z~ / C~ + v with C~ = C_y / sqrt(det A_y), the correction solves
L~ v = -psi, v = 0 on |x~| = ball_radius, and F(x, y) = F~(x~) / sqrt(det A_y).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from annulus_means import (AnnulusQuadrature, DifferentiableField, RadialGrid, SphericalQuadrature,
                           m2p_mean, sphere_area)
from coeff_fields import CoefficientField, frozen_fundamental_solution
from config import Config
from delta_pairing import CutoffFamily
from errors import ContractError, GridRangeError, SolverError, UnsupportedCaseError
from indicator import SingularityClass, classify, sigma_or_none, theta_from_profile
from potential_kernel import HarmonicModeField, HarmonicProjector, ModeExpansion, free_space_mode
from singular_solution import SingularSolution

logger = logging.getLogger(__name__)

Jet = Tuple[np.ndarray, np.ndarray, np.ndarray]

CORRECTION_DECADES = 4.0
CORRECTION_POINTS_PER_DECADE = 48
SOURCE_FLOOR = 1e-13


def cutoff_jet(points: np.ndarray, cutoff: CutoffFamily, radius: float) -> Jet:
    """eta(x) = chi(|x| / radius) with gradient and Hessian"""
    points = np.atleast_2d(points)
    n = points.shape[1]
    r = np.linalg.norm(points, axis=1)
    safe = np.where(r > 0, r, 1.0)
    theta = points / safe[:, None]
    t = r / radius
    d1 = cutoff.derivative(t) / radius
    d2 = cutoff.second_derivative(t) / radius ** 2
    tt = theta[:, :, None] * theta[:, None, :]
    hess = d2[:, None, None] * tt + (d1 / safe)[:, None, None] * (np.eye(n)[None] - tt)
    return cutoff.value(t), d1[:, None] * theta, hess


# Dirichlet correction -----------------------------------------------------------

@dataclass
class CorrectionProblem:
    """L~ v = source in |x~| < ball_radius, v = 0 on the boundary.

    ``source`` holds nodal values (G, K) at grid.points[i] * sphere.nodes[k].
    ``support`` optionally declares the shell (a, b) outside which it vanishes.
    """
    source: np.ndarray
    grid: RadialGrid
    sphere: SphericalQuadrature
    ball_radius: float
    support: Optional[Tuple[float, float]] = None
    tol: float = None
    max_iter: int = None

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=float)
        if self.source.shape != (self.grid.size, self.sphere.size):
            raise ContractError("correction source must be nodal on grid x sphere",
                                shape=list(self.source.shape),
                                expected=[self.grid.size, self.sphere.size])
        if abs(self.grid.r_max - self.ball_radius) > 1e-12 * self.ball_radius:
            raise ContractError("correction grid must end on the boundary sphere",
                                r_max=self.grid.r_max, ball_radius=self.ball_radius)
        if self.support is not None:
            a, b = self.support
            r = self.grid.points
            outside = (r < a * (1 - 1e-9)) | (r > b * (1 + 1e-9))
            scale = float(np.max(np.abs(self.source))) if self.source.size else 0.0
            if np.any(outside) and np.max(np.abs(self.source[outside])) > SOURCE_FLOOR * max(scale, 1e-300):
                raise ContractError("correction source does not vanish outside its declared shell",
                                    support=[a, b])
        self.tol = Config.ITER_TOL * Config.TOL_SCALE if self.tol is None else self.tol
        self.max_iter = int(self.max_iter or Config.MAX_ITER)

    @classmethod
    def radial(cls, profile: Callable[[np.ndarray], np.ndarray], grid: RadialGrid,
               sphere: SphericalQuadrature, **kwargs) -> 'CorrectionProblem':
        """Radially symmetric source f(|x|)"""
        values = np.asarray(profile(grid.points), dtype=float)
        source = np.repeat(values[:, None], sphere.size, axis=1)
        return cls(source=source, grid=grid, sphere=sphere, ball_radius=grid.r_max, **kwargs)


def dirichlet_mode(f: HarmonicModeField, n: int, radius: float) -> HarmonicModeField:
    """Degree-l mode of Delta u = f in the ball with u = 0 on |x| = radius"""
    u = free_space_mode(f, n)
    l, r = f.degree, f.grid.points[:, None]
    boundary = u.values[-1][None, :]
    ratio = r / radius
    values = u.values - boundary * ratio ** l
    d1 = u.d1 - boundary * l * ratio ** l / r
    d2 = u.d2 - boundary * l * (l - 1) * ratio ** l / r ** 2
    return HarmonicModeField(degree=l, grid=f.grid, values=values, d1=d1, d2=d2,
                             exponent_at_zero=float(l), order=f.order)


def apply_dirichlet_inverse(source: np.ndarray, grid: RadialGrid, projector: HarmonicProjector,
                            radius: float) -> Dict[int, HarmonicModeField]:
    """K_D: nodal source -> modes of the Dirichlet solution of Delta u = source"""
    n = projector.sphere.dimension
    scale = float(np.max(np.abs(source))) if source.size else 0.0
    modes: Dict[int, HarmonicModeField] = {}
    if scale == 0.0:
        return modes
    for l in range(projector.max_degree + 1):
        component = projector.project(source, l)
        if np.max(np.abs(component)) <= SOURCE_FLOOR * scale:
            continue
        modes[l] = dirichlet_mode(HarmonicModeField(degree=l, grid=grid, values=component,
                                                    exponent_at_zero=0.0), n, radius)
    return modes


@dataclass
class CorrectionSolution:
    grid: RadialGrid
    sphere: SphericalQuadrature
    ball_radius: float
    modes: Dict[int, HarmonicModeField]
    expansion: Optional[ModeExpansion]
    updates: List[float] = field(default_factory=list)
    ratios: List[float] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.updates)

    def evaluate(self, points: np.ndarray) -> Jet:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.expansion is None:
            N, n = points.shape
            return np.zeros(N), np.zeros((N, n)), np.zeros((N, n, n))
        return self.expansion.evaluate(points)

    def boundary_trace(self) -> float:
        """max |v| on the boundary sphere"""
        points = self.ball_radius * self.sphere.nodes
        return float(np.max(np.abs(self.evaluate(points)[0])))

    def history_rows(self) -> Tuple[List[str], List[List[float]]]:
        ratios = [math.nan] + list(self.ratios)
        return ['iteration', 'update', 'ratio'], [[k + 1, u, q] for k, (u, q) in
                                                  enumerate(zip(self.updates, ratios))]


def _jet_size(jet: Jet, r: np.ndarray) -> float:
    value, grad, hess = jet
    return float(np.max(np.abs(value))
                 + np.max(r[:, None] * np.linalg.norm(grad, axis=-1))
                 + np.max(r[:, None] ** 2 * np.linalg.norm(hess, axis=(-2, -1))))


def solve_correction(problem: CorrectionProblem, field: CoefficientField,
                     max_degree: int = None) -> CorrectionSolution:
    """Frozen-coefficient iteration v_{k+1} = K_D[source - beta~ : D^2 v_k] with a ratio certificate"""
    n = field.dimension
    if np.max(np.abs(field.at(np.zeros(n)) - np.eye(n))) > 1e-10:
        raise ContractError("solve_correction needs the field normalized at the pole")
    grid, sphere = problem.grid, problem.sphere
    max_degree = int(max_degree or min(Config.HARMONIC_DEGREE, sphere.degree // 2))
    projector = HarmonicProjector(sphere, max_degree)
    points = (grid.points[:, None, None] * sphere.nodes[None, :, :]).reshape(-1, n)
    beta = (field(points) - np.eye(n)[None]).reshape(grid.size, sphere.size, n, n)
    r = grid.points

    def expansion_of(modes):
        if not modes:
            return None
        return ModeExpansion.from_fields(list(modes.values()), sphere, inner='regular', outer='raise')

    zero = (np.zeros((grid.size, sphere.size)), np.zeros((grid.size, sphere.size, n)),
            np.zeros((grid.size, sphere.size, n, n)))
    jet, modes, expansion = zero, {}, None
    updates: List[float] = []
    ratios: List[float] = []
    for k in range(1, problem.max_iter + 1):
        rhs = problem.source - np.einsum('gkab,gkab->gk', beta, jet[2])
        new_modes = apply_dirichlet_inverse(rhs, grid, projector, problem.ball_radius)
        new_expansion = expansion_of(new_modes)
        new_jet = zero if new_expansion is None else new_expansion.evaluate_nodal(r)
        update = _jet_size(tuple(a - b for a, b in zip(new_jet, jet)), r)
        size = _jet_size(new_jet, r)
        if updates and updates[-1] > 0:
            ratios.append(update / updates[-1])
        updates.append(update)
        modes, expansion, jet = new_modes, new_expansion, new_jet
        logger.info("Correction iteration %d: update %.4g, size %.4g", k, update, size)
        if not np.isfinite(update):
            raise SolverError("correction iterate is not finite; use a smaller ball or a field "
                              "with smaller coefficient oscillation", iteration=k)
        if update <= problem.tol * size:
            return CorrectionSolution(grid=grid, sphere=sphere, ball_radius=problem.ball_radius,
                                      modes=modes, expansion=expansion, updates=updates,
                                      ratios=ratios, converged=True)
        if len(ratios) >= 3 and all(q >= 1.0 for q in ratios[-3:]):
            raise SolverError("correction iteration diverges; use a smaller ball or a field with "
                              "smaller coefficient oscillation", ratios=ratios)
    raise SolverError("correction iteration did not converge; use a smaller ball or a field with "
                      "smaller coefficient oscillation", iterations=problem.max_iter, ratios=ratios)


# Patch --------------------------------------------------------------------------

@dataclass
class FundamentalSolutionPatch:
    pole: np.ndarray
    singular: SingularSolution
    C_y: float
    ball_radius: float
    cutoff: CutoffFamily
    correction: CorrectionSolution
    singularity: SingularityClass
    weak: Dict[str, Any] = field(default_factory=dict)

    @property
    def frame(self):
        return self.singular.frame

    @property
    def dimension(self) -> int:
        return self.singular.dimension

    @property
    def det(self) -> float:
        return self.frame.det

    @property
    def C_normalized(self) -> float:
        return self.C_y / math.sqrt(self.det)

    def normalized_jet(self, xt: np.ndarray) -> Jet:
        """F~ = eta Z~ / C~ + v with gradient and Hessian"""
        xt = np.atleast_2d(np.asarray(xt, dtype=float))
        N, n = xt.shape
        r = np.linalg.norm(xt, axis=1)
        if np.any(r > self.ball_radius * (1 + 1e-12)):
            raise GridRangeError("point outside the ball of the patch", ball_radius=self.ball_radius,
                                 requested=float(np.max(r)))
        value, grad, hess = self.correction.evaluate(xt)
        near = r < self.cutoff.outer * self.ball_radius
        if np.any(near):
            z, gz, hz = self.singular.normalized_jet(xt[near])
            e, ge, he = cutoff_jet(xt[near], self.cutoff, self.ball_radius)
            c = self.C_normalized
            value[near] += e * z / c
            grad[near] += (e[:, None] * gz + z[:, None] * ge) / c
            hess[near] += (e[:, None, None] * hz + ge[:, :, None] * gz[:, None, :]
                           + gz[:, :, None] * ge[:, None, :] + z[:, None, None] * he) / c
        return value, grad, hess

    def evaluate(self, x: np.ndarray) -> Jet:
        """F(x, y) with x-gradient and Hessian in original coordinates"""
        B = self.frame.B
        scale = 1.0 / math.sqrt(self.det)
        value, grad, hess = self.normalized_jet(self.frame.to_normalized(x))
        return scale * value, scale * (grad @ B), scale * (B[None] @ hess @ B[None])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)[0]

    def remainder_jet(self, x: np.ndarray) -> Jet:
        """H(x, y) = F (n-2)|S| sqrt(det A_y) <A_y^{-1}(x-y), x-y>^{(n-2)/2} - 1"""
        n = self.dimension
        B = self.frame.B
        xt = np.atleast_2d(self.frame.to_normalized(x))
        f, gf, hf = self.normalized_jet(xt)
        c = (n - 2) * sphere_area(n)
        r = np.linalg.norm(xt, axis=1)
        g = c * r ** (n - 2)
        gg = c * (n - 2) * (r ** (n - 4))[:, None] * xt
        hg = c * (n - 2) * ((r ** (n - 4))[:, None, None] * np.eye(n)[None]
                            + (n - 4) * (r ** (n - 6))[:, None, None] * xt[:, :, None] * xt[:, None, :])
        value = f * g - 1.0
        grad = gf * g[:, None] + f[:, None] * gg
        hess = (hf * g[:, None, None] + gf[:, :, None] * gg[:, None, :] + gg[:, :, None] * gf[:, None, :]
                + f[:, None, None] * hg)
        return value, grad @ B, B[None] @ hess @ B[None]

    def remainder_field(self) -> DifferentiableField:
        return DifferentiableField(value=lambda x: self.remainder_jet(x)[0], source='spectral',
                                   jet=self.remainder_jet)

    def boundary_trace(self) -> float:
        return self.correction.boundary_trace()


def _correction_source(Z: SingularSolution, grid: RadialGrid, cutoff: CutoffFamily, radius: float,
                       C_normalized: float) -> Tuple[np.ndarray, Tuple[float, float]]:
    """psi~ = (2 grad eta . a~ grad Z~ + Z~ a~ : D^2 eta) / C~, nodal; zero off the cutoff shell"""
    n, sphere = Z.dimension, Z.sphere
    a, b = cutoff.inner * radius, cutoff.outer * radius
    source = np.zeros((grid.size, sphere.size))
    rows = np.nonzero((grid.points > a) & (grid.points < b))[0]
    if len(rows):
        points = (grid.points[rows][:, None, None] * sphere.nodes[None, :, :]).reshape(-1, n)
        z, gz, _ = Z.normalized_jet(points)
        _, ge, he = cutoff_jet(points, cutoff, radius)
        A = Z.field(points)
        psi = (2.0 * np.einsum('ka,kab,kb->k', ge, A, gz) + z * np.einsum('kab,kab->k', A, he)) / C_normalized
        source[rows] = psi.reshape(len(rows), sphere.size)
    return source, (a, b)


def assemble_patch(field: CoefficientField, y: Sequence[float], Z: SingularSolution, C_y: float,
                   singularity: SingularityClass = None, ball_radius: float = None,
                   cutoff: CutoffFamily = None, grid: RadialGrid = None, max_degree: int = None,
                   tol: float = None, max_iter: int = None, verify: bool = True) -> FundamentalSolutionPatch:
    """F(x, y) = eta Z_y / C_y + v(x, y) with the correction solved and the delta identity checked"""
    y = np.asarray(y, dtype=float)
    if field.dimension != Z.dimension or not np.allclose(Z.pole, y, atol=1e-14):
        raise ContractError("singular solution does not belong to this field and pole",
                            pole=y.tolist(), solution_pole=Z.pole.tolist())
    singularity = singularity or classify(Z.profile)
    if not singularity.is_finite:
        raise UnsupportedCaseError("the fundamental solution patch needs a FiniteLimit indicator",
                                   variant=singularity.variant)
    if not C_y > 0:
        raise UnsupportedCaseError("the delta constant must be positive", C_y=C_y)

    cutoff = cutoff or CutoffFamily()
    ball_radius = float(ball_radius or 0.5 * Z.radial.grid.r_max)
    if ball_radius > Z.radial.grid.r_max * (1 + 1e-12):
        raise GridRangeError("ball exceeds the tabulated singular solution", ball_radius=ball_radius,
                             r_max=Z.radial.grid.r_max)
    grid = grid or RadialGrid(ball_radius * 10 ** (-CORRECTION_DECADES), ball_radius,
                              CORRECTION_POINTS_PER_DECADE)
    C_normalized = C_y / math.sqrt(Z.frame.det)
    source, support = _correction_source(Z, grid, cutoff, ball_radius, C_normalized)
    problem = CorrectionProblem(source=-source, grid=grid, sphere=Z.sphere, ball_radius=ball_radius,
                                support=support, tol=tol, max_iter=max_iter)
    correction = solve_correction(problem, Z.field, max_degree)
    patch = FundamentalSolutionPatch(pole=y, singular=Z, C_y=float(C_y), ball_radius=ball_radius,
                                     cutoff=cutoff, correction=correction, singularity=singularity)
    logger.info("Patch at %s: correction in %d iterations, boundary trace %.3g", y.tolist(),
                correction.iterations, patch.boundary_trace())
    if verify:
        patch.weak = weak_identity(patch)
    return patch


# Weak delta identity ------------------------------------------------------------

TestFunction = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


def standard_test_functions(radius: float, n: int) -> Dict[str, TestFunction]:
    """Five smooth test functions supported in |x~| < radius / 2 with phi(0) = 1"""
    quintic = CutoffFamily()
    septic = CutoffFamily(shape='septic')

    def bump(chi: CutoffFamily) -> TestFunction:
        def phi(x):
            e, ge, _ = cutoff_jet(x, chi, radius)
            return e, ge
        return phi

    def modulated(g: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]) -> TestFunction:
        def phi(x):
            e, ge, _ = cutoff_jet(x, quintic, radius)
            m, gm = g(x)
            return e * m, ge * m[:, None] + e[:, None] * gm
        return phi

    def tilt(x):
        gm = np.zeros_like(x)
        gm[:, 0] = 1.0 / radius
        return 1.0 + x[:, 0] / radius, gm

    def quadratic(x):
        gm = np.zeros_like(x)
        gm[:, 1] = 2.0 * x[:, 1] / radius ** 2
        return 1.0 + (x[:, 1] / radius) ** 2, gm

    def wave(x):
        gm = np.zeros_like(x)
        gm[:, n - 1] = -np.sin(x[:, n - 1] / radius) / radius
        return np.cos(x[:, n - 1] / radius), gm

    return {'bump': bump(quintic), 'tilted': modulated(tilt), 'quadratic': modulated(quadratic),
            'septic': bump(septic), 'cosine': modulated(wave)}


def weak_identity(patch: FundamentalSolutionPatch, test_functions: Dict[str, TestFunction] = None,
                  quadrature: AnnulusQuadrature = None, depth: int = 30) -> Dict[str, Any]:
    """<-L~ F~, phi> = int [-beta~ : D^2 F~ phi + grad F~ . grad phi] dx~, expected phi(0) = 1.

    Dyadic shells run inward from the support edge; the unresolved core is
    estimated by a geometric tail of the last shell contributions.
    """
    n = patch.dimension
    radius = patch.ball_radius
    test_functions = test_functions or standard_test_functions(radius, n)
    quadrature = quadrature or AnnulusQuadrature(patch.singular.sphere)
    origin = np.zeros(n)
    r_stop = max(2.0 * patch.singular.radial.grid.r_min, 0.5 * radius * 2.0 ** (-depth))

    totals = {name: 0.0 for name in test_functions}
    shells: Dict[str, List[float]] = {name: [] for name in test_functions}
    hi = 0.5 * radius
    while hi > r_stop * (1 + 1e-12):
        lo = max(0.5 * hi, r_stop)
        points, weights = quadrature.shell(lo, hi, origin)
        _, grad, hess = patch.normalized_jet(points)
        beta = patch.singular.field(points) - np.eye(n)[None]
        bdf = np.einsum('kab,kab->k', beta, hess)
        for name, phi in test_functions.items():
            value, gphi = phi(points)
            piece = float(np.dot(weights, -bdf * value + np.einsum('ka,ka->k', grad, gphi)))
            shells[name].append(piece)
            totals[name] += piece
        hi = lo

    results = {}
    for name in test_functions:
        contributions = shells[name]
        tail = 0.0
        if len(contributions) >= 2 and contributions[-2] != 0:
            q = contributions[-1] / contributions[-2]
            if abs(q) < 1:
                tail = contributions[-1] * q / (1.0 - q)
        value = totals[name] + tail
        results[name] = {'value': value, 'expected': 1.0, 'error': abs(value - 1.0), 'tail': tail}
        logger.info("Weak identity with %s test function: %.8f", name, value)
    return {'results': results, 'max_error': max(r['error'] for r in results.values()),
            'r_stop': r_stop}


# Remainder ----------------------------------------------------------------------

def extract_H(patch: FundamentalSolutionPatch, radii: Sequence[float], p: float = None,
              theta: Callable[[np.ndarray], np.ndarray] = None,
              quadrature: AnnulusQuadrature = None) -> Dict[str, Any]:
    """M_{2,p}(H(., y), r; y) on the radii with the fitted c in M_{2,p}(H) <= c max(omega, sigma, theta)"""
    p = float(p or Config.EXPONENT_P)
    radii = np.asarray(sorted(radii), dtype=float)
    profile = patch.singular.profile
    quadrature = quadrature or AnnulusQuadrature(patch.singular.sphere)
    H = patch.remainder_field()
    m2p = np.array([m2p_mean(H, p, float(r), patch.pole, quadrature).m2p for r in radii])

    # The modulus and theta are taken in normalized radii
    spread = float(np.linalg.norm(patch.frame.B, 2))
    rt = spread * radii
    theta = theta or theta_from_profile(profile, patch.singularity.I0)
    rate = np.maximum(np.asarray(profile.modulus(rt), dtype=float), np.asarray(theta(rt), dtype=float))
    sig = sigma_or_none(profile.modulus, rt)
    if sig is not None:
        rate = np.maximum(rate, sig)

    positive = (m2p > 0) & (rate > 0)
    ratio = np.where(rate > 0, m2p / np.where(rate > 0, rate, 1.0), np.inf)
    slope = math.nan
    if np.count_nonzero(m2p > 0) >= 2:
        slope = float(np.polyfit(np.log(radii[m2p > 0]), np.log(m2p[m2p > 0]), 1)[0])
    report = {
        'radii': radii.tolist(), 'm2p': m2p.tolist(), 'rate': rate.tolist(),
        'c': float(np.max(ratio[positive])) if np.any(positive) else 0.0,
        'ratio_spread': float(np.max(ratio[positive]) / np.min(ratio[positive])) if np.any(positive) else 1.0,
        'slope': slope,
    }
    logger.info("Remainder: slope %.3f, fitted c %.4g", slope, report['c'])
    return report


def leading_term_defect(patch: FundamentalSolutionPatch, points: np.ndarray) -> float:
    """max relative gap between Z_y / C_y and the frozen fundamental solution"""
    points = np.atleast_2d(points)
    z = patch.singular(points) / patch.C_y
    frozen, _, _ = frozen_fundamental_solution(patch.frame.A_pole, points - patch.pole)
    return float(np.max(np.abs(z - frozen) / np.abs(frozen)))
