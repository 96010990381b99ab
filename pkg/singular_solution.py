"""Singular solution Z = h(|x|) + v(x) of a_ij d_i d_j Z = 0 with a pole at 0.

Work is done in the frame normalized at the pole (a(0) = I). The angular
part v has zero spherical means and solves the operator equation
v = phi(0) w - K[...] by Neumann iteration; the radial part h follows from
the spherical mean of the equation, h'' = (1 - n - R) h'/r + B[D^2 v].
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad, solve_ivp

from annulus_means import (AnnulusQuadrature, DifferentiableField, RadialGrid, SphericalQuadrature,
                           build_spherical_quadrature, m2p_mean, weighted_power_mean)
from coeff_fields import AffineFrame, CoefficientField, normalize_at
from config import Config
from errors import (ContractError, ContractionFailure, EllipticityError, GridRangeError,
                    SmallnessError)
from indicator import RadialProfile, compute_I_radial
from modulus import sigma
from potential_kernel import HarmonicModeField, HarmonicProjector, ModeExpansion, apply_K_mode

logger = logging.getLogger(__name__)

# Modes whose source is below this fraction of the total are treated as round-off
MODE_FLOOR = 1e-12


@dataclass
class NodalCoefficients:
    """Coefficient data at the points grid.points[i] * sphere.nodes[k]"""
    profile: RadialProfile
    sphere: SphericalQuadrature
    projector: HarmonicProjector
    beta: np.ndarray
    beta_tt: np.ndarray
    beta_tt_mean: np.ndarray
    psi: np.ndarray
    psi_mean: np.ndarray
    radial: bool = False

    @property
    def grid(self) -> RadialGrid:
        return self.profile.grid

    @property
    def dimension(self) -> int:
        return self.profile.dimension

    @property
    def max_degree(self) -> int:
        return self.projector.max_degree

    def mean(self, values: np.ndarray) -> np.ndarray:
        return values @ self.sphere.weights / self.sphere.area


def nodal_coefficients(f: CoefficientField, profile: RadialProfile, sphere: SphericalQuadrature,
                       max_degree: int) -> NodalCoefficients:
    """beta = a - I, beta_tt = <beta theta, theta> and psi = tr beta - (n + R) beta_tt on the nodes"""
    grid, n = profile.grid, profile.dimension
    points = (grid.points[:, None, None] * sphere.nodes[None, :, :]).reshape(-1, n)
    beta = (f(points) - np.eye(n)[None]).reshape(grid.size, sphere.size, n, n)
    beta_tt = np.einsum('ka,gkab,kb->gk', sphere.nodes, beta, sphere.nodes)
    tr_beta = np.trace(beta, axis1=-2, axis2=-1)
    psi = tr_beta - (n + profile.R[:, None]) * beta_tt
    area = sphere.area
    return NodalCoefficients(
        profile=profile, sphere=sphere, projector=HarmonicProjector(sphere, max_degree), beta=beta,
        beta_tt=beta_tt, beta_tt_mean=beta_tt @ sphere.weights / area,
        psi=psi, psi_mean=psi @ sphere.weights / area, radial=f.radial,
    )


Jet = Tuple[np.ndarray, np.ndarray, np.ndarray]


def _zero_jet(G: int, K: int, n: int) -> Jet:
    return np.zeros((G, K)), np.zeros((G, K, n)), np.zeros((G, K, n, n))


def window_m2p(jet: Jet, grid: RadialGrid, sphere: SphericalQuadrature, p: float) -> np.ndarray:
    """M_{2,p} over the annuli [r_i, ~2 r_i] from nodal jets; NaN where the window leaves the grid"""
    value, grad, hess = jet
    n = sphere.dimension
    span = max(1, int(round(math.log(2.0) / grid.step)))
    m0 = np.abs(value)
    m1 = np.sqrt(np.sum(grad ** 2, axis=-1))
    m2 = np.sqrt(np.sum(hess ** 2, axis=(-2, -1)))
    trapezoid = np.full(span + 1, grid.step)
    trapezoid[[0, -1]] *= 0.5
    out = np.full(grid.size, np.nan)
    for i in range(grid.size - span):
        rows = slice(i, i + span + 1)
        radial = trapezoid * grid.points[rows] ** n
        weights = np.outer(radial, sphere.weights).ravel()
        r = grid.points[i]
        out[i] = (r * r * weighted_power_mean(m2[rows].ravel(), weights, p)
                  + r * weighted_power_mean(m1[rows].ravel(), weights, p)
                  + weighted_power_mean(m0[rows].ravel(), weights, p))
    return out


def x_norm(jet: Jet, profile: RadialProfile, sphere: SphericalQuadrature, p: float) -> Tuple[float, np.ndarray]:
    """sup_r M_{2,p}(v, r) r^{n-2} / (omega(r) e^{I(r)}) over the tabulated windows"""
    grid, n = profile.grid, profile.dimension
    m2p = window_m2p(jet, grid, sphere, p)
    scale = profile.modulus(grid.points) * np.exp(profile.I) * grid.points ** (2 - n)
    valid = np.isfinite(m2p)
    ratios = np.zeros(grid.size)
    with np.errstate(divide='ignore', invalid='ignore'):
        ratios[valid] = np.where(m2p[valid] == 0, 0.0,
                                 np.where(scale[valid] > 0, m2p[valid] / scale[valid], np.inf))
    return float(np.max(ratios[valid])) if np.any(valid) else 0.0, m2p


@dataclass
class AngularSolution:
    """v (or the seed w) as nodal harmonic modes 1..L with its iteration record"""
    degree: int
    modes: Dict[int, HarmonicModeField]
    expansion: Optional[ModeExpansion]
    jet: Jet
    x_norm: float
    m2p: np.ndarray
    B: np.ndarray
    Phi: np.ndarray
    updates: List[float] = field(default_factory=list)
    ratios: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    w_norm: Optional[float] = None

    @property
    def is_zero(self) -> bool:
        return not self.modes

    def coefficient_rows(self, sphere: SphericalQuadrature) -> Tuple[List[str], List[List[float]]]:
        """Per-degree L^2(S) norms of v_l at every radius"""
        degrees = sorted(self.modes)
        header = ['r'] + [f'v_l{l}' for l in degrees]
        if not degrees:
            return header, []
        grid = self.modes[degrees[0]].grid
        columns = [np.sqrt((self.modes[l].nodal() ** 2) @ sphere.weights) for l in degrees]
        return header, np.column_stack([grid.points] + columns).tolist()

    def history_rows(self) -> Tuple[List[str], List[List[float]]]:
        ratios = [np.nan] + list(self.ratios)
        return ['iteration', 'update_x_norm', 'ratio'], [
            [k + 1, u, ratios[k] if k < len(ratios) else np.nan] for k, u in enumerate(self.updates)]


def _scale_mode(f: HarmonicModeField, c: float) -> HarmonicModeField:
    return HarmonicModeField(degree=f.degree, grid=f.grid, values=c * f.nodal(),
                             d1=c * f.nodal(f.d1), d2=c * f.nodal(f.d2),
                             exponent_at_zero=f.exponent_at_zero)


def _add_modes(a: Dict[int, HarmonicModeField], b: Dict[int, HarmonicModeField]) -> Dict[int, HarmonicModeField]:
    out = dict(a)
    for l, f in b.items():
        if l not in out:
            out[l] = f
            continue
        g = out[l]
        out[l] = HarmonicModeField(degree=l, grid=f.grid, values=g.nodal() + f.nodal(),
                                   d1=g.nodal(g.d1) + f.nodal(f.d1), d2=g.nodal(g.d2) + f.nodal(f.d2),
                                   exponent_at_zero=min(g.exponent_at_zero, f.exponent_at_zero))
    return out


def _apply_K(source: np.ndarray, nodal: NodalCoefficients) -> Dict[int, HarmonicModeField]:
    """K applied degree by degree (1..L) to a mean-free nodal source on the grid"""
    grid, n = nodal.grid, nodal.dimension
    scaled = np.abs(source) * grid.points[:, None] ** n
    scale = float(np.max(scaled)) if scaled.size else 0.0
    modes: Dict[int, HarmonicModeField] = {}
    if scale == 0.0:
        return modes
    for l in range(1, nodal.max_degree + 1):
        component = nodal.projector.project(source, l)
        if np.max(np.abs(component) * grid.points[:, None] ** n) <= MODE_FLOOR * scale:
            continue
        modes[l] = apply_K_mode(HarmonicModeField(degree=l, grid=grid, values=component,
                                                  exponent_at_zero=-float(n)), n)
    return modes


def _expansion(modes: Dict[int, HarmonicModeField], nodal: NodalCoefficients) -> Optional[ModeExpansion]:
    if not modes:
        return None
    return ModeExpansion.from_fields(list(modes.values()), nodal.sphere, inner='raise', outer='raise')


def _jet(expansion: Optional[ModeExpansion], nodal: NodalCoefficients) -> Jet:
    if expansion is None:
        return _zero_jet(nodal.grid.size, nodal.sphere.size, nodal.dimension)
    return expansion.evaluate_nodal(nodal.grid.points)


def coupling_terms(jet: Jet, nodal: NodalCoefficients) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """beta : D^2 v on the nodes, B[D^2 v](r) and Phi(r) = int_0^r rho^{n-1} E_- B d rho"""
    profile, grid, n = nodal.profile, nodal.grid, nodal.dimension
    bdv = np.einsum('gkab,gkab->gk', nodal.beta, jet[2])
    B = -nodal.mean(bdv) / profile.alpha
    g = grid.points ** n * profile.Eminus * B
    Phi = grid.cumulative(grid.at_subnodes(g))
    omega_min = float(profile.modulus(grid.r_min))
    if profile.sigma_of_r is not None and omega_min > 0:
        Phi = Phi + g[0] / omega_min ** 2 * profile.sigma_of_r[0]
    return bdv, B, Phi


def build_rhs_w(nodal: NodalCoefficients, p: float = None) -> AngularSolution:
    """Seed w = -K[r^{-n} E_+ (psi - mean psi)], certified in the X-norm"""
    p = float(p or Config.EXPONENT_P)
    profile, grid, n = nodal.profile, nodal.grid, nodal.dimension
    source = (grid.points ** (-n) * profile.Eplus)[:, None] * (nodal.psi - nodal.psi_mean[:, None])
    modes = {l: _scale_mode(f, -1.0) for l, f in _apply_K(source, nodal).items()}
    expansion = _expansion(modes, nodal)
    jet = _jet(expansion, nodal)
    norm, m2p = x_norm(jet, profile, nodal.sphere, p)
    if not np.isfinite(norm) or norm > Config.X_NORM_LIMIT:
        raise SmallnessError("the seed w is not controlled in the X-norm; the coefficient oscillation "
                             "is too large for the construction", x_norm=norm, limit=Config.X_NORM_LIMIT)
    logger.info("Seed w has %d modes, X-norm %.4g", len(modes), norm)
    zeros = np.zeros(grid.size)
    return AngularSolution(degree=nodal.max_degree, modes=modes, expansion=expansion, jet=jet,
                           x_norm=norm, m2p=m2p, B=zeros, Phi=zeros, w_norm=norm)


def contraction_monitor(ratios: Sequence[float], window: int = 3):
    """Raise once the last ``window`` update ratios are all >= 1"""
    tail = list(ratios)[-window:]
    if len(tail) == window and all(q >= 1.0 for q in tail):
        raise ContractionFailure("Neumann iteration is not contracting; reduce the coefficient "
                                 "oscillation (smaller ball) or raise the truncation degree",
                                 ratios=list(ratios))


def check_smallness(nodal: NodalCoefficients, delta: float = None) -> float:
    """sigma(eps) of the normalized modulus, which must stay below delta.

    Radial fields are exempt: their angular coupling vanishes identically.
    """
    delta = Config.SMALLNESS_DELTA if delta is None else float(delta)
    if nodal.radial:
        return 0.0
    sig = nodal.profile.sigma_of_r
    if sig is None:
        raise SmallnessError("the modulus is not square-Dini; the Neumann iteration has no "
                             "smallness certificate", modulus=nodal.profile.modulus.family)
    sigma_eps = float(sig[-1])
    if not sigma_eps < delta:
        raise ContractionFailure("sigma(eps) exceeds the smallness threshold; the Neumann iteration "
                                 "is not expected to contract (shrink the ball)",
                                 sigma_eps=sigma_eps, delta=delta, eps=nodal.profile.eps)
    return sigma_eps


def solve_operator_equation(w: AngularSolution, nodal: NodalCoefficients, max_iter: int = None,
                            tol: float = None, p: float = None) -> AngularSolution:
    """Picard iteration v_{k+1} = phi(0) w - K[r^{-n} E_+ Phi (psi - mean) + B (beta_tt - mean)
    + (beta : D^2 v_k - mean)] in the discretized X-norm."""
    max_iter = int(max_iter or Config.MAX_ITER)
    tol = Config.ITER_TOL * Config.TOL_SCALE if tol is None else tol
    p = float(p or Config.EXPONENT_P)
    check_smallness(nodal)
    profile, grid, n = nodal.profile, nodal.grid, nodal.dimension
    phi0 = -1.0 / profile.Aconst
    seed = {l: _scale_mode(f, phi0) for l, f in w.modes.items()}
    E_scale = (grid.points ** (-n) * profile.Eplus)[:, None]

    jet = _zero_jet(grid.size, nodal.sphere.size, n)
    modes: Dict[int, HarmonicModeField] = {}
    expansion = None
    updates: List[float] = []
    ratios: List[float] = []
    converged = False
    norm, m2p = 0.0, np.full(grid.size, np.nan)

    for k in range(1, max_iter + 1):
        bdv, B, Phi = coupling_terms(jet, nodal)
        source = (E_scale * Phi[:, None] * (nodal.psi - nodal.psi_mean[:, None])
                  + B[:, None] * (nodal.beta_tt - nodal.beta_tt_mean[:, None])
                  + (bdv - nodal.mean(bdv)[:, None]))
        correction = {l: _scale_mode(f, -1.0) for l, f in _apply_K(source, nodal).items()}
        new_modes = _add_modes(seed, correction)
        new_expansion = _expansion(new_modes, nodal)
        new_jet = _jet(new_expansion, nodal)

        difference = tuple(a - b for a, b in zip(new_jet, jet))
        update, _ = x_norm(difference, profile, nodal.sphere, p)
        norm, m2p = x_norm(new_jet, profile, nodal.sphere, p)
        if not (np.isfinite(update) and np.isfinite(norm)):
            raise ContractionFailure("Neumann iterate left the X-norm ball", iteration=k,
                                     ratios=ratios, update=update)
        if updates and updates[-1] > 0:
            ratios.append(update / updates[-1])
        updates.append(update)
        logger.info("Neumann iteration %d: update %.4g, |v|_X %.4g", k, update, norm)
        modes, expansion, jet = new_modes, new_expansion, new_jet

        if update <= tol * norm:
            converged = True
            break
        contraction_monitor(ratios)
    else:
        logger.warning("Neumann iteration stopped after %d iterations without reaching tol %.3g",
                       max_iter, tol)

    _, B, Phi = coupling_terms(jet, nodal)
    return AngularSolution(degree=nodal.max_degree, modes=modes, expansion=expansion, jet=jet,
                           x_norm=norm, m2p=m2p, B=B, Phi=Phi, updates=updates, ratios=ratios,
                           iterations=len(updates), converged=converged, w_norm=w.x_norm)


# Radial part --------------------------------------------------------------------

@dataclass
class SingularSolutionProfile:
    """h, h', h'' on the grid with the splits h = h0 + h1 and h = h2 + h3.

    h(eps) is fixed to eps^{2-n} (c1 - Phi(eps)) / (n - 2), the value of the
    pure power law with the same slope.
    """
    grid: RadialGrid
    dimension: int
    c1: float
    h: np.ndarray
    dh: np.ndarray
    d2h: np.ndarray
    B: np.ndarray
    Phi: np.ndarray
    log_Eplus: np.ndarray
    R: np.ndarray
    I: Optional[np.ndarray] = None
    h0: Optional[np.ndarray] = None
    h1: Optional[np.ndarray] = None
    zeta: Optional[np.ndarray] = None
    h2: Optional[np.ndarray] = None
    h3: Optional[np.ndarray] = None
    _cache: Any = field(default=None, init=False, repr=False)

    @property
    def phi0(self) -> float:
        return -self.c1

    def _splines(self):
        if self._cache is None:
            n, r = self.dimension, self.grid.points
            self._cache = (self.grid.spline(self.h * r ** (n - 2)), self.grid.spline(self.log_Eplus),
                           self.grid.spline(self.Phi), self.grid.spline(self.R),
                           self.grid.spline(self.B * r ** n))
        return self._cache

    def components_at(self, r) -> Dict[str, np.ndarray]:
        """log E_+, Phi, R and B interpolated at radii r"""
        r = np.asarray(r, dtype=float)
        if not self.grid.covers(r):
            raise GridRangeError("radius outside the tabulated singular profile",
                                 r_min=self.grid.r_min, r_max=self.grid.r_max,
                                 requested=[float(np.min(r)), float(np.max(r))])
        u = np.log(np.clip(r, self.grid.r_min, self.grid.r_max))
        _, s_logE, s_Phi, s_R, s_B = self._splines()
        return {'log_Eplus': s_logE(u), 'Phi': s_Phi(u), 'R': s_R(u),
                'B': s_B(u) * r ** (-self.dimension)}

    def at(self, r) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        r = np.asarray(r, dtype=float)
        n = self.dimension
        parts = self.components_at(r)
        h = self._splines()[0](np.log(np.clip(r, self.grid.r_min, self.grid.r_max))) * r ** (2 - n)
        dh = r ** (1 - n) * np.exp(parts['log_Eplus']) * (self.phi0 + parts['Phi'])
        d2h = (1 - n - parts['R']) * dh / r + parts['B']
        return h, dh, d2h

    def to_rows(self) -> Tuple[List[str], List[List[float]]]:
        header = ['r', 'h', 'dh', 'd2h', 'I', 'Eplus', 'B', 'Phi']
        I = self.I if self.I is not None else np.full(self.grid.size, np.nan)
        rows = np.column_stack([self.grid.points, self.h, self.dh, self.d2h, I,
                                np.exp(self.log_Eplus), self.B, self.Phi])
        return header, rows.tolist()


def build_radial_part(profile: RadialProfile, B: np.ndarray = None, Phi: np.ndarray = None) -> SingularSolutionProfile:
    """h' = r^{1-n} E_+ (phi(0) + Phi) with phi(0) = -1/A, and h by integration from eps"""
    grid, n = profile.grid, profile.dimension
    B = np.zeros(grid.size) if B is None else B
    Phi = np.zeros(grid.size) if Phi is None else Phi
    c1 = 1.0 / profile.Aconst
    r = grid.points
    dh = r ** (1 - n) * profile.Eplus * (Phi - c1)
    d2h = (1 - n - profile.R) * dh / r + B

    sub_r = grid.sub_r
    E_sub = np.exp(profile.log_Eplus_sub())
    Phi_sub = grid.at_subnodes(Phi)
    end = grid.r_max ** (2 - n) / (n - 2)
    h = grid.cumulative_to_end(sub_r ** (2 - n) * E_sub * (c1 - Phi_sub)) + end * (c1 - Phi[-1])
    h0 = grid.cumulative_to_end(sub_r ** (2 - n) * np.exp(profile.I_sub())) + end
    h2 = c1 * (grid.cumulative_to_end(sub_r ** (2 - n) * E_sub) + end)
    h1 = h - h0
    return SingularSolutionProfile(
        grid=grid, dimension=n, c1=c1, h=h, dh=dh, d2h=d2h, B=B, Phi=Phi,
        log_Eplus=profile.log_Eplus, R=profile.R, I=profile.I,
        h0=h0, h1=h1, zeta=h1 / h0, h2=h2, h3=h - h2,
    )


def radial_ode_oracle(f: CoefficientField, eps: float = None, grid: RadialGrid = None,
                      rtol: float = 1e-12) -> SingularSolutionProfile:
    """Exact profile for a Gilbarg-Serrin field, from the radial ODE alpha h'' + (alpha_n - alpha) h'/r = 0.

    alpha = 1 + g and alpha_n = n + g, so R = (1 - n) g / (1 + g) in closed form.
    """
    if not f.radial:
        raise ContractError("the radial oracle needs a radial (Gilbarg-Serrin) field", family=f.family)
    n = f.dimension
    eps = float(eps or f.domain_radius)
    grid = grid or RadialGrid(eps * Config.R_MIN_FACTOR, eps)
    g = f.radial_profile

    def g_of(r: float) -> float:
        value = float(np.asarray(g(np.array([r])))[0])
        if 1.0 + value <= 0:
            raise EllipticityError("alpha = 1 + g is not positive", r=r)
        return value

    def R_of(r: float) -> float:
        value = g_of(r)
        return (1 - n) * value / (1.0 + value)

    def log_A_integrand(s: float) -> float:
        value = g_of(eps * math.exp(-s))
        return (n - 1) * value * value / (1.0 + value)

    log_A, _ = quad(log_A_integrand, 0.0, np.inf, epsabs=1e-14, epsrel=1e-12, limit=1000)
    c1 = math.exp(-log_A)

    def rhs(u, state):
        r = math.exp(u)
        return [-R_of(r), -c1 * r ** (2 - n) * math.exp(state[0])]

    u_end = math.log(eps)
    start = [0.0, eps ** (2 - n) * c1 / (n - 2)]
    sol = solve_ivp(rhs, (u_end, grid.u[0]), start, method='DOP853', t_eval=grid.u[::-1],
                    rtol=rtol, atol=1e-300)
    if not sol.success:
        raise ContractError("radial oracle integration failed", solver_message=sol.message)
    log_E = sol.y[0][::-1]
    h = sol.y[1][::-1]
    r = grid.points
    R = np.array([R_of(x) for x in r])
    dh = -c1 * r ** (1 - n) * np.exp(log_E)
    d2h = (1 - n - R) * dh / r
    zeros = np.zeros(grid.size)
    logger.info("Radial oracle for %s field: c1 = %.12g", f.family, c1)
    return SingularSolutionProfile(grid=grid, dimension=n, c1=c1, h=h, dh=dh, d2h=d2h, B=zeros,
                                   Phi=zeros, log_Eplus=log_E, R=R)


def first_integral_drift(radial: SingularSolutionProfile) -> float:
    """max relative deviation of h' r^{n-1} E_- from -c1 (exact when B = 0)"""
    r = radial.grid.points
    invariant = radial.dh * r ** (radial.dimension - 1) * np.exp(-radial.log_Eplus)
    return float(np.max(np.abs(invariant + radial.c1)) / radial.c1)


def h2_h3_split(radial: SingularSolutionProfile, r) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """First and second radial derivatives of h2 (the c1 term) and h3 (the Phi term) at radii r.

    h2' = -c1 r^{1-n} E_+ and h3' = r^{1-n} E_+ Phi; only h3 carries B in its
    second derivative, so h2 + h3 reproduces h', h''.
    """
    r = np.asarray(r, dtype=float)
    n = radial.dimension
    parts = radial.components_at(r)
    scale = r ** (1 - n) * np.exp(parts['log_Eplus'])
    d_h2 = -radial.c1 * scale
    d_h3 = scale * parts['Phi']
    drift = (1 - n - parts['R']) / r
    return {'h2': (d_h2, drift * d_h2), 'h3': (d_h3, drift * d_h3 + parts['B'])}


# Assembly -----------------------------------------------------------------------

@dataclass
class SingularSolution:
    pole: np.ndarray
    frame: AffineFrame
    field: CoefficientField
    profile: RadialProfile
    radial: SingularSolutionProfile
    angular: AngularSolution
    sphere: SphericalQuadrature
    # M_{1,inf}(xi, r) against max(omega, sigma)(r) on a few radii inside the grid
    xi_bound: Optional[Dict[str, Any]] = None

    @property
    def dimension(self) -> int:
        return self.profile.dimension

    def normalized_jet(self, xt: np.ndarray) -> Jet:
        xt = np.atleast_2d(np.asarray(xt, dtype=float))
        n = self.dimension
        r = np.linalg.norm(xt, axis=1)
        if np.any(r == 0):
            raise GridRangeError("Z is singular at the pole", pole=self.pole.tolist())
        theta = xt / r[:, None]
        h, dh, d2h = self.radial.at(r)
        tt = theta[:, :, None] * theta[:, None, :]
        value = h
        grad = dh[:, None] * theta
        hess = d2h[:, None, None] * tt + (dh / r)[:, None, None] * (np.eye(n)[None] - tt)
        if self.angular.expansion is not None:
            v, gv, hv = self.angular.expansion.evaluate(xt)
            value, grad, hess = value + v, grad + gv, hess + hv
        return value, grad, hess

    def evaluate(self, x: np.ndarray) -> Jet:
        """Z_y, D Z_y and D^2 Z_y at points x in original coordinates"""
        B = self.frame.B
        value, grad, hess = self.normalized_jet(self.frame.to_normalized(x))
        return value, grad @ B, B[None] @ hess @ B[None]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)[0]

    def as_field(self, normalized: bool = False) -> DifferentiableField:
        jet = self.normalized_jet if normalized else self.evaluate
        return DifferentiableField(value=lambda x: jet(x)[0], source='spectral', jet=jet)


def assemble_Z(profile: RadialProfile, angular: AngularSolution, frame: AffineFrame,
               normalized_field: CoefficientField, sphere: SphericalQuadrature,
               xi_radii: Sequence[float] = None) -> SingularSolution:
    """Z_y from its radial and angular parts, with M_{1,inf}(xi, r) on xi_radii attached.

    The default radii run geometrically from a tenth of the grid top down to two decades
    above its floor. Grids spanning less than a decade and moduli that are not square-Dini
    get no report.
    """
    if angular.expansion is not None and angular.expansion.grid is not profile.grid:
        raise ContractError("angular part and radial profile are tabulated on different grids")
    radial = build_radial_part(profile, angular.B, angular.Phi)
    solution = SingularSolution(pole=frame.pole, frame=frame, field=normalized_field, profile=profile,
                                radial=radial, angular=angular, sphere=sphere)
    grid = profile.grid
    if xi_radii is None:
        hi = 0.1 * grid.r_max
        xi_radii = np.geomspace(hi, min(100.0 * grid.r_min, hi), 3) if hi >= grid.r_min else []
    if len(xi_radii) == 0 or not profile.modulus.is_square_dini:
        return solution
    solution.xi_bound = xi_report(solution, xi_radii)
    logger.info("xi against max(omega, sigma): constant %.4g", solution.xi_bound['constant'])
    return solution


def construct_singular_solution(f: CoefficientField, pole: Sequence[float] = None, eps: float = None,
                                grid: RadialGrid = None, sphere: SphericalQuadrature = None,
                                max_degree: int = None, p: float = None, max_iter: int = None,
                                tol: float = None, profile: RadialProfile = None) -> SingularSolution:
    """Z_y for the field f: normalize at y, tabulate the profile, iterate, assemble.

    A profile already tabulated for the field normalized at y may be passed in.
    """
    n = f.dimension
    pole = np.zeros(n) if pole is None else np.asarray(pole, dtype=float)
    max_degree = int(max_degree or Config.HARMONIC_DEGREE)
    sphere = sphere or build_spherical_quadrature(n, 2 * max_degree + 4)
    normalized, frame = normalize_at(f, pole)
    eps = float(eps or normalized.domain_radius)
    if profile is None:
        profile = compute_I_radial(normalized, eps, grid, sphere)
    elif profile.sphere is not sphere:
        raise ContractError("profile and solution must share the spherical quadrature")
    nodal = nodal_coefficients(normalized, profile, sphere, max_degree)
    w = build_rhs_w(nodal, p)
    angular = solve_operator_equation(w, nodal, max_iter=max_iter, tol=tol, p=p)
    logger.info("Singular solution at %s: %d iterations, |v|_X = %.4g", pole.tolist(),
                angular.iterations, angular.x_norm)
    return assemble_Z(profile, angular, frame, normalized, sphere)


# Diagnostics --------------------------------------------------------------------

def b_functional(solution: SingularSolution, r: float) -> float:
    """B[D^2 v](r) = -alpha(r)^{-1} mean over |x| = r of beta : D^2 v"""
    if solution.angular.expansion is None:
        return 0.0
    n = solution.dimension
    points = r * solution.sphere.nodes
    _, _, hess = solution.angular.expansion.evaluate(points)
    beta = solution.field(points) - np.eye(n)[None]
    alpha, _ = solution.profile.means(np.array([r]))
    mean = float(solution.sphere.mean(np.einsum('kab,kab->k', beta, hess)))
    return -mean / float(alpha[0])


def b_bound_ratio(solution: SingularSolution, r: float, p: float = None,
                  quadrature: AnnulusQuadrature = None) -> float:
    """M_p(B, r) / (omega(r) M_p(D^2 v, r))"""
    p = float(p or Config.EXPONENT_P)
    if solution.angular.expansion is None:
        return 0.0
    quadrature = quadrature or AnnulusQuadrature(solution.sphere)
    points, weights = quadrature.annulus(r, np.zeros(solution.dimension))
    _, _, hess = solution.angular.expansion.evaluate(points)
    # Shell points are ordered radius-major
    shells = points.reshape(quadrature.radial_nodes, -1, solution.dimension)
    rho = np.linalg.norm(shells[:, 0, :], axis=1)
    b = np.repeat([b_functional(solution, float(x)) for x in rho], shells.shape[1])
    m_b = weighted_power_mean(np.abs(b), weights, p)
    m_h = weighted_power_mean(np.sqrt(np.sum(hess ** 2, axis=(1, 2))), weights, p)
    omega = float(solution.profile.modulus(r))
    if m_b == 0:
        return 0.0
    return m_b / (omega * m_h) if omega * m_h > 0 else np.inf


def pde_residual(solution: SingularSolution, r: float, p: float = None,
                 quadrature: AnnulusQuadrature = None) -> float:
    """M_p(a : D^2 Z, r) / M_p(D^2 Z, r) in the normalized frame"""
    p = float(p or Config.EXPONENT_P)
    quadrature = quadrature or AnnulusQuadrature(solution.sphere)
    points, weights = quadrature.annulus(r, np.zeros(solution.dimension))
    _, _, hess = solution.normalized_jet(points)
    applied = np.einsum('kab,kab->k', solution.field(points), hess)
    scale = weighted_power_mean(np.sqrt(np.sum(hess ** 2, axis=(1, 2))), weights, p)
    return weighted_power_mean(np.abs(applied), weights, p) / scale


def xi_field(solution: SingularSolution, I0: float = None) -> DifferentiableField:
    """xi = Z (n-2) |x|^{n-2} e^{-I} - 1 in the normalized frame; I = I(|x|) or the constant I0"""
    n = solution.dimension
    grid = solution.profile.grid
    I_spline = grid.spline(solution.profile.I)
    J_spline = grid.spline(solution.profile.integrand)

    def jet(xt):
        xt = np.atleast_2d(np.asarray(xt, dtype=float))
        z, gz, hz = solution.normalized_jet(xt)
        rho = np.linalg.norm(xt, axis=1)
        theta = xt / rho[:, None]
        if I0 is None:
            u = np.log(rho)
            J = J_spline(u)
            q = (n - 2) * rho ** (n - 2) * np.exp(-I_spline(u))
            s = (n - 2 + J) / rho
            ds = J_spline(u, 1) / rho ** 2 - (n - 2 + J) / rho ** 2
        else:
            q = (n - 2) * rho ** (n - 2) * math.exp(-I0)
            s = (n - 2) / rho
            ds = -(n - 2) / rho ** 2
        dq = q * s
        d2q = q * (s * s + ds)
        tt = theta[:, :, None] * theta[:, None, :]
        value = z * q - 1.0
        grad = q[:, None] * gz + (z * dq)[:, None] * theta
        hess = (q[:, None, None] * hz
                + dq[:, None, None] * (theta[:, :, None] * gz[:, None, :] + gz[:, :, None] * theta[:, None, :])
                + (z * d2q)[:, None, None] * tt
                + (z * dq / rho)[:, None, None] * (np.eye(n)[None] - tt))
        return value, grad, hess

    return DifferentiableField(value=lambda x: jet(x)[0], source='spectral', jet=jet)


def _rate(solution: SingularSolution, radii: np.ndarray) -> np.ndarray:
    m = solution.profile.modulus
    omega = np.asarray(m(radii), dtype=float)
    if m.is_zero:
        return omega
    return np.maximum(omega, np.asarray(sigma(m, radii), dtype=float))


def xi_report(solution: SingularSolution, radii: Sequence[float], p: float = None,
              I0: float = None, quadrature: AnnulusQuadrature = None) -> Dict[str, Any]:
    """M_{1,inf}(xi, r) and M_{2,p}(xi, r) against max(omega, sigma)(r)"""
    p = float(p or Config.EXPONENT_P)
    if p <= solution.dimension:
        logger.warning("pointwise xi bounds need p > n (p = %.3g)", p)
    quadrature = quadrature or AnnulusQuadrature(solution.sphere)
    xi = xi_field(solution, I0)
    radii = np.asarray(radii, dtype=float)
    rate = _rate(solution, radii)
    rows, c = [], 0.0
    for r, q in zip(radii, rate):
        report = m2p_mean(xi, p, float(r), np.zeros(solution.dimension), quadrature=quadrature)
        ratio = report.m1inf / q if q > 0 else (0.0 if report.m1inf == 0 else np.inf)
        c = max(c, ratio)
        rows.append([float(r), report.m1inf, report.m2p, float(q), ratio])
    return {'header': ['r', 'M1inf_xi', 'M2p_xi', 'rate', 'ratio'], 'rows': rows, 'constant': c}


def two_sided_bound(solution: SingularSolution, radii: Sequence[float], I0: float = None,
                    cap: float = 4.0) -> Dict[str, Any]:
    """c <= (n-2) |Z| r^{n-2} e^{-I(r)} <= C on the spheres |x| = r

    With I0 the envelope is frozen at e^{I0}. The bound holds when c > 0 and C / c <= cap.
    The cruder constants of c r^{2-n} e^{-c_n D(r)} <= |Z| <= C r^{2-n} e^{c_n D(r)},
    D(r) = int_r^eps omega dt/t, are reported alongside.
    """
    n = solution.dimension
    c_n = 2.0 * (n - 1) / solution.sphere.area
    grid = solution.profile.grid
    dini = grid.spline(grid.cumulative_to_end(solution.profile.modulus(grid.sub_r)))
    dini_low, dini_high = np.inf, 0.0
    radii = np.asarray(radii, dtype=float)
    envelope = solution.profile.I_at(radii) if I0 is None else np.full(radii.shape, float(I0))
    rows, low, high = [], np.inf, 0.0
    for r, I in zip(radii, envelope):
        z = np.abs(solution.normalized_jet(r * solution.sphere.nodes)[0])
        ratio = (n - 2) * z * r ** (n - 2) * math.exp(-I)
        rows.append([float(r), float(I), float(np.min(ratio)), float(np.max(ratio))])
        low, high = min(low, float(np.min(ratio))), max(high, float(np.max(ratio)))
        D = float(dini(math.log(r)))
        dini_low = min(dini_low, float(np.min(z)) * r ** (n - 2) * math.exp(c_n * D))
        dini_high = max(dini_high, float(np.max(z)) * r ** (n - 2) * math.exp(-c_n * D))
    spread = high / low if low > 0 else np.inf
    holds = bool(low > 0 and np.isfinite(high) and spread <= cap)
    if not holds:
        logger.warning("Envelope ratio spread %.4g exceeds %.3g", spread, cap)
    return {'header': ['r', 'I', 'min_ratio', 'max_ratio'], 'rows': rows, 'c': low, 'C': high,
            'spread': spread, 'holds': holds, 'c_n': c_n, 'dini_c': dini_low, 'dini_C': dini_high}


def maximum_principle_report(solution: SingularSolution, radii: Sequence[float]) -> Dict[str, Any]:
    """Z r^{n-2} and max_{|x|=r} Z as r decreases"""
    n = solution.dimension
    radii = np.sort(np.asarray(radii, dtype=float))[::-1]
    rows = []
    for r in radii:
        z = solution.normalized_jet(r * solution.sphere.nodes)[0]
        rows.append([float(r), float(np.mean(z)) * r ** (n - 2), float(np.max(z))])
    scaled = np.array([row[1] for row in rows])
    peaks = np.array([row[2] for row in rows])
    return {
        'header': ['r', 'Z_r^(n-2)', 'max_Z'],
        'rows': rows,
        'scaled_decreasing': bool(np.all(np.diff(scaled) < 0)),
        'max_increasing': bool(np.all(np.diff(peaks) > 0)),
    }


def _radial_window_m2p(values: np.ndarray, grid: RadialGrid, p: float, n: int) -> np.ndarray:
    """M_{2,p} over [r, ~2r] of a radial function tabulated on the grid"""
    spline = grid.spline(values)
    r = grid.points
    f_u, f_uu = spline(grid.u, 1), spline(grid.u, 2)
    d1 = f_u / r
    d2 = (f_uu - f_u) / r ** 2
    hess = np.sqrt(d2 ** 2 + (n - 1) * (d1 / r) ** 2)
    span = max(1, int(round(math.log(2.0) / grid.step)))
    trapezoid = np.full(span + 1, grid.step)
    trapezoid[[0, -1]] *= 0.5
    out = np.full(grid.size, np.nan)
    for i in range(grid.size - span):
        rows = slice(i, i + span + 1)
        weights = trapezoid * r[rows] ** n
        out[i] = (r[i] ** 2 * weighted_power_mean(hess[rows], weights, p)
                  + r[i] * weighted_power_mean(np.abs(d1[rows]), weights, p)
                  + weighted_power_mean(np.abs(values[rows]), weights, p))
    return out


def rate_report(solution: SingularSolution, p: float = None) -> Dict[str, float]:
    """Fitted constants of the rate bounds on h0, zeta, Phi and v"""
    p = float(p or Config.EXPONENT_P)
    radial, profile = solution.radial, solution.profile
    grid, n = profile.grid, profile.dimension
    r = grid.points
    omega = np.asarray(profile.modulus(r), dtype=float)
    inner = r <= grid.r_max / 10.0
    positive = inner & (omega > 0)
    leading = r ** (2 - n) * np.exp(profile.I)

    def fitted(numerator, denominator, mask):
        numerator = np.abs(numerator[mask])
        denominator = denominator[mask]
        if not np.any(mask) or np.all(numerator == 0):
            return 0.0
        with np.errstate(divide='ignore'):
            return float(np.max(np.where(denominator > 0, numerator / denominator, np.inf)))

    rate = omega if profile.sigma_of_r is None else np.maximum(omega, profile.sigma_of_r)
    zeta_m2p = _radial_window_m2p(radial.zeta, grid, p, n)
    finite = np.isfinite(zeta_m2p) & inner
    sig = profile.sigma_of_r if profile.sigma_of_r is not None else np.zeros_like(r)
    return {
        'h0_leading_c': fitted(radial.h0 - leading / (n - 2), leading * omega, inner),
        'zeta_c': fitted(np.nan_to_num(zeta_m2p), rate, finite),
        'phi_sigma_c': fitted(radial.Phi, sig, inner),
        'v_x_norm': solution.angular.x_norm,
        'iterations': solution.angular.iterations,
    }
