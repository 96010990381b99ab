"""Moduli of continuity, sigma(r) and Dini / square-Dini classification."""
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import sympy as sp
from scipy.integrate import quad
from scipy.interpolate import PchipInterpolator

from errors import ClassificationError, ContractError
from math_parser import MathParser

logger = logging.getLogger(__name__)

DINI = 'dini'
SQUARE_DINI_ONLY = 'square_dini_only'
NEITHER = 'neither'
INCONCLUSIVE = 'inconclusive'

# Grid used for the monotonicity and doubling checks
CHECK_GRID = np.logspace(-9.0, math.log10(0.5), 1000)


@dataclass(frozen=True)
class ModulusOfContinuity:
    """omega with its kappa-monotonicity exponent and optional closed forms.

    ``dini`` / ``square_dini`` are declared flags for the built-in families;
    when left as None the numerical classification decides.
    """
    omega: Callable[[np.ndarray], np.ndarray]
    kappa: float
    family: str = 'custom'
    params: Dict[str, Any] = field(default_factory=dict)
    theta: Optional[Callable[[np.ndarray], np.ndarray]] = None
    nu: Optional[float] = None
    sigma_closed: Optional[Callable[[float], float]] = None
    dini_tail_closed: Optional[Callable[[float], float]] = None
    dini: Optional[bool] = None
    square_dini: Optional[bool] = None

    def __call__(self, t):
        return self.omega(np.asarray(t, dtype=float))

    @cached_property
    def classification(self) -> 'DiniClassification':
        return classify_dini(self)

    @property
    def is_dini(self) -> bool:
        if self.dini is not None:
            return self.dini
        return self.classification.label == DINI

    @property
    def is_square_dini(self) -> bool:
        if self.is_dini:
            return True
        if self.square_dini is not None:
            return self.square_dini
        return self.classification.label == SQUARE_DINI_ONLY

    @property
    def is_zero(self) -> bool:
        return self.family == 'zero'

    def scaled(self, amplitude: float, stretch: float = 1.0) -> 'ModulusOfContinuity':
        """t -> amplitude * omega(stretch * t), as produced by an affine change of frame"""
        if amplitude < 0 or stretch <= 0:
            raise ContractError("modulus rescaling needs amplitude >= 0 and stretch > 0",
                                amplitude=amplitude, stretch=stretch)
        base = self

        def omega(t):
            return amplitude * base.omega(stretch * np.asarray(t, dtype=float))

        sigma_closed = None
        if base.sigma_closed is not None:
            sigma_closed = lambda r: amplitude ** 2 * base.sigma_closed(stretch * r)
        tail_closed = None
        if base.dini_tail_closed is not None:
            tail_closed = lambda r: amplitude * base.dini_tail_closed(stretch * r)
        theta = None
        if base.theta is not None:
            theta = lambda t: amplitude * base.theta(stretch * np.asarray(t, dtype=float))

        params = dict(base.params)
        params.update({'amplitude_scale': amplitude, 'stretch': stretch})
        return ModulusOfContinuity(omega=omega, kappa=base.kappa, family=base.family, params=params,
                                   theta=theta, nu=base.nu, sigma_closed=sigma_closed,
                                   dini_tail_closed=tail_closed, dini=base.dini,
                                   square_dini=base.square_dini)

    def with_theta(self, theta: Callable[[np.ndarray], np.ndarray], nu: float) -> 'ModulusOfContinuity':
        return ModulusOfContinuity(omega=self.omega, kappa=self.kappa, family=self.family,
                                   params=dict(self.params), theta=theta, nu=nu,
                                   sigma_closed=self.sigma_closed,
                                   dini_tail_closed=self.dini_tail_closed,
                                   dini=self.dini, square_dini=self.square_dini)

    def describe(self) -> Dict[str, Any]:
        return {'family': self.family, 'kappa': self.kappa, **self.params}


def zero_modulus() -> ModulusOfContinuity:
    return ModulusOfContinuity(
        omega=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        kappa=0.5, family='zero',
        sigma_closed=lambda r: 0.0, dini_tail_closed=lambda r: 0.0,
        dini=True, square_dini=True,
    )


def power_modulus(lam: float, amplitude: float = 1.0) -> ModulusOfContinuity:
    """omega(t) = amplitude * t^lam with kappa = 1 - lam"""
    if not 0.0 < lam < 1.0:
        raise ContractError("power modulus exponent must lie in (0, 1)", lam=lam)
    if amplitude < 0:
        raise ContractError("modulus amplitude must be nonnegative", amplitude=amplitude)
    return ModulusOfContinuity(
        omega=lambda t: amplitude * np.asarray(t, dtype=float) ** lam,
        kappa=1.0 - lam, family='power', params={'lam': lam, 'amplitude': amplitude},
        sigma_closed=lambda r: amplitude ** 2 * r ** (2 * lam) / (2 * lam),
        dini_tail_closed=lambda r: amplitude * r ** lam / lam,
        dini=True, square_dini=True,
    )


def _kappa_from_slope(max_slope: float, family: str) -> float:
    kappa = min(0.25, 0.5 * (1.0 - max_slope))
    if kappa <= 0:
        raise ContractError(f"{family} modulus is not kappa-monotone on (0, 1/2]",
                            max_log_slope=max_slope)
    return kappa


def log_modulus(gamma_: float, amplitude: float = 1.0, scale: float = math.e) -> ModulusOfContinuity:
    """omega(t) = amplitude * log(scale / t)^(-gamma_)

    Dini for gamma_ > 1, square-Dini for gamma_ > 1/2.
    """
    if gamma_ <= 0 or scale <= 1.0:
        raise ContractError("log modulus needs gamma > 0 and scale > 1", gamma=gamma_, scale=scale)
    log_scale = math.log(scale)
    # d log omega / d log t = gamma / log(scale / t), largest at t = 1/2
    kappa = _kappa_from_slope(gamma_ / math.log(2.0 * scale), 'log')

    def omega(t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        positive = t > 0
        out[positive] = amplitude * (log_scale - np.log(t[positive])) ** (-gamma_)
        return out

    sigma_closed = None
    if gamma_ > 0.5:
        sigma_closed = lambda r: amplitude ** 2 * math.log(scale / r) ** (1 - 2 * gamma_) / (2 * gamma_ - 1)
    tail_closed = None
    if gamma_ > 1.0:
        tail_closed = lambda r: amplitude * math.log(scale / r) ** (1 - gamma_) / (gamma_ - 1)

    return ModulusOfContinuity(
        omega=omega, kappa=kappa, family='log',
        params={'gamma': gamma_, 'amplitude': amplitude, 'scale': scale},
        sigma_closed=sigma_closed, dini_tail_closed=tail_closed,
        dini=gamma_ > 1.0, square_dini=gamma_ > 0.5,
    )


def loglog_modulus(gamma_: float, amplitude: float = 1.0) -> ModulusOfContinuity:
    """omega(t) = amplitude / (L (log L)^gamma_), L = log(e^e / t)

    Always square-Dini; Dini only for gamma_ > 1.
    """
    if gamma_ <= 0:
        raise ContractError("iterated-log modulus needs gamma > 0", gamma=gamma_)
    big_l = math.e + math.log(2.0)
    kappa = _kappa_from_slope((1.0 + gamma_ / math.log(big_l)) / big_l, 'loglog')

    def omega(t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        positive = t > 0
        L = math.e - np.log(t[positive])
        out[positive] = amplitude / (L * np.log(L) ** gamma_)
        return out

    return ModulusOfContinuity(
        omega=omega, kappa=kappa, family='loglog', params={'gamma': gamma_, 'amplitude': amplitude},
        dini=gamma_ > 1.0, square_dini=True,
    )


def tabulated_modulus(t_values: Sequence[float], omega_values: Sequence[float],
                      kappa: float) -> ModulusOfContinuity:
    """Monotone cubic interpolation in log t of sampled omega values.

    Below the table omega continues as omega(t_min) (t / t_min)^{1 - kappa};
    above it, omega is held constant.
    """
    t_values = np.asarray(t_values, dtype=float)
    omega_values = np.asarray(omega_values, dtype=float)
    if t_values.ndim != 1 or len(t_values) < 2 or np.any(np.diff(t_values) <= 0) or t_values[0] <= 0:
        raise ContractError("tabulated modulus needs increasing positive sample radii")
    if np.any(np.diff(omega_values) < 0) or np.any(omega_values < 0):
        raise ContractError("tabulated omega must be nonnegative and nondecreasing")
    if not 0.0 < kappa < 1.0:
        raise ContractError("kappa must lie in (0, 1)", kappa=kappa)

    interpolant = PchipInterpolator(np.log(t_values), omega_values, extrapolate=False)
    t_min, t_max = t_values[0], t_values[-1]
    w_min, w_max = omega_values[0], omega_values[-1]

    def omega(t):
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, w_max)
        low = (t > 0) & (t < t_min)
        out[low] = w_min * (t[low] / t_min) ** (1.0 - kappa)
        inside = (t >= t_min) & (t <= t_max)
        out[inside] = interpolant(np.log(t[inside]))
        out[t <= 0] = 0.0
        return out

    return ModulusOfContinuity(omega=omega, kappa=kappa, family='tabulated',
                               params={'samples': len(t_values)}, dini=True, square_dini=True)


def expression_modulus(text: str, kappa: float = None, parser: MathParser = None) -> ModulusOfContinuity:
    """omega given as a sympy expression in t (e.g. '1/log(E/t)')"""
    parser = parser or MathParser()
    expr = parser.parse(text, variable='t')
    omega_t = parser.to_callable(expr, variable='t')

    def omega(t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        positive = t > 0
        out[positive] = omega_t(t[positive])
        return out

    if kappa is None:
        values = omega(CHECK_GRID)
        slopes = np.diff(np.log(np.maximum(values, 1e-300))) / np.diff(np.log(CHECK_GRID))
        kappa = _kappa_from_slope(float(np.max(slopes)), 'expression')

    sigma_closed = None
    t = sp.Symbol('t', positive=True)
    anti = parser.antiderivative(expr ** 2 / t, variable='t')
    if anti is not None:
        try:
            at_zero = sp.limit(anti, t, 0, '+')
            if at_zero.is_finite:
                closed = sp.lambdify(t, anti - at_zero, modules='numpy')
                sigma_closed = lambda r: float(closed(r))
        except Exception as e:
            logger.debug("No closed-form sigma for %s: %s", text, e)

    return ModulusOfContinuity(omega=omega, kappa=kappa, family='expression',
                               params={'expression': str(expr)}, sigma_closed=sigma_closed)


@dataclass
class ModulusCheck:
    nondecreasing: bool
    kappa_monotone: bool
    doubling: bool
    first_violation: Optional[float] = None

    @property
    def ok(self) -> bool:
        return self.nondecreasing and self.kappa_monotone and self.doubling


def check_modulus(m: ModulusOfContinuity, grid: np.ndarray = None) -> ModulusCheck:
    """Monotonicity, kappa-monotonicity and doubling on a log grid in (0, 1/2]"""
    grid = CHECK_GRID if grid is None else np.asarray(grid, dtype=float)
    values = m(grid)
    scale = max(float(np.max(np.abs(values))), 1e-300)
    violation = None

    steps = np.diff(values)
    nondecreasing = bool(np.all(steps >= -1e-13 * scale))
    if not nondecreasing:
        violation = float(grid[1:][steps < -1e-13 * scale][0])

    q = values * grid ** (m.kappa - 1.0)
    q_steps = np.diff(q)
    bad_q = q_steps > 1e-10 * np.maximum(np.abs(q[:-1]), 1e-300)
    kappa_monotone = not bool(np.any(bad_q))
    if not kappa_monotone and violation is None:
        violation = float(grid[1:][bad_q][0])

    half = grid[grid <= 0.5 * grid[-1]]
    doubled = m(2.0 * half)
    bad_d = doubled > 2.0 ** (1.0 - m.kappa) * m(half) * (1 + 1e-12) + 1e-300
    doubling = not bool(np.any(bad_d))
    if not doubling and violation is None:
        violation = float(half[bad_d][0])

    return ModulusCheck(nondecreasing=nondecreasing, kappa_monotone=kappa_monotone,
                        doubling=doubling, first_violation=violation)


def _log_integral(func: Callable[[np.ndarray], np.ndarray], r: float) -> float:
    """int_0^r func(t) dt / t computed in s = log t"""
    value, error = quad(lambda s: float(func(np.array([math.exp(s)]))[0]), -np.inf, math.log(r),
                        epsrel=1e-8, epsabs=0.0, limit=400)
    return value


def sigma(m: ModulusOfContinuity, r) -> np.ndarray:
    """sigma(r) = int_0^r omega(t)^2 dt / t"""
    radii = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(radii <= 0):
        raise ContractError("sigma needs r > 0", r=radii.tolist())
    if not m.is_square_dini:
        raise ClassificationError("omega is not square-Dini; sigma diverges", family=m.family)
    if m.sigma_closed is not None:
        out = np.array([m.sigma_closed(float(x)) for x in radii])
    else:
        out = np.array([_log_integral(lambda t: m(t) ** 2, float(x)) for x in radii])
    return out if np.ndim(r) else float(out[0])


def dini_tail(m: ModulusOfContinuity, r) -> np.ndarray:
    """int_0^r omega(t) dt / t, defined for Dini moduli"""
    radii = np.atleast_1d(np.asarray(r, dtype=float))
    if not m.is_dini:
        raise ClassificationError("omega is not Dini; the tail integral diverges", family=m.family)
    if m.dini_tail_closed is not None:
        out = np.array([m.dini_tail_closed(float(x)) for x in radii])
    else:
        out = np.array([_log_integral(m, float(x)) for x in radii])
    return out if np.ndim(r) else float(out[0])


@dataclass
class TailCertificate:
    label: str
    cutoffs: List[float]
    partial_sums: List[float]
    extrapolated: Optional[float] = None
    tail_estimate: Optional[float] = None


def classify_tail(cutoffs: Sequence[float], partial_sums: Sequence[float],
                  tol: float = 1e-4, growth: float = 0.01, floor: float = 0.0) -> TailCertificate:
    """Decide convergence of an improper integral from partial sums at growing cutoffs.

    converges: the last increment is negligible, or increments shrink
    geometrically and two successive extrapolations agree within ``tol``.
    Increments below the absolute ``floor`` count as negligible.
    diverges: relative growth above ``growth`` on each of the last 3 steps.
    """
    sums = np.asarray(partial_sums, dtype=float)
    d = np.diff(sums)
    total = float(sums[-1])
    label = INCONCLUSIVE
    extrapolated, tail = None, None

    if len(d) >= 1 and abs(d[-1]) <= max(1e-13 * max(abs(total), 1e-300), floor):
        return TailCertificate('converges', list(cutoffs), sums.tolist(), total, abs(float(d[-1])))
    if total == 0.0 and np.all(d == 0):
        return TailCertificate('converges', list(cutoffs), sums.tolist(), 0.0, 0.0)

    if len(d) >= 3:
        q1 = d[-1] / d[-2] if d[-2] != 0 else np.inf
        q0 = d[-2] / d[-3] if d[-3] != 0 else np.inf
        if 0 <= q1 < 0.9 and 0 <= q0 < 0.9:
            e1 = sums[-1] + d[-1] * q1 / (1 - q1)
            e0 = sums[-2] + d[-2] * q0 / (1 - q0)
            if abs(e1 - e0) <= tol * max(abs(e1), 1e-300):
                return TailCertificate('converges', list(cutoffs), sums.tolist(), float(e1),
                                       float(abs(e1 - sums[-1])))
            extrapolated, tail = float(e1), float(abs(e1 - sums[-1]))
        rel = np.abs(d[-3:]) / np.maximum(np.abs(sums[-4:-1]), 1e-300)
        if np.all(rel > growth) and (np.all(d[-3:] > 0) or np.all(d[-3:] < 0)):
            label = 'diverges'

    return TailCertificate(label, list(cutoffs), sums.tolist(), extrapolated, tail)


# Cutoffs in s = log(1/t): doubling from one decade
TAIL_CUTOFFS = [math.log(10.0) * 2.0 ** k for k in range(9)]


def _tail_partial_sums(func: Callable[[np.ndarray], np.ndarray]) -> List[float]:
    sums, total, left = [], 0.0, 0.0
    # First cutoff includes [0, L_0]
    for right in TAIL_CUTOFFS:
        piece, _ = quad(lambda s: float(func(np.array([math.exp(-s)]))[0]), left, right,
                        epsabs=0.0, epsrel=1e-11, limit=400)
        total += piece
        sums.append(total)
        left = right
    return sums


@dataclass
class DiniClassification:
    label: str
    dini: TailCertificate
    square: TailCertificate

    def to_dict(self) -> Dict[str, Any]:
        return {
            'label': self.label,
            'dini_tail': self.dini.tail_estimate,
            'square_tail': self.square.tail_estimate,
            'dini_sums': self.dini.partial_sums,
            'square_sums': self.square.partial_sums,
        }


def classify_dini(m: ModulusOfContinuity) -> DiniClassification:
    """Classify omega as dini, square_dini_only or neither from tail behavior"""
    check = check_modulus(m)
    if not check.nondecreasing:
        raise ContractError("omega is not nondecreasing", first_violation=check.first_violation)

    dini_cert = classify_tail(TAIL_CUTOFFS, _tail_partial_sums(m))
    square_cert = classify_tail(TAIL_CUTOFFS, _tail_partial_sums(lambda t: m(t) ** 2))

    if dini_cert.label == 'converges':
        label = DINI
    elif square_cert.label == 'converges' and dini_cert.label == 'diverges':
        label = SQUARE_DINI_ONLY
    elif square_cert.label == 'diverges':
        label = NEITHER
    else:
        label = INCONCLUSIVE
    logger.debug("Dini classification of %s: %s", m.family, label)
    return DiniClassification(label=label, dini=dini_cert, square=square_cert)


def smallness_bound(m: ModulusOfContinuity, grid: np.ndarray = None) -> Dict[str, float]:
    """omega(r)^2 <= sigma(r) / c'_kappa, the pointwise bound implied by kappa-monotonicity"""
    grid = CHECK_GRID if grid is None else np.asarray(grid, dtype=float)
    c_prime = (1.0 - 2.0 ** (2 * m.kappa - 2)) / (2.0 - 2.0 * m.kappa)
    sig = sigma(m, grid)
    omega_sq = m(grid) ** 2
    ratio = np.where(sig > 0, omega_sq * c_prime / np.where(sig > 0, sig, 1.0), 0.0)
    sigma_one = float(sigma(m, 1.0))
    return {
        'sigma_one': sigma_one,
        'c_prime': c_prime,
        'omega_bound': math.sqrt(sigma_one / c_prime),
        'worst_ratio': float(np.max(ratio)),
        'holds': bool(np.all(omega_sq <= sig / c_prime * (1 + 1e-9) + 1e-300)),
    }
