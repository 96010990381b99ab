#!/usr/bin/env python3
"""Command line front end: runs the commands of an experiment manifest and writes
CSV artifacts, a plain-text summary and a run-history entry.

    python app.py --manifest manifests/identity.ini --out outputs/identity
"""
import argparse
import configparser
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from annulus_means import RadialGrid, build_spherical_quadrature, lp_mean, sphere_area
from coeff_fields import CoefficientField, load_field, normalize_at, normalized_harmonic
from config import Config
from delta_pairing import DeltaConstantReport, extract_Cy
from errors import ConfigError, LabError
from greens_assembly import assemble_patch, extract_H
from history_manager import RunHistory
from indicator import (INDETERMINATE, MINUS_INFINITY, RadialProfile, SingularityClass, classify,
                       compute_I_radial, profile_invariants)
from math_parser import MathParser
from potential_kernel import HarmonicModeField, apply_K_mode, mode_fd_residual, verify_prop1
from singular_solution import (SingularSolution, construct_singular_solution, maximum_principle_report,
                               radial_ode_oracle, rate_report)
from visualizer import RunVisualizer

logger = logging.getLogger(__name__)

GRIDS_KEYS = {'points_per_decade', 'decades', 'eps', 'harmonic_degree', 'sphere_degree', 'ball_radius',
              'schedule_length'}
RUN_KEYS = {'commands', 'seed', 'tol_scale', 'pole', 'plots', 'p', 'radii', 'delta_tol', 'weak_tol',
            'prop1_sources', 'oracle_tol'}


# Manifest -----------------------------------------------------------------------

@dataclass
class ExperimentManifest:
    path: str
    sections: Dict[str, Dict[str, str]]
    commands: List[str]
    seed: int
    tol_scale: float
    pole: List[float]
    plots: bool
    p: float
    radii: List[float]
    points_per_decade: int
    decades: float
    eps: Optional[float]
    harmonic_degree: int
    sphere_degree: Optional[int]
    ball_radius: Optional[float]
    schedule_length: int
    delta_tol: float
    weak_tol: float
    oracle_tol: float
    prop1_sources: int

    def provenance(self, f: CoefficientField) -> Dict[str, Any]:
        return {
            'family': f.family, 'params': f.params, 'dimension': f.dimension, 'pole': self.pole,
            'points_per_decade': self.points_per_decade, 'decades': self.decades,
            'harmonic_degree': self.harmonic_degree, 'seed': self.seed, 'tol_scale': self.tol_scale,
        }


def _check_keys(section: Dict[str, str], allowed: set, where: str):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]", keys=unknown, allowed=sorted(allowed))


def _positive(value: float, name: str) -> float:
    if not value > 0:
        raise ConfigError(f"'{name}' must be positive", value=value)
    return value


def load_manifest(path: str, seed: int = None, tol_scale: float = None,
                  parser: MathParser = None) -> ExperimentManifest:
    """Read an INI manifest; command line values override manifest values, which override Config"""
    parser = parser or MathParser()
    ini = configparser.ConfigParser()
    if not ini.read(path):
        raise ConfigError("manifest not found or unreadable", path=path)
    known = {'field', 'modulus', 'grids', 'run'}
    unknown = sorted(set(ini.sections()) - known)
    if unknown:
        raise ConfigError("unknown manifest sections", sections=unknown)
    for required in ('field', 'run'):
        if required not in ini:
            raise ConfigError(f"manifest has no [{required}] section", path=path)
    sections = {name: dict(ini[name]) for name in ini.sections()}
    grids = sections.get('grids', {})
    run = sections['run']
    _check_keys(grids, GRIDS_KEYS, 'grids')
    _check_keys(run, RUN_KEYS, 'run')

    commands = [c.strip() for c in run.get('commands', '').split(',') if c.strip()]
    if not commands:
        raise ConfigError("[run] lists no commands")
    bad = [c for c in commands if c not in Config.COMMANDS]
    if bad:
        raise ConfigError("unknown commands", commands=bad, known=Config.COMMANDS)

    n = int(sections['field'].get('dimension', 3))
    pole = parser.parse_list(run['pole']) if 'pole' in run else [0.0] * n
    if len(pole) != n:
        raise ConfigError("pole does not match the dimension", pole=pole, dimension=n)
    radii = parser.parse_list(run['radii']) if 'radii' in run else []
    sphere_degree = int(grids['sphere_degree']) if 'sphere_degree' in grids else None

    return ExperimentManifest(
        path=path, sections=sections, commands=commands,
        seed=int(seed if seed is not None else run.get('seed', Config.SEED)),
        tol_scale=_positive(float(tol_scale if tol_scale is not None else run.get('tol_scale', Config.TOL_SCALE)),
                            'tol_scale'),
        pole=pole, plots=run.get('plots', 'false').strip().lower() in ('1', 'true', 'yes', 'on'),
        p=_positive(float(run.get('p', Config.EXPONENT_P)), 'p'),
        radii=[_positive(r, 'radii') for r in radii],
        points_per_decade=int(_positive(float(grids.get('points_per_decade', Config.POINTS_PER_DECADE)),
                                        'points_per_decade')),
        decades=_positive(float(grids.get('decades', -math.log10(Config.R_MIN_FACTOR))), 'decades'),
        eps=_positive(float(grids['eps']), 'eps') if 'eps' in grids else None,
        harmonic_degree=int(_positive(float(grids.get('harmonic_degree', Config.HARMONIC_DEGREE)),
                                      'harmonic_degree')),
        sphere_degree=sphere_degree,
        ball_radius=_positive(float(grids['ball_radius']), 'ball_radius') if 'ball_radius' in grids else None,
        schedule_length=int(_positive(float(grids.get('schedule_length', Config.SCHEDULE_LENGTH)),
                                      'schedule_length')),
        delta_tol=_positive(float(run.get('delta_tol', 0.02)), 'delta_tol'),
        weak_tol=_positive(float(run.get('weak_tol', 0.01)), 'weak_tol'),
        oracle_tol=_positive(float(run.get('oracle_tol', 1e-6)), 'oracle_tol'),
        prop1_sources=int(_positive(float(run.get('prop1_sources', 10)), 'prop1_sources')),
    )


# Artifacts ----------------------------------------------------------------------

def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[Any]], provenance: str):
    """CSV with a one-line comment header; bodies carry no timestamps"""
    with open(path, 'w', newline='') as handle:
        handle.write(f'# {provenance}\n')
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


@dataclass
class CommandResult:
    name: str
    passed: bool
    details: Dict[str, Any] = field(default_factory=dict)
    error: Optional[Dict[str, Any]] = None

    def block(self) -> str:
        lines = [f'[{self.name}]', f"status: {'pass' if self.passed else 'fail'}"]
        for key, value in self.details.items():
            lines.append(f'{key}: {json.dumps(value, default=str, sort_keys=True)}')
        if self.error is not None:
            lines.append(f"error: {json.dumps(self.error, default=str, sort_keys=True)}")
        return '\n'.join(lines)


class Experiment:
    """Lazily built pipeline state shared by the commands of one manifest"""

    def __init__(self, manifest: ExperimentManifest, out: str):
        self.manifest = manifest
        self.out = out
        self.rng = np.random.default_rng(manifest.seed)
        self.field = load_field(manifest.sections, rng=self.rng)
        n = self.field.dimension
        degree = manifest.sphere_degree or 2 * manifest.harmonic_degree + 4
        self.sphere = build_spherical_quadrature(n, degree)
        self.normalized, self.frame = normalize_at(self.field, manifest.pole)
        self.eps = manifest.eps or self.normalized.domain_radius
        self.grid = RadialGrid(self.eps * 10 ** (-manifest.decades), self.eps, manifest.points_per_decade)
        self.provenance = json.dumps(manifest.provenance(self.field), default=str, sort_keys=True)
        self.visualizer = RunVisualizer(out) if manifest.plots else None
        self._profile: Optional[RadialProfile] = None
        self._singularity: Optional[SingularityClass] = None
        self._solution: Optional[SingularSolution] = None
        self._delta: Optional[DeltaConstantReport] = None

    def csv(self, name: str, header, rows):
        write_csv(os.path.join(self.out, name), header, rows, self.provenance)

    @property
    def profile(self) -> RadialProfile:
        if self._profile is None:
            self._profile = compute_I_radial(self.normalized, self.eps, self.grid, self.sphere)
        return self._profile

    @property
    def singularity(self) -> SingularityClass:
        if self._singularity is None:
            self._singularity = classify(self.profile)
        return self._singularity

    @property
    def solution(self) -> SingularSolution:
        if self._solution is None:
            self._solution = construct_singular_solution(
                self.field, self.manifest.pole, self.eps, self.grid, self.sphere,
                self.manifest.harmonic_degree, self.manifest.p, profile=self.profile)
        return self._solution

    @property
    def delta(self) -> DeltaConstantReport:
        if self._delta is None:
            schedule = [self.eps * 2.0 ** (-k) for k in range(self.manifest.schedule_length)]
            self._delta = extract_Cy(self.solution, schedule, self.singularity)
        return self._delta


# Commands -----------------------------------------------------------------------

def run_classify(exp: Experiment) -> CommandResult:
    cls = exp.singularity
    exp.csv('profile.csv', *exp.profile.to_rows())
    invariants = profile_invariants(exp.profile)
    if exp.visualizer:
        exp.visualizer.plot_profile(exp.profile)
    return CommandResult('classify', cls.variant != INDETERMINATE, {
        'variant': cls.label(), 'I0': cls.I0, 'A': exp.profile.Aconst,
        'error_estimate': cls.certificate.get('error_estimate'), 'invariants': invariants,
    })


def run_construct(exp: Experiment) -> CommandResult:
    Z = exp.solution
    exp.csv('singular_profile.csv', *Z.radial.to_rows())
    exp.csv('iterations.csv', *Z.angular.history_rows())
    grid = Z.radial.grid
    radii = grid.r_max * np.logspace(-1, -min(6.0, grid.decades - 0.5), 12)
    table = maximum_principle_report(Z, radii)
    exp.csv('max_principle.csv', table['header'], table['rows'])
    details: Dict[str, Any] = {
        'iterations': Z.angular.iterations, 'converged': Z.angular.converged, 'x_norm': Z.angular.x_norm,
        'scaled_decreasing': table['scaled_decreasing'], 'max_increasing': table['max_increasing'],
        'rates': rate_report(Z, exp.manifest.p),
    }
    passed = Z.angular.converged
    if exp.normalized.radial:
        oracle = radial_ode_oracle(exp.normalized, exp.eps, grid)
        window = grid.points >= grid.r_max * 1e-3
        gap = float(np.max(np.abs(Z.radial.h[window] - oracle.h[window]) / np.abs(oracle.h[window])))
        details['oracle_relative_gap'] = gap
        passed = passed and gap <= exp.manifest.oracle_tol * exp.manifest.tol_scale
    if exp.singularity.variant == MINUS_INFINITY:
        passed = passed and table['scaled_decreasing']
    if exp.visualizer:
        exp.visualizer.plot_profile(exp.profile, Z.radial, name='singular_profile.png')
    return CommandResult('construct', bool(passed), details)


def run_delta_const(exp: Experiment) -> CommandResult:
    report = exp.delta
    exp.csv('pairings.csv', *report.to_rows())
    summary = report.summary()
    if report.case == MINUS_INFINITY:
        passed = report.passes(1e-2 * sphere_area(exp.field.dimension) * exp.manifest.tol_scale)
    else:
        passed = report.passes(exp.manifest.delta_tol * exp.manifest.tol_scale)
    if exp.visualizer:
        exp.visualizer.plot_pairings(summary, report.schedule, report.values)
    return CommandResult('delta-const', passed, summary)


def run_greens(exp: Experiment) -> CommandResult:
    report = exp.delta
    Z = exp.solution
    patch = assemble_patch(exp.field, exp.manifest.pole, Z, report.C_y, exp.singularity,
                           ball_radius=exp.manifest.ball_radius)
    ball = patch.ball_radius
    spread = float(np.linalg.norm(exp.frame.B, 2))
    radii = exp.manifest.radii or list(ball / spread * np.logspace(-3, -1, 7))
    remainder = extract_H(patch, radii, exp.manifest.p)
    exp.csv('remainder.csv', ['r', 'M2p_H', 'rate'],
            [list(row) for row in zip(remainder['radii'], remainder['m2p'], remainder['rate'])])

    points = np.concatenate([r * exp.sphere.nodes for r in radii]) + np.asarray(exp.manifest.pole)
    value, _, _ = patch.evaluate(points)
    exp.csv('patch_samples.csv', [f'x{i + 1}' for i in range(exp.field.dimension)] + ['F'],
            [list(p) + [v] for p, v in zip(points, value)])
    weak = patch.weak
    exp.csv('weak_identity.csv', ['test_function', 'value', 'error', 'tail'],
            [[name, r['value'], r['error'], r['tail']] for name, r in weak['results'].items()])
    if exp.visualizer:
        exp.visualizer.plot_rate_fit(remainder['radii'], remainder['m2p'], remainder['rate'], remainder['c'],
                                     title='M_2,p(H, r)', name='remainder.png')
    trace = patch.boundary_trace()
    passed = weak['max_error'] <= exp.manifest.weak_tol * exp.manifest.tol_scale and trace <= 1e-8
    return CommandResult('greens', bool(passed), {
        'C_y': patch.C_y, 'weak_max_error': weak['max_error'], 'boundary_trace': trace,
        'correction_iterations': patch.correction.iterations, 'slope': remainder['slope'],
        'c': remainder['c'], 'ratio_spread': remainder['ratio_spread'],
    })


def seeded_mode_sources(rng: np.random.Generator, grid: RadialGrid, sphere, count: int) -> List[HarmonicModeField]:
    """Mean-free sources: smooth radial bumps times zonal harmonics of degree 1..4 about random axes"""
    n = sphere.dimension
    u = grid.u
    sources = []
    for _ in range(count):
        l = int(rng.integers(1, 5))
        axis = rng.standard_normal(n)
        axis /= np.linalg.norm(axis)
        center = rng.uniform(u[0] + 0.3 * (u[-1] - u[0]), u[-1] - 0.3 * (u[-1] - u[0]))
        width = rng.uniform(0.8, 1.5)
        amplitude = rng.uniform(0.5, 2.0)
        radial = amplitude * np.exp(-((u - center) / width) ** 2)
        sources.append(HarmonicModeField(degree=l, grid=grid, values=radial,
                                         angular=normalized_harmonic(l, n)(sphere.nodes @ axis)))
    return sources


def run_verify_prop1(exp: Experiment) -> CommandResult:
    n = exp.field.dimension
    grid = RadialGrid(1e-3, 10.0, 200)
    sphere = build_spherical_quadrature(n, 12)
    sources = seeded_mode_sources(np.random.default_rng(exp.manifest.seed), grid, sphere,
                                  exp.manifest.prop1_sources)
    radii = np.logspace(-2.5, 0.5, 7)
    report = verify_prop1(sources, exp.manifest.p, radii, sphere)
    exp.csv('prop1.csv', *report.to_rows())
    residual = max(mode_fd_residual(apply_K_mode(f, n), f, n) for f in sources)
    passed = report.passed and residual <= 1e-5 * exp.manifest.tol_scale
    return CommandResult('verify-prop1', bool(passed), {
        'constant': report.constant, 'fd_residual': residual, 'sources': len(sources),
        'vacuous': report.vacuous, 'trend': report.trend, 'ratio_spread': report.spread,
    })


def run_means(exp: Experiment) -> CommandResult:
    f, y = exp.field, np.asarray(exp.manifest.pole)
    A_y = f.at(y)
    radii = exp.manifest.radii or list(exp.eps * np.logspace(-4, -0.5, 8))
    rows, passed = [], True
    for r in radii:
        report = lp_mean(lambda x: f(x) - A_y[None], exp.manifest.p, float(r), y)
        omega = float(f.modulus(2.0 * r))
        ok = report.value <= omega * (1 + 1e-9) + 1e-14
        passed = passed and ok
        rows.append([float(r), exp.manifest.p, report.value, omega, report.value / omega if omega > 0 else 0.0])
    exp.csv('means.csv', ['r', 'p', 'M_p(A - A_y)', 'omega(2r)', 'ratio'], rows)
    return CommandResult('means', bool(passed), {'radii': len(radii), 'max_ratio': max(row[4] for row in rows)})


COMMAND_HANDLERS: Dict[str, Callable[[Experiment], CommandResult]] = {
    'classify': run_classify,
    'construct': run_construct,
    'delta-const': run_delta_const,
    'greens': run_greens,
    'verify-prop1': run_verify_prop1,
    'means': run_means,
}


def run(manifest: ExperimentManifest, out: str) -> int:
    """Execute the manifest's commands in order; 0 iff every block passes"""
    Config.TOL_SCALE = manifest.tol_scale
    Config.ensure_directories(out)
    results: List[CommandResult] = []
    provenance: Dict[str, Any] = {'manifest': manifest.path, 'seed': manifest.seed}
    try:
        exp = Experiment(manifest, out)
        provenance = manifest.provenance(exp.field)
    except LabError as e:
        logger.error("Manifest setup failed: %s", e.message)
        results.append(CommandResult('setup', False, error=e.to_dict()))
        exp = None

    if exp is not None:
        for name in manifest.commands:
            logger.info("Running %s", name)
            try:
                results.append(COMMAND_HANDLERS[name](exp))
            except LabError as e:
                logger.error("%s failed: %s", name, e.message)
                results.append(CommandResult(name, False, error=e.to_dict()))

    header = f'# {json.dumps(provenance, default=str, sort_keys=True)}'
    with open(os.path.join(out, 'summary.txt'), 'w') as handle:
        handle.write(header + '\n\n' + '\n\n'.join(r.block() for r in results) + '\n')
    outcomes = {r.name: r.passed for r in results}
    RunHistory(out).save_run(manifest.path, manifest.seed, manifest.commands, outcomes, provenance)
    status = 0 if results and all(outcomes.values()) else 1
    logger.info("Run finished with status %d", status)
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Singular and fundamental solution laboratory")
    parser.add_argument('--manifest', required=True, help="INI experiment manifest")
    parser.add_argument('--out', default=None, help="output directory (default: Config.OUTPUT_FOLDER)")
    parser.add_argument('--seed', type=int, default=None, help="seed for randomized checks")
    parser.add_argument('--tol-scale', type=float, default=None, help="multiplier for declared tolerances")
    parser.add_argument('--log-level', default=None, help="logging level (default: Config.LOG_LEVEL)")
    return parser


def main(argv: Sequence[str] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=(args.log_level or Config.LOG_LEVEL).upper(), format=Config.LOG_FORMAT)
    out = args.out or Config.OUTPUT_FOLDER
    try:
        manifest = load_manifest(args.manifest, seed=args.seed, tol_scale=args.tol_scale)
    except LabError as e:
        logger.error("Invalid manifest: %s", e.message)
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, 'summary.txt'), 'w') as handle:
            handle.write(CommandResult('manifest', False, error=e.to_dict()).block() + '\n')
        return 2
    return run(manifest, out)


if __name__ == '__main__':
    sys.exit(main())
