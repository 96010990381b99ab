import math

import numpy as np
import pytest

from annulus_means import RadialGrid, build_spherical_quadrature
from coeff_fields import (constant_field, gs_counterexample_field, gs_power_field, holder_field,
                          identity_field)
from config import Config
from indicator import classify, compute_I_radial
from singular_solution import construct_singular_solution

# Small resolutions: L = 4 needs a sphere rule exact to degree 2L + 4
HARMONIC_DEGREE = 4
SPHERE_DEGREE = 12
POINTS_PER_DECADE = 12


@pytest.fixture(autouse=True)
def default_tolerances(monkeypatch):
    monkeypatch.setattr(Config, 'TOL_SCALE', 1.0)


@pytest.fixture(scope='session')
def sphere():
    return build_spherical_quadrature(3, SPHERE_DEGREE)


@pytest.fixture(scope='session')
def rng():
    return np.random.default_rng(20240601)


def _grid(eps: float, decades: float = 8.0) -> RadialGrid:
    return RadialGrid(eps * 10 ** (-decades), eps, POINTS_PER_DECADE)


@pytest.fixture(scope='session')
def make_grid():
    return _grid


def _solve(field, sphere, decades=8.0):
    eps = field.domain_radius
    return construct_singular_solution(field, eps=eps, grid=_grid(eps, decades), sphere=sphere,
                                       max_degree=HARMONIC_DEGREE)


@pytest.fixture(scope='session')
def identity_Z(sphere):
    return _solve(identity_field(3, 1.0), sphere)


@pytest.fixture(scope='session')
def gs_sqrt_Z(sphere):
    return _solve(gs_power_field(c=1.0, lam=0.5, n=3, domain_radius=1.0), sphere)


@pytest.fixture(scope='session')
def counterexample_Z(sphere):
    return _solve(gs_counterexample_field(3, -1.0, math.exp(-2.0)), sphere)


@pytest.fixture(scope='session')
def holder_Z(sphere):
    return _solve(holder_field(lam=0.5, amplitude=0.1, n=3, domain_radius=0.5), sphere)


@pytest.fixture(scope='session')
def diag_field():
    return constant_field(np.diag([4.0, 1.0, 1.0]), domain_radius=1.0)


@pytest.fixture(scope='session')
def gs_sqrt_profile(sphere):
    f = gs_power_field(c=1.0, lam=0.5, n=3, domain_radius=1.0)
    return compute_I_radial(f, 1.0, _grid(1.0), sphere)


@pytest.fixture(scope='session')
def gs_sqrt_class(gs_sqrt_profile):
    return classify(gs_sqrt_profile)
