import math

import numpy as np
import pytest

from annulus_means import RadialGrid
from coeff_fields import holder_field, identity_field
from delta_pairing import extract_Cy
from errors import ContractError, GridRangeError, UnsupportedCaseError
from greens_assembly import (CorrectionProblem, assemble_patch, cutoff_jet, extract_H,
                             leading_term_defect, solve_correction, standard_test_functions)
from indicator import FINITE, MINUS_INFINITY, SingularityClass
from singular_solution import construct_singular_solution

FOUR_PI = 4.0 * math.pi


@pytest.fixture(scope='module')
def identity_patch(identity_Z):
    return assemble_patch(identity_field(3), np.zeros(3), identity_Z, FOUR_PI,
                          singularity=SingularityClass(FINITE, 0.0))


def test_identity_patch_is_the_dirichlet_green_function(identity_patch):
    assert identity_patch.ball_radius == pytest.approx(0.5)
    assert identity_patch.correction.converged
    assert identity_patch.boundary_trace() < 1e-10
    x = np.array([[0.1, 0.0, 0.0], [0.0, 0.05, 0.2], [-0.3, 0.1, 0.1]])
    r = np.linalg.norm(x, axis=1)
    # G(x, 0) = (1/|x| - 1/R) / 4 pi on the ball of radius R
    expected = (1.0 / r - 1.0 / 0.5) / FOUR_PI
    np.testing.assert_allclose(identity_patch(x), expected, rtol=1e-3)


def test_identity_patch_satisfies_the_weak_delta_identity(identity_patch):
    weak = identity_patch.weak
    assert set(weak['results']) == {'bump', 'tilted', 'quadratic', 'septic', 'cosine'}
    assert weak['max_error'] < 1e-2


def test_identity_patch_leading_term(identity_patch):
    points = np.array([[1e-3, 0.0, 0.0], [0.0, 2e-2, 1e-2]])
    assert leading_term_defect(identity_patch, points) < 1e-8


def test_patch_rejects_points_outside_the_ball(identity_patch):
    with pytest.raises(GridRangeError):
        identity_patch(np.array([[0.6, 0.0, 0.0]]))


def test_radial_correction_matches_closed_form(sphere):
    grid = RadialGrid(0.5e-4, 0.5, 48)
    problem = CorrectionProblem.radial(lambda r: np.ones_like(r), grid, sphere)
    solution = solve_correction(problem, identity_field(3))
    assert solution.converged
    assert set(solution.modes) == {0}
    x = np.array([[0.1, 0.0, 0.0], [0.0, 0.3, 0.2], [1e-3, 1e-3, 0.0]])
    r = np.linalg.norm(x, axis=1)
    value, _, hess = solution.evaluate(x)
    # Delta v = 1 in |x| < R with v = 0 on the boundary
    np.testing.assert_allclose(value, (r ** 2 - 0.25) / 6.0, rtol=1e-6)
    np.testing.assert_allclose(np.trace(hess, axis1=1, axis2=2), 1.0, rtol=1e-5)
    assert solution.boundary_trace() < 1e-12
    header, rows = solution.history_rows()
    assert header == ['iteration', 'update', 'ratio'] and len(rows) == solution.iterations


def test_correction_problem_validation(sphere):
    grid = RadialGrid(1e-3, 0.5, 12)
    with pytest.raises(ContractError):
        CorrectionProblem(source=np.ones((grid.size, 3)), grid=grid, sphere=sphere, ball_radius=0.5)
    with pytest.raises(ContractError):
        CorrectionProblem(source=np.ones((grid.size, sphere.size)), grid=grid, sphere=sphere,
                          ball_radius=0.4)
    with pytest.raises(ContractError):
        CorrectionProblem(source=np.ones((grid.size, sphere.size)), grid=grid, sphere=sphere,
                          ball_radius=0.5, support=(0.1, 0.2))


def test_correction_needs_a_normalized_field(diag_field, sphere):
    grid = RadialGrid(1e-3, 0.5, 12)
    problem = CorrectionProblem.radial(lambda r: np.ones_like(r), grid, sphere)
    with pytest.raises(ContractError):
        solve_correction(problem, diag_field)


def test_patch_needs_a_finite_limit_and_positive_constant(identity_Z):
    with pytest.raises(UnsupportedCaseError):
        assemble_patch(identity_field(3), np.zeros(3), identity_Z, FOUR_PI,
                       singularity=SingularityClass(MINUS_INFINITY))
    with pytest.raises(UnsupportedCaseError):
        assemble_patch(identity_field(3), np.zeros(3), identity_Z, 0.0,
                       singularity=SingularityClass(FINITE, 0.0))


def test_patch_checks_pole_and_ball(identity_Z):
    with pytest.raises(ContractError):
        assemble_patch(identity_field(3), [0.1, 0.0, 0.0], identity_Z, FOUR_PI,
                       singularity=SingularityClass(FINITE, 0.0))
    with pytest.raises(GridRangeError):
        assemble_patch(identity_field(3), np.zeros(3), identity_Z, FOUR_PI,
                       singularity=SingularityClass(FINITE, 0.0), ball_radius=2.0)


def test_standard_test_functions_equal_one_at_the_pole():
    functions = standard_test_functions(0.5, 3)
    origin = np.zeros((1, 3))
    for name, phi in functions.items():
        value, grad = phi(origin)
        assert value[0] == pytest.approx(1.0), name
        assert grad.shape == (1, 3)
    far = np.array([[0.3, 0.0, 0.0]])
    assert all(phi(far)[0][0] == 0.0 for phi in functions.values())


def test_cutoff_jet_is_radial():
    from delta_pairing import CutoffFamily
    chi = CutoffFamily()
    x = np.array([[0.15, 0.1, 0.0]])
    value, grad, hess = cutoff_jet(x, chi, 0.5)
    r = np.linalg.norm(x)
    assert value[0] == pytest.approx(float(chi(r / 0.5)))
    np.testing.assert_allclose(grad[0], float(chi.derivative(r / 0.5)) / 0.5 * x[0] / r)
    np.testing.assert_allclose(hess[0], hess[0].T)


def test_constant_field_patches_are_translation_invariant(diag_field, sphere, make_grid):
    offset = np.array([0.02, 0.01, -0.01])
    values = []
    for pole in ([0.1, 0.0, 0.0], [-0.2, 0.1, 0.0]):
        Z = construct_singular_solution(diag_field, pole=pole, eps=0.35, grid=make_grid(0.35),
                                        sphere=sphere, max_degree=4)
        patch = assemble_patch(diag_field, pole, Z, 2.0 * FOUR_PI,
                               singularity=SingularityClass(FINITE, 0.0), verify=False)
        values.append(float(patch(np.asarray(pole) + offset)[0]))
    assert values[0] == pytest.approx(values[1], rel=1e-8)
    # Normalized distance |A^{-1/2} offset| and ball radius 0.175
    rt = np.linalg.norm([0.01, 0.01, -0.01])
    assert values[0] == pytest.approx(0.5 * (1.0 / rt - 1.0 / 0.175) / FOUR_PI, rel=1e-3)


@pytest.mark.slow
def test_holder_patch_remainder_vanishes_at_the_pole(holder_Z):
    C_y = extract_Cy(holder_Z).C_y
    assert C_y == pytest.approx(FOUR_PI, rel=1e-2)
    patch = assemble_patch(holder_field(lam=0.5, amplitude=0.1, domain_radius=0.5), np.zeros(3),
                           holder_Z, C_y)
    assert patch.weak['max_error'] < 2e-2
    report = extract_H(patch, [1e-4, 1e-3, 1e-2])
    assert report['slope'] >= 0.45
    assert np.isfinite(report['c'])
