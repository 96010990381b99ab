import math

import numpy as np
import pytest

from annulus_means import build_spherical_quadrature
from delta_pairing import (CutoffFamily, affine_covariance, cutoff_independence, default_schedule,
                           extract_Cy, pair_LZ, pair_LZ_original, theoretical_constant)
from errors import ContractError, GridRangeError, UnsupportedCaseError
from indicator import FINITE, MINUS_INFINITY, PLUS_INFINITY, SingularityClass, classify
from singular_solution import construct_singular_solution

FOUR_PI = 4.0 * math.pi


@pytest.fixture(scope='module')
def identity_class(identity_Z):
    return classify(identity_Z.profile)


def test_cutoff_rejects_bad_parameters():
    with pytest.raises(ContractError):
        CutoffFamily(inner=0.5, outer=0.25)
    with pytest.raises(ContractError):
        CutoffFamily(shape='cosine')


@pytest.mark.parametrize("shape", ['quintic', 'septic'])
def test_cutoff_profile_and_derivatives(shape):
    chi = CutoffFamily(shape=shape)
    assert chi(0.1) == 1.0 and chi(0.6) == 0.0
    assert chi(0.375) == pytest.approx(0.5)
    t = np.linspace(0.27, 0.48, 9)
    h = 1e-6
    np.testing.assert_allclose(chi.derivative(t), (chi(t + h) - chi(t - h)) / (2 * h), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(chi.second_derivative(t),
                               (chi.derivative(t + h) - chi.derivative(t - h)) / (2 * h), rtol=1e-5, atol=1e-6)
    assert chi.derivative(0.25) == 0.0 and chi.derivative(0.5) == 0.0


def test_theoretical_constant():
    assert theoretical_constant(3, 0.0) == pytest.approx(FOUR_PI)
    assert theoretical_constant(3, -4.0) == pytest.approx(FOUR_PI * math.exp(-4.0))
    assert theoretical_constant(3, 0.0, det=4.0) == pytest.approx(2.0 * FOUR_PI)
    assert theoretical_constant(3, None) == 0.0


def test_default_schedule_halves_eps():
    schedule = default_schedule(1.0, 5)
    assert schedule == [1.0, 0.5, 0.25, 0.125, 0.0625]


def test_pairing_of_the_newtonian_kernel(identity_Z):
    result = pair_LZ(identity_Z, 0.5)
    assert result.value == pytest.approx(FOUR_PI, rel=1e-9)
    assert result.cauchy
    assert result.components['h3'] == pytest.approx(0.0, abs=1e-12)
    assert result.components['v'] == 0.0
    assert result.eta == pytest.approx(0.5 * 1e-4)


def test_pairing_support_must_lie_on_the_grid(identity_Z):
    with pytest.raises(GridRangeError):
        pair_LZ(identity_Z, 4.0)
    with pytest.raises(ContractError):
        pair_LZ(identity_Z, 0.5, eta=0.2)


def test_identity_delta_constant(identity_Z, identity_class):
    report = extract_Cy(identity_Z, cls=identity_class)
    assert report.C_y == pytest.approx(FOUR_PI, rel=1e-6)
    assert report.theoretical == pytest.approx(FOUR_PI)
    assert report.passes(1e-6)
    assert report.certificate['cauchy']
    header, rows = report.to_rows()
    assert header[:3] == ['eps', 'eta', 'pairing'] and len(rows) == len(report.schedule)


def test_gs_power_delta_constant(gs_sqrt_Z, gs_sqrt_class):
    report = extract_Cy(gs_sqrt_Z, cls=gs_sqrt_class)
    assert report.theoretical == pytest.approx(FOUR_PI * math.exp(-4.0), rel=1e-5)
    assert report.relative_error < 0.02
    assert report.rate_name == 'max(omega,sigma,theta)'
    assert report.summary()['case'].startswith(FINITE)


def test_counterexample_delta_constant_vanishes(counterexample_Z):
    report = extract_Cy(counterexample_Z)
    assert report.case == MINUS_INFINITY
    assert report.theoretical == 0.0
    assert report.certificate['monotone_decay']
    assert report.passes(0.01 * FOUR_PI)
    assert report.rate_name == 'exp_I'


def test_plus_infinity_has_no_delta_constant(identity_Z):
    with pytest.raises(UnsupportedCaseError):
        extract_Cy(identity_Z, cls=SingularityClass(PLUS_INFINITY))


@pytest.mark.parametrize("schedule", [[0.5, 0.25, 0.3, 0.1], [0.5, 0.25, 0.125]])
def test_schedule_must_decrease(identity_Z, schedule):
    with pytest.raises(ContractError):
        extract_Cy(identity_Z, schedule=schedule, cls=SingularityClass(FINITE, 0.0))


def test_delta_constant_does_not_depend_on_the_cutoff(identity_Z, identity_class):
    result = cutoff_independence(identity_Z, identity_class)
    assert set(result['reports']) == {'quintic', 'septic'}
    assert result['consistent']
    assert result['spread'] < 1e-8


def test_constant_field_delta_constant_scales_with_determinant(diag_field, sphere, make_grid):
    pole = [0.1, 0.0, 0.0]
    Z = construct_singular_solution(diag_field, pole=pole, eps=0.45, grid=make_grid(0.45),
                                    sphere=sphere, max_degree=4)
    assert Z.frame.det == pytest.approx(4.0)
    report = extract_Cy(Z, cls=SingularityClass(FINITE, 0.0))
    assert report.C_y == pytest.approx(2.0 * FOUR_PI, rel=1e-6)
    assert report.relative_error < 1e-6


@pytest.fixture(scope='module')
def diag_Z(diag_field, sphere, make_grid):
    return construct_singular_solution(diag_field, pole=[0.1, 0.0, 0.0], eps=0.45, grid=make_grid(0.45),
                                       sphere=sphere, max_degree=4)


@pytest.mark.parametrize("eps_k", [0.4, 0.1])
def test_original_coordinate_pairing_carries_the_determinant(diag_Z, eps_k):
    fine = build_spherical_quadrature(3, 40)
    original = pair_LZ_original(diag_Z, eps_k, sphere=fine)
    assert original.value == pytest.approx(2.0 * FOUR_PI, rel=1e-4)
    assert abs(original.components['inner']) < 1e-10
    check = affine_covariance(diag_Z, eps_k, sphere=fine)
    assert check['normalized_scaled'] == pytest.approx(2.0 * FOUR_PI, rel=1e-6)
    assert check['gap'] < 1e-4


def test_delta_report_records_the_covariance_check(diag_Z):
    report = extract_Cy(diag_Z, cls=SingularityClass(FINITE, 0.0))
    assert report.certificate['original_frame_eps'] == pytest.approx(0.45)
    assert report.certificate['affine_gap'] < 1e-3
    assert 'affine_gap' in report.summary()


def test_identity_frame_skips_the_covariance_check(identity_Z, identity_class):
    assert 'affine_gap' not in extract_Cy(identity_Z, cls=identity_class).certificate


def test_original_coordinate_pairing_checks_the_stretched_support(diag_Z):
    # |A_y^{-1/2}(x - y)| reaches half of |x - y| along e1
    with pytest.raises(GridRangeError):
        pair_LZ_original(diag_Z, 0.4, eta=4e-9)
    with pytest.raises(ContractError):
        pair_LZ_original(diag_Z, 0.4, eta=0.2)
