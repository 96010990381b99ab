import math

import numpy as np
import pytest

from annulus_means import RadialGrid
from coeff_fields import (gs_counterexample_field, gs_power_field, holder_field, identity_field,
                          normalize_at, perturbation_field)
from errors import ContractError, DomainError, InsufficientDataError
from indicator import (FINITE, MINUS_INFINITY, PLUS_INFINITY, E_doubling_check, J_volume, J_y, classify,
                       compute_I_radial, compute_I_volume, indicator_integrand, profile_invariants,
                       radial_indicator_oracle, theta_from_profile)


def test_gs_power_profile_matches_closed_form(gs_sqrt_profile):
    r = np.array([1e-6, 1e-3, 0.1, 0.5])
    nodes = gs_sqrt_profile.points
    # Nodal values come from the quadrature alone
    np.testing.assert_allclose(gs_sqrt_profile.I, -4.0 * (1.0 - np.sqrt(nodes)), atol=1e-9)
    # I(r) = (1 - n) int_r^1 rho^{1/2} d rho / rho = -4 (1 - sqrt(r))
    np.testing.assert_allclose(gs_sqrt_profile.I_at(r), -4.0 * (1.0 - np.sqrt(r)), atol=1e-5)
    assert gs_sqrt_profile.I[-1] == 0.0


def test_gs_power_profile_matches_radial_oracle(gs_sqrt_profile):
    g = gs_sqrt_profile.field.radial_profile
    for r in (1e-4, 0.01, 0.3):
        assert gs_sqrt_profile.I_at(r) == pytest.approx(radial_indicator_oracle(g, 3, r, 1.0), abs=1e-5)


def test_gs_power_field_has_finite_limit(gs_sqrt_class):
    assert gs_sqrt_class.variant == FINITE
    assert gs_sqrt_class.I0 == pytest.approx(-4.0, abs=1e-6)
    assert gs_sqrt_class.label().startswith('FiniteLimit(')
    assert gs_sqrt_class.certificate['tail'] == 'converges'


def test_identity_field_has_zero_indicator(sphere, make_grid):
    profile = compute_I_radial(identity_field(3), 1.0, make_grid(1.0, 6.0), sphere)
    cls = classify(profile)
    assert cls.variant == FINITE
    assert cls.I0 == pytest.approx(0.0, abs=1e-12)
    assert profile.Aconst == pytest.approx(1.0)
    doubling = E_doubling_check(profile)
    assert doubling['plus_c1'] == pytest.approx(1.0) and doubling['plus_c2'] == pytest.approx(1.0)


def test_holder_field_indicator_vanishes(sphere, make_grid):
    f = holder_field(lam=0.5, amplitude=0.1, domain_radius=0.5)
    profile = compute_I_radial(f, 0.5, make_grid(0.5, 6.0), sphere)
    np.testing.assert_allclose(profile.I, 0.0, atol=1e-11)
    np.testing.assert_allclose(profile.R, 0.0, atol=1e-12)
    assert classify(profile).I0 == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("sign, variant", [(-1.0, MINUS_INFINITY), (1.0, PLUS_INFINITY)])
def test_counterexample_indicator_escapes(sign, variant, sphere, make_grid):
    f = gs_counterexample_field(3, sign)
    profile = compute_I_radial(f, f.domain_radius, make_grid(f.domain_radius, 6.0), sphere)
    cls = classify(profile)
    assert cls.variant == variant
    assert cls.I0 is None
    assert cls.certificate['tail'] == 'diverges'
    deep = np.asarray(cls.certificate['deep_I'])
    assert np.all(np.sign(np.diff(deep)) == (-1 if sign < 0 else 1))


def test_classification_needs_five_decades(sphere):
    profile = compute_I_radial(identity_field(3), 1.0, RadialGrid(1e-3, 1.0, 12), sphere)
    with pytest.raises(InsufficientDataError):
        classify(profile)


def test_profile_needs_normalized_field(diag_field, sphere):
    with pytest.raises(ContractError):
        compute_I_radial(diag_field, 0.5, RadialGrid(1e-6, 0.5, 12), sphere)


def test_volume_indicator_agrees_with_radial_profile(gs_sqrt_profile, sphere):
    f = gs_power_field(c=1.0, lam=0.5)
    value = compute_I_volume(f, np.zeros(3), 1e-3, 1.0, sphere)
    assert value == pytest.approx(float(gs_sqrt_profile.I_at(1e-3)), abs=1e-8)


def test_volume_indicator_vanishes_for_constant_field(diag_field, sphere):
    value = compute_I_volume(diag_field, [0.1, 0.0, 0.0], 1e-4, 0.4, sphere)
    assert value == pytest.approx(0.0, abs=1e-12)


def test_indicator_integrand_of_constant_field(diag_field, rng):
    y = np.array([0.1, 0.0, 0.0])
    z = y + 0.1 * rng.standard_normal((10, 3))
    np.testing.assert_allclose(indicator_integrand(diag_field, y, z), 0.0, atol=1e-12)
    with pytest.raises(DomainError):
        indicator_integrand(diag_field, y, y[None, :])


def test_J_matches_volume_form(gs_sqrt_profile, gs_sqrt_class, sphere):
    J = float(J_y(gs_sqrt_profile, 0.01, gs_sqrt_class))
    assert J == pytest.approx(4.0 * math.sqrt(0.01), abs=1e-6)
    f = gs_power_field(c=1.0, lam=0.5)
    assert J_volume(f, None, 0.01, sphere) == pytest.approx(4.0 * math.sqrt(0.01), rel=1e-8)


def test_J_needs_finite_limit(gs_sqrt_profile):
    from indicator import SingularityClass
    with pytest.raises(ContractError):
        J_y(gs_sqrt_profile, 0.01, SingularityClass(MINUS_INFINITY))


def test_theta_majorizes_the_indicator_gap(gs_sqrt_profile, gs_sqrt_class):
    theta = theta_from_profile(gs_sqrt_profile, gs_sqrt_class.I0)
    r = gs_sqrt_profile.points
    values = theta(r)
    assert np.all(np.diff(values) >= 0)
    assert np.all(values >= np.abs(gs_sqrt_profile.I - gs_sqrt_class.I0) - 1e-12)
    assert theta(0.0) == 0.0


def test_profile_invariants_of_gs_field(gs_sqrt_profile):
    invariants = profile_invariants(gs_sqrt_profile)
    assert invariants['alpha_bounds']
    assert invariants['R_bound']
    assert invariants['E_product_error'] < 1e-12
    assert invariants['I_derivative_gap'] < 2e-2


def test_normalized_indicator_is_frame_invariant(diag_field, sphere, make_grid):
    normalized, _ = normalize_at(diag_field, [0.1, 0.0, 0.0])
    profile = compute_I_radial(normalized, 0.4, make_grid(0.4, 6.0), sphere)
    np.testing.assert_allclose(profile.I, 0.0, atol=1e-11)
    np.testing.assert_allclose(profile.alpha, 1.0, atol=1e-12)


@pytest.mark.parametrize("f", [
    identity_field(3),
    gs_power_field(c=1.0, lam=0.5),
    gs_counterexample_field(3, -1.0),
    perturbation_field(degree=2, amplitude=0.05, lam=0.5),
], ids=["identity", "gs_sqrt", "counterexample", "perturbation"])
def test_volume_and_radial_indicators_agree(f, sphere, make_grid):
    eps = f.domain_radius
    profile = compute_I_radial(f, eps, make_grid(eps, 6.0), sphere)
    for r in eps * np.array([1e-5, 1e-4, 1e-3, 1e-2, 1e-1]):
        volume = compute_I_volume(f, np.zeros(3), r, eps, sphere)
        assert volume == pytest.approx(float(profile.I_at(r)), abs=1e-5)


def test_volume_indicator_of_degree_two_perturbation(sphere):
    # mean of tr beta - 3 beta_tt is amplitude r^lam / 5, so I(r) = 0.02 (1 - sqrt r)
    f = perturbation_field(degree=2, amplitude=0.05, lam=0.5)
    for r in (1e-4, 0.01, 0.25):
        assert compute_I_volume(f, None, r, 1.0, sphere) == pytest.approx(0.02 * (1.0 - math.sqrt(r)),
                                                                          abs=1e-10)


def test_volume_indicator_rejects_bad_radii(diag_field, sphere):
    with pytest.raises(DomainError):
        compute_I_volume(diag_field, [0.1, 0.0, 0.0], 0.2, 0.1, sphere)
    with pytest.raises(ContractError):
        compute_I_volume(diag_field, [0.1, 0.0, 0.0], 0.01, 0.95, sphere)
