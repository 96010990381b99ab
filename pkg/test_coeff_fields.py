import math

import numpy as np
import pytest

from annulus_means import sphere_area
from coeff_fields import (check_ellipticity, check_symmetry, constant_field, field_sample_rows,
                          frozen_fundamental_solution, gs_counterexample_field, gs_power_field,
                          holder_field, identity_field, load_field, normalize_at, normalized_harmonic,
                          perturbation_field, validate_field, write_field_samples)
from errors import CertificateError, ConfigError, ContractError, EllipticityError
from modulus import power_modulus


def test_identity_field_validates():
    f = validate_field(identity_field(3))
    assert f.lambda_bounds == (1.0, 1.0)
    np.testing.assert_array_equal(f.at([0.1, 0.2, 0.3]), np.eye(3))


def test_constant_field_eigen_bounds():
    f = constant_field(np.diag([4.0, 1.0, 2.0]))
    assert f.lambda_bounds == pytest.approx((1.0, 4.0))


def test_indefinite_matrix_is_rejected(rng):
    f = constant_field(np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(EllipticityError) as info:
        check_ellipticity(f, rng)
    assert 'point' in info.value.payload


def test_asymmetric_matrix_is_rejected():
    f = constant_field([[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    with pytest.raises(EllipticityError):
        check_symmetry(f, np.zeros((2, 3)))


def test_holder_field_passes_its_certificate(rng):
    f = validate_field(holder_field(lam=0.5, amplitude=0.1, domain_radius=0.5), rng)
    low, high = f.lambda_bounds
    assert low == pytest.approx(1.0)
    assert 1.0 < high <= 1.0 + 0.1 * math.sqrt(0.5) + 1e-12


def test_understated_modulus_fails_the_certificate(rng):
    f = holder_field(lam=0.5, amplitude=0.1, domain_radius=0.5)
    f.modulus = power_modulus(0.5, 1e-4)
    with pytest.raises(CertificateError):
        validate_field(f, rng)


def test_gs_field_trace_identity(rng):
    f = gs_power_field(c=1.0, lam=0.5)
    points = rng.uniform(-0.5, 0.5, size=(50, 3))
    assert f.trace_identity_residual(points) < 1e-12
    np.testing.assert_allclose(f.at([0.0, 0.0, 0.0]), np.eye(3))


def test_gs_power_field_validates(rng):
    f = validate_field(gs_power_field(c=1.0, lam=0.5), rng)
    assert f.radial
    assert f.lambda_bounds[1] <= 2.0 + 1e-12


def test_counterexample_field_is_confined_to_small_balls():
    with pytest.raises(ConfigError):
        gs_counterexample_field(3, -1.0, domain_radius=0.5)
    with pytest.raises(ConfigError):
        gs_counterexample_field(3, 0.5)
    f = gs_counterexample_field(3, -1.0)
    assert f.domain_radius == pytest.approx(math.exp(-2.0))


def test_normalize_at_freezes_the_pole(diag_field):
    normalized, frame = normalize_at(diag_field, [0.1, 0.0, 0.0])
    np.testing.assert_allclose(normalized.at(np.zeros(3)), np.eye(3), atol=1e-14)
    assert frame.det == pytest.approx(4.0)
    assert normalized.domain_radius == pytest.approx(0.9 / 2.0)
    x = np.array([[0.2, 0.1, -0.3], [0.0, 0.4, 0.1]])
    np.testing.assert_allclose(frame.from_normalized(frame.to_normalized(x)), x, atol=1e-14)


def test_normalize_at_keeps_identity_frames():
    f = identity_field(3)
    normalized, frame = normalize_at(f, np.zeros(3))
    assert normalized is f
    assert frame.is_identity


def test_normalize_at_rejects_pole_outside_ball():
    with pytest.raises(ContractError):
        normalize_at(identity_field(3, 0.5), [0.6, 0.0, 0.0])


def test_frozen_fundamental_solution_is_annihilated(rng):
    A = np.array([[4.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 2.0]])
    d = rng.standard_normal((20, 3))
    value, grad, hess = frozen_fundamental_solution(A, d)
    np.testing.assert_allclose(np.einsum('ij,kij->k', A, hess), 0.0, atol=1e-9 * np.max(np.abs(hess)))
    h = 1e-6
    for i in range(3):
        step = np.zeros(3)
        step[i] = h
        fd = (frozen_fundamental_solution(A, d + step)[0] - frozen_fundamental_solution(A, d - step)[0]) / (2 * h)
        np.testing.assert_allclose(grad[:, i], fd, rtol=1e-5, atol=1e-9)


def test_frozen_fundamental_solution_of_laplacian():
    value, _, _ = frozen_fundamental_solution(np.eye(3), np.array([[0.5, 0.0, 0.0]]))
    assert value[0] == pytest.approx(1.0 / (sphere_area(3) * 0.5))


def test_normalized_harmonic_equals_one_at_the_axis():
    for l in range(5):
        assert normalized_harmonic(l, 3)(1.0) == pytest.approx(1.0)
    # Legendre P2
    assert normalized_harmonic(2, 3)(0.0) == pytest.approx(-0.5)


def test_load_field_builds_registered_families(rng):
    f = load_field({'field': {'family': 'constant', 'dimension': '3', 'diag': '4, 1, 1'}}, rng)
    np.testing.assert_allclose(f.at([0.0, 0.0, 0.0]), np.diag([4.0, 1.0, 1.0]))

    g = load_field({'field': {'family': 'gs', 'g': 'counterexample', 'sign': '-1',
                              'domain_radius': repr(math.exp(-2.0))}}, rng)
    assert g.params['profile'] == 'counterexample'

    h = load_field({'field': {'family': 'gs', 'g': 'r**(1/2)', 'domain_radius': '1'},
                    'modulus': {'family': 'power', 'lam': '0.5', 'amplitude': '3'}}, rng)
    np.testing.assert_allclose(h.radial_profile(np.array([0.25])), [0.5])


@pytest.mark.parametrize("sections", [
    {},
    {'field': {'family': 'nonsense'}},
    {'field': {'family': 'identity', 'colour': 'blue'}},
    {'field': {'family': 'identity', 'dimension': '2'}},
    {'field': {'family': 'constant'}},
    {'field': {'family': 'gs', 'g': 'r**(1/2)'}},
    {'field': {'family': 'identity'}, 'modulus': {'family': 'wavy'}},
])
def test_load_field_rejects_malformed_sections(sections, rng):
    with pytest.raises(ConfigError):
        load_field(sections, rng)


def test_field_samples_are_written_with_provenance(tmp_path):
    f = constant_field(np.diag([2.0, 1.0, 1.0]))
    header, rows = field_sample_rows(f, np.zeros((2, 3)))
    assert len(header) == 3 + 9
    assert rows[0][3] == 2.0
    path = tmp_path / 'samples.csv'
    write_field_samples(f, np.zeros((2, 3)), str(path), provenance='{"family": "constant"}')
    lines = path.read_text().splitlines()
    assert lines[0].startswith('# ')
    assert lines[1].startswith('x1,x2,x3,a11')
    assert len(lines) == 4


def test_perturbation_field_passes_its_certificate(rng):
    f = validate_field(perturbation_field(degree=1, amplitude=0.1, domain_radius=0.5), rng)
    low, high = f.lambda_bounds
    spread = 0.1 * math.sqrt(0.5) + 1e-12
    assert 1.0 - spread <= low <= 1.0 <= high <= 1.0 + spread
    assert not f.radial
    np.testing.assert_array_equal(f.at([0.0, 0.0, 0.0]), np.eye(3))


def test_perturbation_field_follows_the_zonal_harmonic():
    f = perturbation_field(degree=2, amplitude=0.05, lam=0.5)
    # P2(1) = 1 on the axis and P2(0) = -1/2 on the equator
    np.testing.assert_allclose(f.at([0.0, 0.0, 0.25])[0, 0], 1.0 + 0.05 * 0.5)
    np.testing.assert_allclose(f.at([0.25, 0.0, 0.0])[0, 0], 1.0 - 0.05 * 0.5 * 0.5)
    np.testing.assert_allclose(f.at([0.25, 0.0, 0.0])[1:, 1:], np.eye(2))
    # Lipschitz constant 3 of P2 enters the declared modulus
    assert f.modulus.params['amplitude'] == pytest.approx(0.05 * 7.0)


def test_perturbation_field_needs_a_positive_degree():
    with pytest.raises(ConfigError):
        perturbation_field(degree=0)


def test_load_field_builds_perturbations(rng):
    f = load_field({'field': {'family': 'perturbation', 'degree': '1', 'amplitude': '0.02',
                              'domain_radius': '0.5', 'axis': '0, 0, 2'}}, rng)
    assert f.params['axis'] == [0.0, 0.0, 1.0]
    assert f.modulus.params['lam'] == pytest.approx(0.5)
