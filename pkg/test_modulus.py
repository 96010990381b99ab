import math

import numpy as np
import pytest

from errors import ClassificationError, ContractError
from modulus import (DINI, NEITHER, SQUARE_DINI_ONLY, _log_integral, check_modulus, classify_dini,
                     classify_tail, dini_tail, expression_modulus, log_modulus, loglog_modulus,
                     power_modulus, sigma, smallness_bound, tabulated_modulus, zero_modulus)


def test_power_modulus_closed_forms():
    m = power_modulus(0.5, 2.0)
    assert m(0.25) == pytest.approx(1.0)
    assert sigma(m, 0.25) == pytest.approx(4.0 * 0.25 / 1.0)
    assert dini_tail(m, 0.25) == pytest.approx(2.0 * 0.5 / 0.5)
    assert m.kappa == pytest.approx(0.5)
    assert m.is_dini and m.is_square_dini


@pytest.mark.parametrize("lam", [0.0, 1.0, 1.5])
def test_power_modulus_rejects_exponents_outside_unit_interval(lam):
    with pytest.raises(ContractError):
        power_modulus(lam)


@pytest.mark.parametrize("m", [power_modulus(0.5), power_modulus(0.2, 3.0), log_modulus(1.0),
                               log_modulus(0.75, 0.5), loglog_modulus(1.0)])
def test_registered_families_are_kappa_monotone_and_doubling(m):
    check = check_modulus(m)
    assert check.ok, check.first_violation


def test_check_modulus_reports_first_violation():
    m = tabulated_modulus([1e-3, 1e-2, 1e-1, 0.5], [0.0, 0.5, 0.5, 0.5], kappa=0.5)
    check = check_modulus(m)
    assert not check.ok
    assert check.first_violation is not None


def test_tabulated_modulus_sigma_matches_power_law():
    t = np.logspace(-6, 0, 121)
    m = tabulated_modulus(t, np.sqrt(t), kappa=0.5)
    assert m.sigma_closed is None
    assert sigma(m, 0.25) == pytest.approx(0.25, rel=1e-3)


def test_tabulated_modulus_needs_monotone_samples():
    with pytest.raises(ContractError):
        tabulated_modulus([1e-3, 1e-2], [0.2, 0.1], kappa=0.5)


def test_classification_of_log_moduli():
    assert classify_dini(power_modulus(0.5)).label == DINI
    assert classify_dini(log_modulus(1.0)).label == SQUARE_DINI_ONLY
    assert classify_dini(log_modulus(0.4)).label == NEITHER


def test_sigma_of_non_square_dini_modulus_raises():
    m = log_modulus(0.4)
    assert not m.is_square_dini
    with pytest.raises(ClassificationError):
        sigma(m, 0.1)


def test_log_modulus_sigma_closed_form_agrees_with_quadrature():
    m = log_modulus(1.0, 2.0)
    raw = _log_integral(lambda t: m(t) ** 2, 0.1)
    assert sigma(m, 0.1) == pytest.approx(raw, rel=1e-7)
    assert sigma(m, 0.1) == pytest.approx(4.0 / math.log(10.0 * math.e))


def test_sigma_rejects_nonpositive_radius():
    with pytest.raises(ContractError):
        sigma(power_modulus(0.5), 0.0)


def test_scaled_modulus_rescales_closed_forms():
    m = power_modulus(0.5).scaled(4.0, 2.0)
    assert m(1.0) == pytest.approx(4.0 * math.sqrt(2.0))
    assert sigma(m, 0.5) == pytest.approx(16.0 * 1.0 / 1.0)
    with pytest.raises(ContractError):
        power_modulus(0.5).scaled(-1.0)


def test_zero_modulus_is_trivially_square_dini():
    m = zero_modulus()
    assert m.is_zero and m.is_dini
    assert sigma(m, 0.3) == 0.0
    assert np.all(m(np.array([0.1, 0.2])) == 0.0)


def test_expression_modulus_finds_closed_sigma():
    m = expression_modulus('t**(1/2)', kappa=0.5)
    assert m.sigma_closed is not None
    assert sigma(m, 0.36) == pytest.approx(0.36, rel=1e-10)


def test_expression_modulus_estimates_kappa():
    m = expression_modulus('t**(1/4)')
    assert 0.0 < m.kappa <= 0.25 + 1e-12


def test_smallness_bound_holds_for_power_modulus():
    report = smallness_bound(power_modulus(0.5))
    assert report['holds']
    assert report['c_prime'] == pytest.approx(0.5)
    assert report['omega_bound'] == pytest.approx(math.sqrt(1.0 / 0.5))


def test_classify_tail_geometric_sums_converge():
    cutoffs = list(range(8))
    sums = np.cumsum(0.5 ** np.arange(8))
    cert = classify_tail(cutoffs, sums)
    assert cert.label == 'converges'
    assert cert.extrapolated == pytest.approx(2.0, rel=1e-12)


def test_classify_tail_linear_growth_diverges():
    cert = classify_tail(list(range(8)), np.arange(1.0, 9.0))
    assert cert.label == 'diverges'


def test_classify_tail_floor_absorbs_roundoff_growth():
    sums = 1e-16 * np.arange(1.0, 9.0)
    assert classify_tail(list(range(8)), sums).label == 'diverges'
    assert classify_tail(list(range(8)), sums, floor=1e-12).label == 'converges'
