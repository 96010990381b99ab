import math

import numpy as np
import pytest

from annulus_means import RadialGrid
from errors import ContractError, IntegrabilityError
from potential_kernel import (HarmonicModeField, HarmonicProjector, KernelTable, ModeExpansion,
                              apply_K_mode, free_space_mode, harmonic_dimension, inward_trend,
                              mode_fd_residual, three_piece_mode, verify_prop1)


def _inverse_sqrt_mode(grid, angular=None):
    return HarmonicModeField(degree=1, grid=grid, values=grid.points ** -0.5,
                             profile=lambda r: np.asarray(r) ** -0.5, exponent_at_zero=-0.5,
                             angular=angular)


def _closed_form(r):
    # n = 3, l = 1, f = r^{-1/2} on (0, 1):
    # v = -(r^{-2} r^{3.5} / 3.5 + r * 2 (1 - r^{1/2})) / 3
    return -(r ** 1.5 / 3.5 + 2.0 * r * (1.0 - np.sqrt(r))) / 3.0


@pytest.fixture(scope='module')
def unit_grid():
    return RadialGrid(1e-6, 1.0, 12)


def test_harmonic_dimensions():
    assert [harmonic_dimension(l, 3) for l in range(4)] == [1, 3, 5, 7]
    assert [harmonic_dimension(l, 4) for l in range(4)] == [1, 4, 9, 16]


def test_degree_one_mode_matches_closed_form(unit_grid):
    v = apply_K_mode(_inverse_sqrt_mode(unit_grid), 3)
    np.testing.assert_allclose(v.values, _closed_form(unit_grid.points), rtol=1e-9)
    assert v.exponent_at_zero == pytest.approx(1.0)


def test_three_piece_assembly_agrees_with_closed_form():
    for r in (1e-3, 0.05, 0.2, 0.7):
        value = three_piece_mode(lambda s: s ** -0.5, 1, 3, r, (0.0, 1.0))
        assert value == pytest.approx(_closed_form(r), rel=1e-9)


def test_mode_solution_satisfies_the_radial_operator(unit_grid):
    source = _inverse_sqrt_mode(unit_grid)
    assert mode_fd_residual(apply_K_mode(source, 3), source, 3) < 1e-3


def test_radial_mode_is_allowed_only_in_free_space(unit_grid):
    source = HarmonicModeField(degree=0, grid=unit_grid, values=np.ones(unit_grid.size),
                               profile=lambda r: np.ones_like(np.asarray(r)))
    with pytest.raises(ContractError):
        apply_K_mode(source, 3)
    v = free_space_mode(source, 3)
    # f = 1 on the unit ball: v = (r^2 - 3) / 6
    np.testing.assert_allclose(v.values, (unit_grid.points ** 2 - 3.0) / 6.0, rtol=1e-9)


def test_non_integrable_sources_are_rejected(unit_grid):
    steep = HarmonicModeField(degree=1, grid=unit_grid, values=unit_grid.points ** -4.5,
                              exponent_at_zero=-4.5)
    with pytest.raises(IntegrabilityError):
        apply_K_mode(steep, 3)
    flat = HarmonicModeField(degree=1, grid=unit_grid, values=np.ones(unit_grid.size),
                             exponent_at_infinity=0.0)
    with pytest.raises(IntegrabilityError):
        apply_K_mode(flat, 3)


def test_projector_needs_an_exact_sphere_rule(sphere):
    with pytest.raises(ContractError):
        HarmonicProjector(sphere, max_degree=7)


def test_projector_separates_degrees(sphere):
    projector = HarmonicProjector(sphere, max_degree=4)
    x = sphere.nodes
    values = 2.0 + x[:, 0] + (x[:, 1] ** 2 - x[:, 2] ** 2)
    parts = projector.decompose(values)
    np.testing.assert_allclose(parts[0], 2.0, atol=1e-12)
    np.testing.assert_allclose(parts[1], x[:, 0], atol=1e-12)
    np.testing.assert_allclose(parts[2], x[:, 1] ** 2 - x[:, 2] ** 2, atol=1e-12)
    np.testing.assert_allclose(parts[3], 0.0, atol=1e-12)


def test_kernel_table_is_the_newtonian_potential(rng):
    table = KernelTable(3)
    assert table.value(np.array([[1.0, 0.0, 0.0]]))[0] == pytest.approx(-1.0 / (4.0 * math.pi))
    x = rng.uniform(0.3, 0.8, size=(5, 3))
    np.testing.assert_allclose(table.fd_laplacian(x), 0.0, atol=1e-4)
    np.testing.assert_allclose(np.trace(table.hessian(x), axis1=1, axis2=2), 0.0, atol=1e-12)


def test_mode_expansion_reproduces_the_jet(unit_grid, sphere):
    source = _inverse_sqrt_mode(unit_grid, angular=sphere.nodes[:, 0])
    v = apply_K_mode(source, 3)
    expansion = ModeExpansion.from_fields([v], sphere, inner='regular', outer='decay')
    r = unit_grid.points[40]
    theta = np.array([0.6, 0.0, 0.8])
    value, grad, hess = expansion.evaluate(r * theta[None, :])
    assert value[0] == pytest.approx(_closed_form(r) * theta[0], rel=1e-7)
    # Delta (v(r) theta_1) = f(r) theta_1
    assert np.trace(hess[0]) == pytest.approx(r ** -0.5 * theta[0], rel=1e-7)
    assert grad.shape == (1, 3)


def test_nodal_evaluation_matches_pointwise(unit_grid, sphere):
    v = apply_K_mode(_inverse_sqrt_mode(unit_grid, angular=sphere.nodes[:, 0]), 3)
    expansion = ModeExpansion.from_fields([v], sphere, inner='regular', outer='decay')
    radii = unit_grid.points[[10, 50]]
    nodal_v, nodal_g, nodal_h = expansion.evaluate_nodal(radii)
    points = (radii[:, None, None] * sphere.nodes[None, :, :]).reshape(-1, 3)
    value, grad, hess = expansion.evaluate(points)
    np.testing.assert_allclose(nodal_v.ravel(), value, rtol=1e-9, atol=1e-14)
    np.testing.assert_allclose(nodal_h.reshape(-1, 3, 3), hess, rtol=1e-8, atol=1e-10)


def test_potential_estimate_holds_for_a_shell_source(sphere):
    grid = RadialGrid(1e-3, 1.0, 12)
    source = HarmonicModeField(degree=1, grid=grid, values=grid.points ** -0.5,
                               angular=sphere.nodes[:, 0])
    report = verify_prop1([source], 4.0, [0.01, 0.1, 0.5], sphere)
    assert report.passed and not report.vacuous
    assert all(q > 0 for q in report.ratio_local)
    header, rows = report.to_rows()
    assert header[0] == 'r' and len(rows) == 3


def test_zero_source_is_vacuous(sphere):
    grid = RadialGrid(1e-2, 1.0, 12)
    source = HarmonicModeField(degree=2, grid=grid, values=np.zeros(grid.size),
                               angular=sphere.nodes[:, 0] * sphere.nodes[:, 1])
    report = verify_prop1([source], 4.0, [0.1], sphere)
    assert report.vacuous and report.passed
    assert report.constant == 0.0


def test_estimate_takes_supported_mean_free_sources(sphere):
    grid = RadialGrid(1e-2, 1.0, 12)
    radial = HarmonicModeField(degree=0, grid=grid, values=np.ones(grid.size))
    with pytest.raises(ContractError):
        verify_prop1([radial], 4.0, [0.1], sphere)
    continued = HarmonicModeField(degree=1, grid=grid, values=np.ones(grid.size),
                                  exponent_at_zero=0.0, angular=sphere.nodes[:, 0])
    with pytest.raises(ContractError):
        verify_prop1([continued], 4.0, [0.1], sphere)


def test_inward_trend_reads_the_slope_toward_the_pole():
    radii = [1.0, 1e-2, 1e-1, 1e-3]
    assert inward_trend(radii, [1.0, 1e4, 1e2, 1e6]) == pytest.approx(-2.0)
    assert inward_trend(radii, [3.0, 3.0, 3.0, 3.0]) == pytest.approx(0.0, abs=1e-12)
    assert inward_trend(radii, [1.0, 1e-2, 1e-1, 1e-3]) == pytest.approx(1.0)
    assert inward_trend(radii, [0.0, 0.0, np.inf, 2.0]) == 0.0


def test_potential_estimate_is_gated_on_the_ratio_trend(sphere):
    grid = RadialGrid(1e-3, 1.0, 12)
    source = HarmonicModeField(degree=1, grid=grid, values=grid.points ** -0.5,
                               angular=sphere.nodes[:, 0])
    report = verify_prop1([source], 4.0, [0.01, 0.1, 0.5], sphere)
    # the self-similar source keeps the ratios flat toward the pole
    assert abs(report.trend) < 0.5
    assert report.spread >= 1.0
    strict = verify_prop1([source], 4.0, [0.01, 0.1, 0.5], sphere, trend_floor=5.0)
    assert not strict.passed
    assert strict.constant == pytest.approx(report.constant)
