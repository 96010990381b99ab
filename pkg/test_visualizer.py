import math

import numpy as np

from visualizer import RunVisualizer


def test_profile_plot(tmp_path, gs_sqrt_profile):
    path = RunVisualizer(str(tmp_path)).plot_profile(gs_sqrt_profile)
    assert path.endswith('profile.png')
    assert (tmp_path / 'profile.png').stat().st_size > 0


def test_rate_fit_skips_nonpositive_values(tmp_path):
    radii = np.logspace(-6, -1, 6)
    values = np.sqrt(radii)
    values[0] = 0.0
    path = RunVisualizer(str(tmp_path)).plot_rate_fit(radii, values, rate=np.sqrt(radii), constant=2.0,
                                                      title='xi / omega', name='xi.png')
    assert (tmp_path / 'xi.png').exists() and path.endswith('xi.png')


def test_pairing_plot(tmp_path):
    summary = {'C_y': 4 * math.pi, 'det_A_y': 1.0, 'theoretical': 4 * math.pi, 'case': 'FiniteLimit(0)'}
    eps = [0.5 * 2.0 ** -k for k in range(5)]
    RunVisualizer(str(tmp_path / 'plots')).plot_pairings(summary, eps, [4 * math.pi] * 5)
    assert (tmp_path / 'plots' / 'pairings.png').exists()
