import logging
import os
from typing import Any, Dict, Optional, Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

logger = logging.getLogger(__name__)


class RunVisualizer:
    """Static PNG plots of profiles and rate fits, written next to the CSV artifacts"""

    def __init__(self, output_folder: str):
        self.output_folder = output_folder
        self.fig_size = (12, 8)
        self.dpi = 100
        os.makedirs(output_folder, exist_ok=True)

    def _save(self, fig, name: str) -> str:
        path = os.path.join(self.output_folder, name)
        fig.savefig(path, format='png', dpi=self.dpi, bbox_inches='tight')
        plt.close(fig)
        logger.info("Wrote plot %s", path)
        return path

    def plot_profile(self, profile, radial=None, name: str = 'profile.png') -> str:
        """I(r), E_+(r) and, when a singular profile is given, h r^{n-2}"""
        panels = 3 if radial is not None else 2
        fig, axes = plt.subplots(1, panels, figsize=self.fig_size, dpi=self.dpi)
        r = profile.points

        axes[0].semilogx(r, profile.I, color='tab:blue')
        axes[0].set_xlabel('r')
        axes[0].set_title('I(r)')
        axes[0].grid(True, alpha=0.3)

        axes[1].loglog(r, profile.Eplus, color='tab:green', label='E+')
        axes[1].loglog(r, profile.Eminus, color='tab:red', label='E-')
        axes[1].set_xlabel('r')
        axes[1].legend()
        axes[1].grid(True, alpha=0.3)

        if radial is not None:
            n = radial.dimension
            axes[2].semilogx(radial.grid.points, radial.h * radial.grid.points ** (n - 2), color='tab:purple')
            axes[2].set_xlabel('r')
            axes[2].set_title('h(r) r^(n-2)')
            axes[2].grid(True, alpha=0.3)
        return self._save(fig, name)

    def plot_rate_fit(self, radii: Sequence[float], values: Sequence[float],
                      rate: Optional[Sequence[float]] = None, constant: float = None,
                      title: str = '', name: str = 'rate_fit.png') -> str:
        """log-log plot of a measured quantity against c * rate(r)"""
        fig, ax = plt.subplots(figsize=self.fig_size, dpi=self.dpi)
        radii = np.asarray(radii, dtype=float)
        values = np.asarray(values, dtype=float)
        positive = values > 0
        ax.loglog(radii[positive], values[positive], 'o-', color='tab:blue', label='measured')
        if rate is not None and constant:
            bound = constant * np.asarray(rate, dtype=float)
            ax.loglog(radii[bound > 0], bound[bound > 0], '--', color='tab:orange', label='c * rate')
        ax.set_xlabel('r')
        ax.set_title(title)
        ax.legend()
        ax.grid(True, which='both', alpha=0.3)
        return self._save(fig, name)

    def plot_pairings(self, summary: Dict[str, Any], eps: Sequence[float], values: Sequence[float],
                      name: str = 'pairings.png') -> str:
        fig, ax = plt.subplots(figsize=self.fig_size, dpi=self.dpi)
        ax.semilogx(eps, values, 'o-', color='tab:blue', label='P(eps)')
        ax.axhline(y=summary['C_y'] / np.sqrt(summary['det_A_y']), color='tab:green', linestyle='--',
                   label='extrapolated')
        if summary['theoretical']:
            ax.axhline(y=summary['theoretical'] / np.sqrt(summary['det_A_y']), color='k', linestyle=':',
                       label='theoretical')
        ax.set_xlabel('eps')
        ax.set_title(f"delta constant ({summary['case']})")
        ax.legend()
        ax.grid(True, alpha=0.3)
        return self._save(fig, name)
