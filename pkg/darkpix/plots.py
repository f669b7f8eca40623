"""
Diagnostic plots: probability plots for PPCC reports and training loss curves.
"""

import logging
from pathlib import Path
from typing import Sequence, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)


def plot_probability_plot(samples, path: Union[str, Path], title: str = "Normal probability plot"):
    """Sorted samples against normal quantiles at Blom positions, with a least-squares line."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    q = stats.norm.ppf((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    slope, intercept = np.polyfit(q, x, 1)
    r = np.corrcoef(q, x)[0, 1]

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(q, x, '.', markersize=3, label="samples")
    ax.plot(q, slope * q + intercept, '-', label=f"fit (R$^2$ = {r * r:.4f})")
    ax.set_xlabel("Theoretical quantile")
    ax.set_ylabel("Sample value (DN)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.debug(f"Wrote probability plot {path}")


def plot_loss_curve(losses: Sequence[float], path: Union[str, Path]):
    """Training loss per step."""
    fig, ax = plt.subplots(figsize=(8, 5))
    ax.plot(np.arange(1, len(losses) + 1), losses)
    ax.set_xlabel("Step")
    ax.set_ylabel("L1 loss")
    ax.set_title("Loss vs step")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.debug(f"Wrote loss curve {path}")
