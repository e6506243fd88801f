import logging
from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .timeseries import TimeSeries

logger = logging.getLogger(__name__)

# byte-stable SVG: fixed id salt, no date
matplotlib.rcParams["svg.hashsalt"] = "paleorecon"
SVG_METADATA = {"Date": None}
MAX_PANEL_COLUMNS = 6


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    logger.debug(f"Saved figure {path}")
    return path


def plot_reconstruction(
    reconstruction,
    path,
    truth: Optional[TimeSeries] = None,
    observed: Optional[TimeSeries] = None,
    title: str = "",
) -> Path:
    """Posterior mean with the 95% band, plus truth/observations when given."""
    fig = Figure(figsize=(10, 4))
    ax = fig.add_subplot(1, 1, 1)
    years = reconstruction.years
    lower, upper = reconstruction.interval(0.95)
    ax.fill_between(years, lower, upper, color="tab:blue", alpha=0.25, linewidth=0, label="95% band")
    ax.plot(years, reconstruction.mean, color="tab:blue", linewidth=0.8, label="posterior mean")
    if truth is not None:
        ax.plot(truth.years, truth.values, color="black", linewidth=0.5, label="truth")
    if observed is not None:
        ax.plot(observed.years, observed.values, color="tab:red", linewidth=0.6, label="observed")
    ax.set_xlabel("year")
    ax.set_ylabel("temperature anomaly")
    ax.set_title(title)
    ax.legend(loc="upper left", fontsize="small")
    return _save(fig, path)


def plot_coefficients(
    marginals: Sequence,
    path,
    samples: Optional[Mapping[str, np.ndarray]] = None,
    n_grid: int = 200,
) -> Path:
    """
    One panel per coefficient with the mixture density, wrapped into rows of
    at most MAX_PANEL_COLUMNS; optional MCMC draws are overlaid as a
    normalized histogram.
    """
    n = max(len(marginals), 1)
    columns = min(n, MAX_PANEL_COLUMNS)
    rows = -(-n // columns)
    fig = Figure(figsize=(3.2 * columns, 3 * rows))
    for i, m in enumerate(marginals):
        ax = fig.add_subplot(rows, columns, i + 1)
        grid = m.grid(n_grid)
        ax.plot(grid, m.density(grid), color="tab:blue", label="nested Laplace")
        if samples is not None and m.name in samples:
            ax.hist(samples[m.name], bins=40, density=True, color="tab:orange", alpha=0.4, label="Gibbs")
        ax.axvline(0.0, color="grey", linewidth=0.5)
        ax.set_title(m.name)
        if i == 0:
            ax.legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)
