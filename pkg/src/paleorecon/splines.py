import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .const import R2_MIN, SplineSettings
from .exceptions import DegenerateSeriesError
from .timeseries import TimeSeries

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """
    Cubic B-spline basis on an open uniform knot vector.

    Parameters:
        years (np.ndarray): Evaluation grid.
        knots (np.ndarray): Knot sequence with the boundary knots repeated 4 times.
        K (int): Number of basis functions.
        matrix (np.ndarray): (len(years) x K) evaluation matrix B[t, k].
    """

    years: np.ndarray
    knots: np.ndarray
    K: int
    matrix: np.ndarray
    degree: int = SplineSettings.DEGREE

    def column_names(self, prefix: str = "beta") -> list:
        return [f"{prefix}{k}" for k in range(1, self.K + 1)]


def uniform_knots(lower: float, upper: float, K: int, degree: int = SplineSettings.DEGREE) -> np.ndarray:
    order = degree + 1
    interior = np.linspace(lower, upper, K - degree + 1)[1:-1]
    return np.concatenate([np.full(order, lower), interior, np.full(order, upper)])


def cox_de_boor(x, knots, degree: int) -> np.ndarray:
    """
    Evaluates every B-spline of the given degree on `knots` at `x` with the
    Cox-de Boor recursion. The right boundary point belongs to the last
    non-degenerate span so the rows keep summing to one there.
    """
    x = np.asarray(x, dtype=float)
    knots = np.asarray(knots, dtype=float)
    n_spans = knots.size - 1

    basis = np.zeros((x.size, n_spans))
    for i in range(n_spans):
        if knots[i] < knots[i + 1]:
            basis[:, i] = (knots[i] <= x) & (x < knots[i + 1])
    last = np.flatnonzero(knots[:-1] < knots[1:])[-1]
    basis[x == knots[-1], last] = 1.0

    for p in range(1, degree + 1):
        nxt = np.zeros((x.size, n_spans - p))
        for i in range(n_spans - p):
            left_den = knots[i + p] - knots[i]
            right_den = knots[i + p + 1] - knots[i + 1]
            if left_den > 0:
                nxt[:, i] += (x - knots[i]) / left_den * basis[:, i]
            if right_den > 0:
                nxt[:, i] += (knots[i + p + 1] - x) / right_den * basis[:, i + 1]
        basis = nxt
    return basis


def bspline_basis(years, K: int) -> SplineBasis:
    """
    Cubic B-spline basis with K functions on uniform knots spanning `years`.

    Raises:
        ValueError: K < 4 or fewer grid points than bases.
    """
    years = np.asarray(years, dtype=float)
    if K < SplineSettings.MIN_BASES:
        raise ValueError(f"A cubic basis needs K >= 4, got {K}")
    if years.size < K:
        raise ValueError(f"Grid of {years.size} points cannot support {K} bases")
    knots = uniform_knots(years.min(), years.max(), K)
    matrix = cox_de_boor(years, knots, SplineSettings.DEGREE)
    return SplineBasis(years=years, knots=knots, K=int(K), matrix=matrix)


def adjusted_r2(y, fitted, n_predictors: int) -> float:
    y = np.asarray(y, dtype=float)
    n = y.size
    sst = np.sum((y - y.mean()) ** 2)
    if sst == 0 or n - n_predictors - 1 <= 0:
        return float("nan")
    r2 = 1.0 - np.sum((y - fitted) ** 2) / sst
    return float(1.0 - (1.0 - r2) * (n - 1) / (n - n_predictors - 1))


@dataclass(frozen=True)
class SplineSelection:
    k_calibration: int
    k_full: int
    adjusted_r2: float
    flagged: bool


def select_k(
    calibration_temps: TimeSeries,
    r2_min: float = R2_MIN,
    full_interval_years: int = 2000,
) -> SplineSelection:
    """
    Smallest K whose basis regression explains the calibration temperatures
    with adjusted R^2 >= r2_min, then scaled to the full interval at constant
    knot density.

    Parameters:
        calibration_temps (TimeSeries): Calibration anomalies, no missing values.
        r2_min (float): Adjusted R^2 threshold.
        full_interval_years (int): Length of the reconstruction interval.

    Returns:
        SplineSelection: k_calibration, K_full, the adjusted R^2 reached, and a
        flag set when the threshold was never reached (fallback at the maximum).
    """
    y = calibration_temps.values
    if np.isnan(y).any():
        raise DegenerateSeriesError("Calibration series must not contain missing values")
    n = y.size
    years = calibration_temps.years

    def scaled(k: int) -> int:
        span = max(n - 1, 1)
        return int(round(k * (full_interval_years - 1) / span))

    if np.ptp(y) == 0:
        logger.warning("Constant calibration temperatures; using the minimum basis size")
        k = int(SplineSettings.MIN_BASES)
        return SplineSelection(k, scaled(k), float("nan"), True)

    best_k, best_r2 = int(SplineSettings.MIN_BASES), -np.inf
    for k in range(SplineSettings.MIN_BASES, max(n // 2, SplineSettings.MIN_BASES) + 1):
        if k > n:
            break
        B = bspline_basis(years, k).matrix
        coef, *_ = np.linalg.lstsq(B, y, rcond=None)
        # the basis spans the constant, so K - 1 predictors beyond the intercept
        r2 = adjusted_r2(y, B @ coef, k - 1)
        if np.isnan(r2):
            continue
        if r2 >= r2_min:
            return SplineSelection(k, scaled(k), r2, False)
        if r2 > best_r2:
            best_k, best_r2 = k, r2

    logger.warning(f"Adjusted R^2 never reached {r2_min}; falling back to K={best_k} ({best_r2:.3f})")
    return SplineSelection(best_k, scaled(best_k), float(best_r2), True)
