import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import signal, stats

from .const import FilterSettings, YearBounds
from .exceptions import ScoringError
from .inla import Reconstruction
from .timeseries import TimeSeries

logger = logging.getLogger(__name__)

Window = Tuple[int, int]

SCORE_COLUMNS = ["model", "n_nests", "method", "is80", "is95", "crps", "mse", "mse_smoothed"]


def interval_score(lower, upper, y, alpha: float) -> float:
    """
    Interval score of the central (1 - alpha) interval, averaged over the
    elements. An observation on a bound counts as covered.

    Raises:
        ScoringError: alpha outside (0, 1) or a lower bound above its upper bound.
    """
    if not 0.0 < alpha < 1.0:
        raise ScoringError(f"alpha must lie in (0, 1), got {alpha}")
    lower, upper, y = (np.asarray(a, dtype=float) for a in (lower, upper, y))
    if np.any(lower > upper):
        logger.error("Interval score with lower > upper")
        raise ScoringError("Lower bound exceeds upper bound")
    score = (
        (upper - lower)
        + (2.0 / alpha) * (lower - y) * (y < lower)
        + (2.0 / alpha) * (y - upper) * (y > upper)
    )
    return float(np.mean(score))


def crps_gaussian(mu, sigma, y):
    """
    Closed-form CRPS of N(mu, sigma^2) at y, elementwise. sigma = 0 gives |y - mu|.

    Raises:
        ScoringError: negative sigma.
    """
    mu, sigma, y = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mu, sigma, y)))
    if np.any(sigma < 0):
        raise ScoringError("sigma must be >= 0")
    point = sigma == 0
    safe = np.where(point, 1.0, sigma)
    z = (y - mu) / safe
    value = safe * (z * (2.0 * stats.norm.cdf(z) - 1.0) + 2.0 * stats.norm.pdf(z) - 1.0 / math.sqrt(math.pi))
    value = np.where(point, np.abs(y - mu), value)
    return float(value) if value.ndim == 0 else value


def crps_samples(draws, y) -> float:
    """
    Sample CRPS mean|x - y| - mean|x - x'| / 2, evaluated on the sorted draws.

    Raises:
        ScoringError: fewer than 2 draws.
    """
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    n = x.size
    if n < 2:
        raise ScoringError(f"Sample CRPS needs at least 2 draws, got {n}")
    weights = 2.0 * np.arange(1, n + 1) - n - 1
    return float(np.mean(np.abs(x - y)) - weights @ x / n**2)


def crps_ensemble(draws, observations) -> float:
    """Mean over columns of the sample CRPS; draws is (n_draws x n_years)."""
    x = np.sort(np.asarray(draws, dtype=float), axis=0)
    obs = np.asarray(observations, dtype=float)
    n = x.shape[0]
    if n < 2:
        raise ScoringError(f"Sample CRPS needs at least 2 draws, got {n}")
    if x.shape[1] != obs.size:
        raise ScoringError(f"{x.shape[1]} draw columns for {obs.size} observations")
    weights = 2.0 * np.arange(1, n + 1) - n - 1
    per_year = np.mean(np.abs(x - obs[None, :]), axis=0) - weights @ x / n**2
    return float(np.mean(per_year))


def mse(estimate, observed) -> float:
    estimate, observed = np.asarray(estimate, dtype=float), np.asarray(observed, dtype=float)
    return float(np.mean((estimate - observed) ** 2))


def butterworth_lowpass(
    series: TimeSeries,
    cutoff_period: float = FilterSettings.CUTOFF_PERIOD,
    order: int = FilterSettings.ORDER,
) -> TimeSeries:
    """
    Zero-phase Butterworth low-pass of an annual series: forward-backward
    second-order sections with even (reflective) padding of 3 * order samples.

    Raises:
        ScoringError: missing values, or length <= 6 * order.
    """
    values = series.values
    if np.isnan(values).any():
        raise ScoringError(f"Series '{series.name}' has missing values; cannot filter")
    if values.size <= 6 * order:
        logger.error(f"Series of length {values.size} too short for order {order}")
        raise ScoringError(f"Series length {values.size} must exceed {6 * order}")
    if cutoff_period <= 2:
        raise ScoringError(f"Cutoff period must exceed the Nyquist period of 2 years, got {cutoff_period}")
    sos = signal.butter(order, 2.0 / cutoff_period, btype="lowpass", output="sos")
    filtered = signal.sosfiltfilt(sos, values, padtype="even", padlen=3 * order)
    return series.with_values(filtered)


@dataclass(frozen=True)
class ScoreReport:
    model: str
    n_nests: int
    method: str
    window: Window
    is80: float
    is95: float
    crps: float
    mse: float
    mse_smoothed: Optional[float] = None
    smoothed_window: Optional[Window] = None

    def to_row(self) -> dict:
        row = asdict(self)
        return {k: row[k] for k in SCORE_COLUMNS}


def _overlaps(a: Window, b: Window) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def validation_suite(
    reconstruction: Reconstruction,
    observed: TimeSeries,
    window: Window = (YearBounds.VALIDATION_START, YearBounds.VALIDATION_END),
    training_window: Window = (YearBounds.CALIBRATION_START, YearBounds.CALIBRATION_END),
    draws=None,
    smoothed_reference: Optional[TimeSeries] = None,
    model: str = "",
    n_nests: int = 0,
    method: str = "",
    cutoff_period: float = FilterSettings.CUTOFF_PERIOD,
    filter_order: int = FilterSettings.ORDER,
) -> ScoreReport:
    """
    Out-of-sample scores over `window`.

    IS80/IS95 come from the 80%/95% bands, CRPS from posterior draws when
    given (n_draws x years of `window`) and from the Gaussian closed form
    with the marginal mean/sd otherwise, MSE from the posterior mean. With a
    smoothed reference the low-passed mean is also scored over the
    reference's span.

    Raises:
        ScoringError: the window overlaps the training window or is not covered.
    """
    start, end = int(window[0]), int(window[1])
    if _overlaps((start, end), training_window):
        logger.error(f"Validation window {window} overlaps training window {training_window}")
        raise ScoringError(
            f"Refusing to score: validation window [{start}, {end}] overlaps the training window "
            f"[{training_window[0]}, {training_window[1]}]"
        )
    years = reconstruction.years
    if start < years[0] or end > years[-1]:
        raise ScoringError(f"Reconstruction [{years[0]}, {years[-1]}] does not cover [{start}, {end}]")

    rows = np.flatnonzero((years >= start) & (years <= end))
    y = observed.window(start, end)
    ok = ~np.isnan(y)
    if not ok.any():
        raise ScoringError(f"No observations in [{start}, {end}]")
    rows, y = rows[ok], y[ok]
    if draws is not None:
        draws = np.asarray(draws, dtype=float)
        if draws.shape[1] != ok.size:
            raise ScoringError(f"Draws cover {draws.shape[1]} years, window has {ok.size}")
        draws = draws[:, ok]

    lo80, hi80 = (b[rows] for b in reconstruction.interval(0.80))
    lo95, hi95 = (b[rows] for b in reconstruction.interval(0.95))
    if draws is not None:
        crps = crps_ensemble(draws, y)
    else:
        crps = float(np.mean(crps_gaussian(reconstruction.mean[rows], reconstruction.sd[rows], y)))

    mse_smoothed, smoothed_window = None, None
    if smoothed_reference is not None:
        smooth = butterworth_lowpass(
            TimeSeries(int(years[0]), reconstruction.mean, "mean"), cutoff_period, filter_order
        )
        s0 = max(smoothed_reference.start_year, int(years[0]))
        s1 = min(smoothed_reference.end_year, int(years[-1]))
        ref = smoothed_reference.window(s0, s1)
        est = smooth.window(s0, s1)
        keep = ~np.isnan(ref)
        mse_smoothed = mse(est[keep], ref[keep])
        smoothed_window = (s0, s1)

    report = ScoreReport(
        model=model,
        n_nests=int(n_nests),
        method=method,
        window=(start, end),
        is80=interval_score(lo80, hi80, y, 0.20),
        is95=interval_score(lo95, hi95, y, 0.05),
        crps=crps,
        mse=mse(reconstruction.mean[rows], y),
        mse_smoothed=mse_smoothed,
        smoothed_window=smoothed_window,
    )
    logger.info(
        f"{model} N={n_nests} {method}: IS80={report.is80:.4f} IS95={report.is95:.4f} "
        f"CRPS={report.crps:.4f} MSE={report.mse:.4f}"
    )
    return report


def score_table(reports: Sequence[ScoreReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in reports], columns=SCORE_COLUMNS)
