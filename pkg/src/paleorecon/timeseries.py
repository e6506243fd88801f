import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .const import (
    MAX_MISSING_RATIO,
    FDR_LEVEL,
    YearBounds,
)
from .exceptions import (
    DegenerateSeriesError,
    DomainError,
    OutOfRangeError,
    CoverageError,
)

logger = logging.getLogger(__name__)

Window = Tuple[int, int]


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """
    Annual series with an explicit year index. Missing years are NaN.

    Parameters:
        start_year (int): Calendar year of the first value.
        values (array-like): One value per year, NaN marks a missing year.
        name (str): Identifier.
    """

    start_year: int
    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=float).ravel()
        if values.size < 1:
            raise DegenerateSeriesError(f"Series '{self.name}' is empty")
        if np.any(np.isinf(values)):
            raise DomainError(f"Series '{self.name}' contains infinite values")
        if not YearBounds.FIRST_YEAR <= int(self.start_year) <= YearBounds.LAST_YEAR:
            raise OutOfRangeError(
                f"Series '{self.name}' starts in {int(self.start_year)}, outside "
                f"[{int(YearBounds.FIRST_YEAR)}, {int(YearBounds.LAST_YEAR)}]"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "start_year", int(self.start_year))

    def __len__(self) -> int:
        return self.values.size

    @property
    def end_year(self) -> int:
        return self.start_year + self.values.size - 1

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.start_year, self.end_year + 1)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def first_valid_year(self) -> Optional[int]:
        valid = np.flatnonzero(~self.missing)
        return int(self.start_year + valid[0]) if valid.size else None

    @property
    def last_valid_year(self) -> Optional[int]:
        valid = np.flatnonzero(~self.missing)
        return int(self.start_year + valid[-1]) if valid.size else None

    def window(self, start: int, end: int) -> np.ndarray:
        """Values on [start, end]; years outside the series come back as NaN."""
        if end < start:
            raise ValueError(f"Empty window [{start}, {end}]")
        out = np.full(end - start + 1, np.nan)
        lo, hi = max(start, self.start_year), min(end, self.end_year)
        if lo <= hi:
            out[lo - start : hi - start + 1] = self.values[
                lo - self.start_year : hi - self.start_year + 1
            ]
        return out

    def restrict(self, start: int, end: int) -> "TimeSeries":
        return TimeSeries(start, self.window(start, end), self.name)

    def with_values(self, values) -> "TimeSeries":
        return TimeSeries(self.start_year, values, self.name)

    def infilled(self) -> "TimeSeries":
        return self.with_values(interpolate_missing(self.values))


@dataclass(frozen=True, eq=False)
class ForcingSet:
    """Raw and transformed external forcings on a common year grid."""

    solar: TimeSeries
    volcanic_raw: TimeSeries
    co2_raw: TimeSeries
    volcanic_transformed: TimeSeries
    co2_transformed: TimeSeries
    offsets: dict = field(default_factory=dict)

    @property
    def start_year(self) -> int:
        return self.solar.start_year

    @property
    def end_year(self) -> int:
        return self.solar.end_year

    def design_columns(self, start: int, end: int) -> np.ndarray:
        """(years x 3) matrix of S_t, transformed V_t, transformed C_t."""
        columns = [
            s.window(start, end)
            for s in (self.solar, self.volcanic_transformed, self.co2_transformed)
        ]
        matrix = np.column_stack(columns)
        if np.isnan(matrix).any():
            missing = np.flatnonzero(np.isnan(matrix).any(axis=1)) + start
            raise CoverageError(
                f"Forcings do not cover [{start}, {end}]; first gaps: {missing[:10].tolist()}"
            )
        return matrix


@dataclass(frozen=True, eq=False)
class ProxyNest:
    """
    Proxies grouped by the 250-year interval holding their first observation.

    `members` is the first-year partition; `panel` is the cumulative set of
    proxies available from the nest's start (members of nests 1..k), which is
    what nest k's reduced proxy is built from.
    """

    index: int
    interval: Window
    members: Tuple[TimeSeries, ...]
    panel: Tuple[TimeSeries, ...]
    calibration_window: Window
    calibration_matrix: np.ndarray
    column_means: np.ndarray
    column_sds: np.ndarray

    @property
    def observation_window(self) -> Window:
        """From the later of the nest start and the panel's first observed year to calibration end."""
        firsts = [p.first_valid_year for p in self.panel if p.first_valid_year is not None]
        start = max(self.interval[0], min(firsts)) if firsts else self.interval[0]
        return (start, self.calibration_window[1])

    @property
    def is_empty(self) -> bool:
        return len(self.panel) == 0

    def panel_matrix(self) -> np.ndarray:
        """
        Raw panel over the observation window (years x proxies), NaN where missing.
        """
        start, end = self.observation_window
        if not self.panel:
            return np.zeros((end - start + 1, 0))
        return np.column_stack([p.window(start, end) for p in self.panel])

    def standardized_panel(self) -> np.ndarray:
        """
        Panel standardized with the calibration means/sds. Interior gaps are
        interpolated linearly; leading and trailing gaps are set to 0, the
        calibration mean in standardized units.
        """
        raw = self.panel_matrix()
        z = (raw - self.column_means[None, :]) / self.column_sds[None, :]
        for j in range(z.shape[1]):
            z[:, j] = interpolate_missing(z[:, j], fill=0.0)
        return z


def interpolate_missing(values, fill: Optional[float] = None) -> np.ndarray:
    """
    Linear interpolation of NaN gaps between valid values.

    Parameters:
        values (array-like): Series with NaN gaps.
        fill (float or None): Value for leading/trailing gaps. None extends the
            nearest valid value.

    Returns:
        np.ndarray: Copy without interior gaps.
    """
    values = np.array(values, dtype=float)
    missing = np.isnan(values)
    if not missing.any():
        return values
    valid = np.flatnonzero(~missing)
    if valid.size == 0:
        raise DegenerateSeriesError("Cannot interpolate a series with no valid values")
    index = np.arange(values.size)
    out = np.interp(index, valid, values[valid])
    if fill is not None:
        out[: valid[0]] = fill
        out[valid[-1] + 1 :] = fill
    return out


def normal_score_transform(series: TimeSeries) -> TimeSeries:
    """
    Maps the non-missing values to standard-normal quantiles of their ranks,
    Phi^{-1}((r - 0.5) / n), with average ranks for ties.

    Raises:
        DegenerateSeriesError: fewer than 2 non-missing values.
    """
    values = series.values
    valid = ~np.isnan(values)
    n = int(valid.sum())
    if n < 2:
        logger.error(f"Normal score transform of '{series.name}' with {n} values")
        raise DegenerateSeriesError(
            f"Series '{series.name}' has {n} non-missing values, need at least 2"
        )
    ranks = stats.rankdata(values[valid], method="average")
    out = np.full(values.size, np.nan)
    out[valid] = stats.norm.ppf((ranks - 0.5) / n)
    return series.with_values(out)


def _check_window(window: Window) -> Window:
    start, end = int(window[0]), int(window[1])
    if end < start:
        raise ValueError(f"Empty window [{start}, {end}]")
    return start, end


def missing_ratio(series: TimeSeries, window: Window) -> float:
    start, end = _check_window(window)
    values = series.window(start, end)
    return float(np.isnan(values).sum() / values.size)


def screen_missing(
    series: TimeSeries, window: Window, max_ratio: float = MAX_MISSING_RATIO
) -> bool:
    """
    Keep/drop decision on the share of missing years inside `window`.

    Returns:
        bool: True to keep, i.e. missing/length <= max_ratio.
    """
    ratio = missing_ratio(series, window)
    keep = ratio <= max_ratio
    if not keep:
        logger.debug(f"Dropping '{series.name}': missing ratio {ratio:.4f} > {max_ratio}")
    return keep


def screen_coverage(series: TimeSeries, calibration_end: int = YearBounds.CALIBRATION_END) -> bool:
    """True when the series runs through `calibration_end`, as nest assembly requires."""
    keep = series.end_year >= calibration_end
    if not keep:
        logger.warning(f"Dropping '{series.name}': ends in {series.end_year}, before {calibration_end}")
    return keep


def benjamini_hochberg(pvalues, level: float = FDR_LEVEL) -> np.ndarray:
    """Boolean mask of the hypotheses rejected by the BH step-up rule."""
    pvalues = np.asarray(pvalues, dtype=float)
    if pvalues.size == 0:
        return np.zeros(0, dtype=bool)
    adjusted = stats.false_discovery_control(pvalues, method="bh")
    return adjusted <= level


def screen_correlation(
    proxies: Sequence[TimeSeries],
    target: TimeSeries,
    window: Window,
    fdr_level: float = FDR_LEVEL,
) -> List[TimeSeries]:
    """
    Keeps the proxies whose Pearson correlation with `target` over `window`
    survives Benjamini-Hochberg at `fdr_level`.

    Proxies overlapping the target on fewer than 10 years are excluded with a
    warning.
    """
    start, end = _check_window(window)
    target_values = target.window(start, end)
    candidates, pvalues = [], []
    for proxy in proxies:
        values = proxy.window(start, end)
        overlap = ~np.isnan(values) & ~np.isnan(target_values)
        if overlap.sum() < YearBounds.MIN_OVERLAP:
            logger.warning(
                f"Excluding '{proxy.name}': {int(overlap.sum())} overlapping years with target"
            )
            continue
        x, y = values[overlap], target_values[overlap]
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            logger.warning(f"Excluding '{proxy.name}': constant over the overlap")
            continue
        result = stats.pearsonr(x, y)
        candidates.append(proxy)
        pvalues.append(float(result.pvalue))

    keep = benjamini_hochberg(pvalues, fdr_level)
    kept = [p for p, k in zip(candidates, keep) if k]
    logger.info(f"Correlation screen kept {len(kept)} of {len(proxies)} proxies")
    return kept


def nest_index(first_year: int, nest_width: int = YearBounds.NEST_WIDTH) -> int:
    if not YearBounds.FIRST_YEAR <= first_year <= YearBounds.LAST_YEAR:
        raise OutOfRangeError(
            f"First year {first_year} outside [{int(YearBounds.FIRST_YEAR)}, {int(YearBounds.LAST_YEAR)}]"
        )
    return int(math.ceil(first_year / nest_width))


def _calibration_block(panel, window: Window):
    start, end = window
    length = end - start + 1
    if not panel:
        return np.zeros((length, 0)), np.zeros(0), np.ones(0)
    raw = np.column_stack([interpolate_missing(p.window(start, end)) for p in panel])
    means = raw.mean(axis=0)
    sds = raw.std(axis=0)
    sds = np.where(sds > 0, sds, 1.0)
    return (raw - means) / sds, means, sds


def assign_nests(
    proxies: Sequence[TimeSeries],
    calibration_end: int = YearBounds.CALIBRATION_END,
    calibration_start: int = YearBounds.CALIBRATION_START,
    n_nests: int = YearBounds.NEST_COUNT,
    nest_width: int = YearBounds.NEST_WIDTH,
) -> List[ProxyNest]:
    """
    Assigns every proxy to nest k = ceil(first_year / 250) and builds each
    nest's cumulative panel and standardized calibration matrix.

    Raises:
        OutOfRangeError: a proxy's first valid year lies outside 1..2000.
        CoverageError: a proxy stops before `calibration_end`.
    """
    groups = {k: [] for k in range(1, n_nests + 1)}
    for proxy in proxies:
        first = proxy.first_valid_year
        if first is None:
            raise OutOfRangeError(f"Proxy '{proxy.name}' has no valid values")
        k = nest_index(first, nest_width)
        if k > n_nests:
            raise OutOfRangeError(f"Proxy '{proxy.name}' starts in {first}, after nest {n_nests}")
        if proxy.end_year < calibration_end:
            logger.error(f"Proxy '{proxy.name}' ends in {proxy.end_year}")
            raise CoverageError(
                f"Proxy '{proxy.name}' ends in {proxy.end_year}, before calibration end {calibration_end}"
            )
        groups[k].append(proxy)

    window = (int(calibration_start), int(calibration_end))
    nests, cumulative = [], []
    for k in range(1, n_nests + 1):
        members = tuple(sorted(groups[k], key=lambda p: p.name))
        cumulative.extend(members)
        panel = tuple(cumulative)
        matrix, means, sds = _calibration_block(panel, window)
        interval = ((k - 1) * nest_width + 1, k * nest_width)
        nests.append(
            ProxyNest(k, interval, members, panel, window, matrix, means, sds)
        )
        logger.debug(f"Nest {k} {interval}: {len(members)} members, panel of {len(panel)}")
    return nests


def transform_forcings(
    solar: TimeSeries,
    volcanic_raw: TimeSeries,
    co2_raw: TimeSeries,
    calibration: Window = (YearBounds.CALIBRATION_START, YearBounds.CALIBRATION_END),
    center: bool = True,
) -> ForcingSet:
    """
    C~_t = log(C_t), V~_t = log(-V_t + 1), S_t unchanged; the three covariates
    are then centered over the calibration window unless `center` is False.

    Raises:
        DomainError: C_t <= 0 or V_t > 0, naming the first offending year.
    """
    for series in (solar, volcanic_raw, co2_raw):
        if series.missing.any():
            year = int(series.years[series.missing][0])
            raise CoverageError(f"Forcing '{series.name}' is missing year {year}")

    bad_co2 = co2_raw.values <= 0
    if bad_co2.any():
        year = int(co2_raw.years[bad_co2][0])
        logger.error(f"Non-positive CO2 in {year}")
        raise DomainError(f"CO2 concentration must be positive; year {year} has {co2_raw.values[bad_co2][0]}")
    bad_volc = volcanic_raw.values > 0
    if bad_volc.any():
        year = int(volcanic_raw.years[bad_volc][0])
        logger.error(f"Positive volcanic forcing in {year}")
        raise DomainError(f"Volcanic forcing must be <= 0; year {year} has {volcanic_raw.values[bad_volc][0]}")

    volcanic = volcanic_raw.with_values(np.log(-volcanic_raw.values + 1.0))
    co2 = co2_raw.with_values(np.log(co2_raw.values))

    offsets = {"solar": 0.0, "volcanic": 0.0, "co2": 0.0}
    if center:
        start, end = _check_window(calibration)
        for key, series in (("solar", solar), ("volcanic", volcanic), ("co2", co2)):
            segment = series.window(start, end)
            if np.isnan(segment).all():
                raise CoverageError(f"Forcing '{series.name}' does not reach the calibration window")
            offsets[key] = float(np.nanmean(segment))
        solar = solar.with_values(solar.values - offsets["solar"])
        volcanic = volcanic.with_values(volcanic.values - offsets["volcanic"])
        co2 = co2.with_values(co2.values - offsets["co2"])

    return ForcingSet(
        solar=solar,
        volcanic_raw=volcanic_raw,
        co2_raw=co2_raw,
        volcanic_transformed=volcanic,
        co2_transformed=co2,
        offsets=offsets,
    )
