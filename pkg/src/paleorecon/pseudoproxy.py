"""
Synthetic worlds for pseudoproxy experiments: forcings, a true temperature
drawn from one of the process equations, and noisy linear proxies whose
start years populate every nest.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .const import ModelKind, SplineSettings, YearBounds
from .exceptions import ConfigError
from .scoring import butterworth_lowpass
from .splines import bspline_basis
from .timeseries import ForcingSet, TimeSeries, transform_forcings

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PseudoConfig:
    kind: ModelKind = ModelKind.WF
    beta: Tuple[float, ...] = (0.0, 0.05, -0.3, 2.0)
    gamma_sd: float = 0.2
    eta_sd: float = 0.1
    proxies_per_nest: Union[int, Tuple[int, ...]] = 10
    snr_range: Tuple[float, float] = (0.5, 2.0)
    slope_range: Tuple[float, float] = (0.5, 2.0)
    intercept_sd: float = 1.0
    missing_fraction: float = 0.01
    observation_sd: float = 0.05
    observed_window: Tuple[int, int] = (1850, 2000)
    smoothed_window: Tuple[int, int] = (1600, 1899)
    calibration: Tuple[int, int] = (YearBounds.CALIBRATION_START, YearBounds.CALIBRATION_END)
    first_year: int = YearBounds.FIRST_YEAR
    last_year: int = YearBounds.LAST_YEAR
    n_nests: int = YearBounds.NEST_COUNT
    nest_width: int = YearBounds.NEST_WIDTH
    volcanic_rate: float = 0.02
    volcanic_scale: float = 3.0
    volcanic_decay: float = 1.0

    def counts(self) -> Tuple[int, ...]:
        if isinstance(self.proxies_per_nest, int):
            return (self.proxies_per_nest,) * self.n_nests
        counts = tuple(int(c) for c in self.proxies_per_nest)
        if len(counts) != self.n_nests:
            raise ConfigError(f"{len(counts)} proxy counts for {self.n_nests} nests")
        return counts


@dataclass(frozen=True, eq=False)
class ProxySpec:
    """One pseudoproxy: series = a0 + a1 * T + noise over [start_year, last year]."""

    name: str
    nest: int
    start_year: int
    a0: float
    a1: float
    noise_sd: float
    snr: float
    series: TimeSeries
    noiseless: TimeSeries


@dataclass(frozen=True, eq=False)
class PseudoWorld:
    seed: int
    config: PseudoConfig
    temperature: TimeSeries
    beta: np.ndarray
    gamma: Optional[np.ndarray]
    forcings: ForcingSet
    proxies: Tuple[ProxySpec, ...]
    observed: TimeSeries
    smoothed_reference: TimeSeries

    def proxy_series(self):
        return [p.series for p in self.proxies]

    def nest_counts(self) -> Dict[int, int]:
        counts = {k: 0 for k in range(1, self.config.n_nests + 1)}
        for p in self.proxies:
            counts[p.nest] += 1
        return counts

    def write(self, directory) -> Dict[str, Path]:
        """Writes the world in the CSV schemas the pipeline ingests."""
        from . import datafiles

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "proxies": directory / "proxies.csv",
            "forcings": directory / "forcings.csv",
            "temperature": directory / "temperature.csv",
            "truth": directory / "truth.csv",
            "smoothed_reference": directory / "smoothed_reference.csv",
        }
        datafiles.write_proxies(paths["proxies"], self.proxy_series())
        datafiles.write_forcings(
            paths["forcings"], self.forcings.solar, self.forcings.volcanic_raw, self.forcings.co2_raw
        )
        datafiles.write_temperature(paths["temperature"], self.observed)
        datafiles.write_temperature(paths["truth"], self.temperature)
        datafiles.write_temperature(paths["smoothed_reference"], self.smoothed_reference)
        logger.info(f"Wrote pseudoproxy world (seed {self.seed}) to {directory}")
        return paths


def synthetic_forcings(years: np.ndarray, rng: np.random.Generator, config: PseudoConfig = PseudoConfig()):
    """
    Stylized raw forcings: volcanic spikes with Poisson arrivals, exponential
    magnitudes and exponential decay (<= 0); solar as a sum of slow sinusoids;
    CO2 flat at 280 ppm until 1800, then an exponential ramp reaching 370 ppm
    in the last year.
    """
    start = int(years[0])
    n = years.size

    arrivals = np.flatnonzero(rng.random(n) < config.volcanic_rate)
    magnitudes = rng.exponential(config.volcanic_scale, arrivals.size)
    volcanic = np.zeros(n)
    lags = np.arange(n)
    for t, m in zip(arrivals, magnitudes):
        volcanic[t:] -= m * np.exp(-lags[: n - t] / config.volcanic_decay)

    phases = rng.uniform(0.0, 2.0 * math.pi, 3)
    solar = (
        0.5 * np.sin(2.0 * math.pi * years / 210.0 + phases[0])
        + 0.3 * np.sin(2.0 * math.pi * years / 88.0 + phases[1])
        + 0.2 * np.sin(2.0 * math.pi * years / 11.0 + phases[2])
    )

    ramp_start, rate = 1800, 0.02
    end = int(years[-1])
    co2 = np.full(n, 280.0)
    after = years > ramp_start
    if after.any() and end > ramp_start:
        co2[after] = 280.0 + 90.0 * np.expm1(rate * (years[after] - ramp_start)) / np.expm1(rate * (end - ramp_start))

    return (
        TimeSeries(start, solar, "solar"),
        TimeSeries(start, volcanic, "volcanic"),
        TimeSeries(start, co2, "co2"),
    )


def generate(
    config: PseudoConfig = PseudoConfig(),
    seed: int = 0,
    forcings: Optional[Tuple[TimeSeries, TimeSeries, TimeSeries]] = None,
) -> PseudoWorld:
    """
    Draws a pseudoproxy world. Forcings, truth, proxies and observation
    noise use independent streams spawned from `seed`.

    Raises:
        ConfigError: an SNR bound <= 0 or a wrong number of coefficients.
    """
    kind = ModelKind(config.kind)
    lo, hi = config.snr_range
    if lo <= 0 or hi <= 0 or hi < lo:
        logger.error(f"Invalid SNR range {config.snr_range}")
        raise ConfigError(f"SNR must be > 0, got range {config.snr_range}")
    if len(config.beta) != 4:
        raise ConfigError(f"beta needs 4 values (intercept, solar, volcanic, CO2), got {len(config.beta)}")
    counts = config.counts()

    forcing_ss, truth_ss, proxy_ss, obs_ss = np.random.SeedSequence(seed).spawn(4)
    years = np.arange(config.first_year, config.last_year + 1)
    n = years.size

    raw = forcings if forcings is not None else synthetic_forcings(years, np.random.default_rng(forcing_ss), config)
    forcing_set = transform_forcings(*raw, calibration=config.calibration)

    rng = np.random.default_rng(truth_ss)
    beta = np.asarray(config.beta, dtype=float)
    T = np.full(n, beta[0])
    if kind.has_forcings:
        T += forcing_set.design_columns(int(years[0]), int(years[-1])) @ beta[1:]
    gamma = None
    if kind.has_splines:
        K = SplineSettings.K_NF if kind is ModelKind.NF else SplineSettings.K_MIXED
        gamma = rng.normal(0.0, config.gamma_sd, int(K))
        T += bspline_basis(years, int(K)).matrix @ gamma
    T += rng.normal(0.0, 1.0, n) * config.eta_sd
    temperature = TimeSeries(int(years[0]), T, "temperature")
    spread = float(np.std(T))

    rng = np.random.default_rng(proxy_ss)
    proxies = []
    for k, count in enumerate(counts, start=1):
        nest_start = (k - 1) * config.nest_width + config.first_year
        for j in range(count):
            start = int(rng.integers(nest_start, nest_start + config.nest_width))
            a0 = float(rng.normal(0.0, config.intercept_sd))
            a1 = float(rng.uniform(*config.slope_range))
            snr = float(rng.uniform(lo, hi))
            noise_sd = a1 * spread / snr
            segment = T[start - config.first_year :]
            clean = a0 + a1 * segment
            noisy = clean + rng.normal(0.0, 1.0, segment.size) * noise_sd
            gaps = rng.random(segment.size) < config.missing_fraction
            gaps[0] = gaps[-1] = False
            noisy[gaps] = np.nan
            name = f"P{k}_{j + 1:03d}"
            proxies.append(
                ProxySpec(
                    name=name,
                    nest=k,
                    start_year=start,
                    a0=a0,
                    a1=a1,
                    noise_sd=noise_sd,
                    snr=snr,
                    series=TimeSeries(start, noisy, name),
                    noiseless=TimeSeries(start, clean, name),
                )
            )

    rng = np.random.default_rng(obs_ss)
    o0, o1 = config.observed_window
    observed = TimeSeries(
        o0,
        temperature.window(o0, o1) + rng.normal(0.0, 1.0, o1 - o0 + 1) * config.observation_sd,
        "anomaly",
    )
    s0, s1 = config.smoothed_window
    smoothed = butterworth_lowpass(temperature).restrict(s0, s1)

    logger.info(f"Generated {kind.value} world (seed {seed}): {len(proxies)} proxies, sd(T)={spread:.3f}")
    return PseudoWorld(
        seed=int(seed),
        config=config,
        temperature=temperature,
        beta=beta,
        gamma=gamma,
        forcings=forcing_set,
        proxies=tuple(proxies),
        observed=observed,
        smoothed_reference=smoothed,
    )
