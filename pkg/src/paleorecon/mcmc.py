"""
Gibbs sampler for the forcing-only (WF) model with one reduced proxy, used
as a reference for the nested Laplace engine.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from .const import INTERVAL_LEVELS, ModelKind, SamplingSettings
from .exceptions import DegenerateSeriesError
from .inla import Reconstruction
from .model import ModelConfig, assemble
from .timeseries import ForcingSet, TimeSeries

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GibbsConfig:
    iterations: int = SamplingSettings.GIBBS_ITERATIONS
    burn_in: int = SamplingSettings.GIBBS_BURN_IN
    store_latent: bool = True
    progress_every: int = 1000


@dataclass(frozen=True, eq=False)
class Chain:
    """
    Post-burn-in draws, one row per kept iteration.

    Variances are stored as sigma2_0 (process) and sigma2_<nest> (proxy noise).
    """

    names: Tuple[str, ...]
    draws: np.ndarray
    iterations: int
    burn_in: int
    seed: int
    latent_years: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.draws[:, self.names.index(name)]
        except ValueError:
            raise KeyError(f"Unknown chain parameter '{name}'")

    def latent_draws(self) -> np.ndarray:
        cols = [i for i, n in enumerate(self.names) if n.startswith("T[")]
        if not cols:
            raise KeyError("Chain was run without storing the latent field")
        return self.draws[:, cols]

    def reconstruct(self, levels=INTERVAL_LEVELS) -> Reconstruction:
        return Reconstruction.from_draws(self.latent_years, self.latent_draws(), levels)

    def to_frame(self, include_latent: bool = False) -> pd.DataFrame:
        """Long format (iteration, parameter, value)."""
        keep = [i for i, n in enumerate(self.names) if include_latent or not n.startswith("T[")]
        iterations = np.arange(self.burn_in + 1, self.iterations + 1)
        return pd.DataFrame(
            {
                "iteration": np.repeat(iterations, len(keep)),
                "parameter": np.tile([self.names[i] for i in keep], len(self)),
                "value": self.draws[:, keep].ravel(),
            }
        )


def draw_gaussian(rng: np.random.Generator, precision: np.ndarray, linear: np.ndarray) -> np.ndarray:
    """One draw from N(Q^{-1} b, Q^{-1}) in canonical form."""
    L = linalg.cholesky(precision, lower=True)
    mean = linalg.cho_solve((L, True), linear)
    return mean + linalg.solve_triangular(L, rng.standard_normal(linear.size), lower=True, trans="T")


def draw_precision(rng: np.random.Generator, shape: float, rate: float, residuals: np.ndarray) -> float:
    """Gamma(shape + n/2, rate + SS/2) full conditional of a noise precision."""
    return float(rng.gamma(shape + residuals.size / 2.0, 1.0 / (rate + 0.5 * residuals @ residuals)))


def gibbs_wf(
    rp,
    forcings: ForcingSet,
    calibration: TimeSeries,
    iters: int = SamplingSettings.GIBBS_ITERATIONS,
    burn_in: int = SamplingSettings.GIBBS_BURN_IN,
    seed: int = 0,
    model_config: ModelConfig = ModelConfig(),
    store_latent: bool = True,
    progress_every: int = 1000,
) -> Chain:
    """
    Systematic-scan Gibbs sampler: (alpha0, alpha1), then beta, then the
    latent temperatures jointly (their full conditional is diagonal), then
    the two precisions. Priors match `model.assemble` for the WF model.

    Raises:
        ValueError: iters <= 0 or burn_in outside [0, iters).
    """
    if iters <= 0:
        raise ValueError(f"Number of iterations must be positive, got {iters}")
    if not 0 <= burn_in < iters:
        raise ValueError(f"Burn-in must lie in [0, {iters}), got {burn_in}")

    lgm = assemble(ModelKind.WF, [rp], forcings, None, calibration, model_config)
    years = lgm.latent_years
    n = years.size
    p = lgm.n_fixed - 2
    F = forcings.design_columns(int(years[0]), int(years[-1]))
    F = np.column_stack([np.ones(n), F])
    prior_prec = 1.0 / model_config.prior_variance
    a, b = model_config.hyper_shape, model_config.hyper_rate

    rp_values = rp.series.window(int(years[0]), int(years[-1]))
    rp_obs = ~np.isnan(rp_values)
    cal_values = calibration.window(int(years[0]), int(years[-1]))
    outside = (years < model_config.calibration[0]) | (years > model_config.calibration[1])
    cal_values[outside] = np.nan
    cal_obs = ~np.isnan(cal_values)
    if rp_obs.sum() < 2:
        raise DegenerateSeriesError("Reduced proxy has fewer than 2 observations on the latent grid")
    cal_prec = 1.0 / model_config.calibration_variance
    FtF = F.T @ F

    theta = lgm.initial_theta
    T = theta[:n].copy()
    beta = theta[n : n + p].copy()
    alpha = theta[n + p : n + p + 2].copy()
    tau0, tau1 = np.exp(lgm.initial_hyper)

    nest = rp.nest_index
    names = [f"alpha0[{nest}]", f"alpha1[{nest}]"] + [f"beta{j}" for j in range(p)]
    if store_latent:
        names += [f"T[{y}]" for y in years]
    names += ["sigma2_0", f"sigma2_{nest}"]
    draws = np.empty((iters - burn_in, len(names)))

    rng = np.random.default_rng(seed)
    for it in range(iters):
        X = np.column_stack([np.ones(rp_obs.sum()), T[rp_obs]])
        alpha = draw_gaussian(
            rng, tau1 * X.T @ X + prior_prec * np.eye(2), tau1 * X.T @ rp_values[rp_obs]
        )
        beta = draw_gaussian(rng, tau0 * FtF + prior_prec * np.eye(p), tau0 * F.T @ T)

        precision = np.full(n, tau0)
        linear = tau0 * (F @ beta)
        precision[rp_obs] += tau1 * alpha[1] ** 2
        linear[rp_obs] += tau1 * alpha[1] * (rp_values[rp_obs] - alpha[0])
        precision[cal_obs] += cal_prec
        linear[cal_obs] += cal_prec * cal_values[cal_obs]
        T = linear / precision + rng.standard_normal(n) / np.sqrt(precision)

        tau0 = draw_precision(rng, a, b, T - F @ beta)
        tau1 = draw_precision(rng, a, b, rp_values[rp_obs] - alpha[0] - alpha[1] * T[rp_obs])

        if it >= burn_in:
            row = [alpha, beta]
            if store_latent:
                row.append(T)
            row.append([1.0 / tau0, 1.0 / tau1])
            draws[it - burn_in] = np.concatenate(row)
        if progress_every and (it + 1) % progress_every == 0:
            logger.info(f"Gibbs seed={seed}: iteration {it + 1}/{iters}")

    return Chain(tuple(names), draws, int(iters), int(burn_in), int(seed), years if store_latent else None)


def run_chains(rp, forcings, calibration, seeds: Sequence[int], config: GibbsConfig = GibbsConfig(), n_jobs=None, **kwargs):
    """Independent chains, one per seed, in seed order."""

    def run(seed):
        return gibbs_wf(
            rp,
            forcings,
            calibration,
            config.iterations,
            config.burn_in,
            seed,
            store_latent=config.store_latent,
            progress_every=config.progress_every,
            **kwargs,
        )

    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(run, seeds))


def effective_sample_size(x) -> float:
    """
    ESS by Geyer's initial positive sequence: autocorrelations summed in
    adjacent pairs up to the first non-positive pair. NaN for a constant chain.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("Effective sample size needs at least 2 draws")
    xc = x - x.mean()
    if not np.any(xc):
        return float("nan")
    spectrum = np.fft.rfft(xc, 2 * n)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), 2 * n)[:n] / n
    rho = acov / acov[0]
    m = n // 2
    pairs = rho[0 : 2 * m : 2] + rho[1 : 2 * m : 2]
    stop = np.flatnonzero(pairs <= 0)
    k = int(stop[0]) if stop.size else pairs.size
    tau = -1.0 + 2.0 * np.sum(pairs[:k])
    return float(n / max(tau, 1e-12))


def chain_summary(chain, names: Optional[Sequence[str]] = None, include_latent: bool = False) -> pd.DataFrame:
    """
    Mean, sd, 2.5%/97.5% quantiles and ESS per parameter.

    Parameters:
        chain (Chain or np.ndarray): a Chain, or a (draws x parameters) array with `names`.

    Raises:
        ValueError: empty chain.
    """
    if isinstance(chain, Chain):
        draws, names = chain.draws, chain.names
    else:
        draws = np.asarray(chain, dtype=float)
        if draws.ndim == 1:
            draws = draws[:, None]
        names = names or [f"x{i}" for i in range(draws.shape[1])]
    if draws.shape[0] == 0:
        raise ValueError("Chain has no draws after burn-in")

    rows = []
    for j, name in enumerate(names):
        if not include_latent and name.startswith("T["):
            continue
        x = draws[:, j]
        ess = effective_sample_size(x) if x.size > 1 else float("nan")
        rows.append(
            {
                "parameter": name,
                "mean": x.mean(),
                "sd": x.std(ddof=1) if x.size > 1 else 0.0,
                "q025": np.quantile(x, 0.025),
                "q975": np.quantile(x, 0.975),
                "ess": ess,
                "degenerate": bool(np.isnan(ess)),
            }
        )
    return pd.DataFrame(rows)


def potential_scale_reduction(chains) -> float:
    """Gelman-Rubin R-hat of equal-length 1-D chains."""
    chains = np.asarray([np.asarray(c, dtype=float) for c in chains])
    m, n = chains.shape
    if m < 2 or n < 2:
        raise ValueError("Need at least two chains of two draws")
    within = chains.var(axis=1, ddof=1).mean()
    between = n * chains.mean(axis=1).var(ddof=1)
    if within == 0:
        return float("nan")
    pooled = (n - 1) / n * within + between / n
    return float(np.sqrt(pooled / within))
