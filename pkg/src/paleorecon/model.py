import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.special import gammaln

from ._core import ArrowheadCholesky
from .const import (
    CALIBRATION_OBS_VARIANCE,
    LOGGAMMA_RATE,
    LOGGAMMA_SHAPE,
    PRIOR_VARIANCE,
    ModelKind,
)
from .exceptions import CoverageError, PaleoReconException
from .splines import SplineBasis
from .timeseries import ForcingSet, TimeSeries

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class LatentGaussianModel:
    """
    Latent Gaussian model with Gaussian observations.

    The Gaussian layer theta has prior N(0, Q(psi)^{-1}) with
    Q(psi) = prior_fixed + sum_h exp(psi_h) * prior_scaled[h]. Observation j
    has mean eta_j = (obs_matrix @ theta)_j + theta[a_j] * theta[b_j] (the
    bilinear term only where obs_bilinear[j] != (-1, -1)) and precision
    exp(psi[obs_hyper[j]]), or obs_fixed_precision[j] where obs_hyper[j] == -1.
    Every hyperparameter carries a log-gamma(shape, rate) prior, i.e. a
    Gamma(shape, rate) prior on the precision exp(psi_h).

    The first `n_local` entries of theta form the banded latent block
    (temperatures ordered by year); fixed effects come after it.
    """

    parameter_names: Tuple[str, ...]
    hyper_names: Tuple[str, ...]
    n_local: int
    prior_fixed: sparse.csr_matrix
    prior_scaled: Tuple[Tuple[int, sparse.csr_matrix], ...]
    obs_values: np.ndarray
    obs_matrix: sparse.csr_matrix
    obs_bilinear: np.ndarray
    obs_hyper: np.ndarray
    obs_fixed_precision: np.ndarray
    hyper_shape: np.ndarray
    hyper_rate: np.ndarray
    initial_theta: np.ndarray
    initial_hyper: np.ndarray
    latent_years: Optional[np.ndarray] = None
    kind: Optional[ModelKind] = None
    n_nests: int = 0
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        d = len(self.parameter_names)
        if self.prior_fixed.shape != (d, d):
            raise ValueError(f"prior_fixed has shape {self.prior_fixed.shape}, expected {(d, d)}")
        if self.obs_matrix.shape[1] != d:
            raise ValueError(f"obs_matrix has {self.obs_matrix.shape[1]} columns, expected {d}")
        n_obs = self.obs_values.size
        for name in ("obs_bilinear", "obs_hyper", "obs_fixed_precision"):
            if getattr(self, name).shape[0] != n_obs:
                raise ValueError(f"{name} does not match {n_obs} observations")
        if self.hyper_shape.size != len(self.hyper_names):
            raise ValueError("hyper_shape does not match hyper_names")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.parameter_names)})

    @property
    def dim(self) -> int:
        return len(self.parameter_names)

    @property
    def n_hyper(self) -> int:
        return len(self.hyper_names)

    @property
    def n_obs(self) -> int:
        return int(self.obs_values.size)

    @property
    def n_fixed(self) -> int:
        return self.dim - self.n_local

    @property
    def fixed_names(self) -> Tuple[str, ...]:
        return self.parameter_names[self.n_local :]

    def index(self, parameter) -> int:
        """Position of a parameter given by name or integer index."""
        if isinstance(parameter, (int, np.integer)):
            if not 0 <= parameter < self.dim:
                raise KeyError(f"Parameter index {parameter} out of range")
            return int(parameter)
        try:
            return self._index[parameter]
        except KeyError:
            raise KeyError(f"Unknown parameter '{parameter}'")

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.dim},)")
        return theta

    def check_hyper(self, psi) -> np.ndarray:
        psi = np.atleast_1d(np.asarray(psi, dtype=float))
        if psi.shape != (self.n_hyper,):
            raise ValueError(f"psi has shape {psi.shape}, expected ({self.n_hyper},)")
        return psi

    def prior_precision(self, psi) -> sparse.csr_matrix:
        psi = self.check_hyper(psi)
        q = self.prior_fixed.copy()
        for h, block in self.prior_scaled:
            q = q + math.exp(psi[h]) * block
        return q.tocsr()

    def obs_precision(self, psi) -> np.ndarray:
        psi = self.check_hyper(psi)
        precision = self.obs_fixed_precision.astype(float).copy()
        scaled = self.obs_hyper >= 0
        precision[scaled] = np.exp(psi[self.obs_hyper[scaled]])
        return precision

    def predictor(self, theta) -> np.ndarray:
        eta = self.obs_matrix @ theta
        rows = np.flatnonzero(self.obs_bilinear[:, 0] >= 0)
        if rows.size:
            a, b = self.obs_bilinear[rows, 0], self.obs_bilinear[rows, 1]
            eta[rows] += theta[a] * theta[b]
        return eta

    def jacobian(self, theta) -> sparse.csr_matrix:
        rows = np.flatnonzero(self.obs_bilinear[:, 0] >= 0)
        if not rows.size:
            return self.obs_matrix
        a, b = self.obs_bilinear[rows, 0], self.obs_bilinear[rows, 1]
        extra = sparse.csr_matrix(
            (
                np.concatenate([theta[b], theta[a]]),
                (np.concatenate([rows, rows]), np.concatenate([a, b])),
            ),
            shape=self.obs_matrix.shape,
        )
        return (self.obs_matrix + extra).tocsr()

    @property
    def is_linear(self) -> bool:
        return not np.any(self.obs_bilinear[:, 0] >= 0)

    def log_hyper_prior(self, psi) -> float:
        psi = self.check_hyper(psi)
        a, b = self.hyper_shape, self.hyper_rate
        return float(np.sum(a * np.log(b) - gammaln(a) + a * psi - b * np.exp(psi)))

    def log_likelihood(self, theta, psi) -> float:
        tau = self.obs_precision(psi)
        resid = self.obs_values - self.predictor(theta)
        return float(0.5 * np.sum(np.log(tau) - LOG_2PI - tau * resid**2))

    def log_prior_theta(self, theta, psi) -> float:
        q = self.prior_precision(psi)
        factor = ArrowheadCholesky(q, self.n_local)
        return float(0.5 * factor.logdet - 0.5 * self.dim * LOG_2PI - 0.5 * theta @ (q @ theta))

    def summary(self) -> dict:
        """Dimensions, parameter names and prior settings for audit dumps."""
        return {
            "kind": self.kind.value if self.kind is not None else None,
            "n_nests": self.n_nests,
            "n_latent": self.n_local,
            "n_fixed": self.n_fixed,
            "n_hyper": self.n_hyper,
            "n_obs": self.n_obs,
            "fixed_effects": list(self.fixed_names),
            "hyperparameters": list(self.hyper_names),
            "hyper_prior": {
                "family": "log-gamma",
                "shape": self.hyper_shape.tolist(),
                "rate": self.hyper_rate.tolist(),
            },
            **self.metadata,
        }


def log_joint(lgm: LatentGaussianModel, theta, psi) -> float:
    """
    log p(psi) + log p(theta | psi) + log p(y | theta, psi).

    Raises:
        ValueError: theta or psi of the wrong dimension.
    """
    theta = lgm.check_theta(theta)
    psi = lgm.check_hyper(psi)
    return lgm.log_hyper_prior(psi) + lgm.log_prior_theta(theta, psi) + lgm.log_likelihood(theta, psi)


@dataclass(frozen=True)
class ModelConfig:
    first_year: int = 1
    last_year: int = 2000
    calibration: Tuple[int, int] = (1900, 2000)
    prior_variance: float = PRIOR_VARIANCE
    calibration_variance: float = CALIBRATION_OBS_VARIANCE
    hyper_shape: float = LOGGAMMA_SHAPE
    hyper_rate: float = LOGGAMMA_RATE


def _fixed_design(kind, forcings, basis, years):
    start, end = int(years[0]), int(years[-1])
    names, columns = ["beta0"], [np.ones(years.size)]
    if kind.has_forcings:
        if forcings is None:
            raise PaleoReconException(f"Model {kind.value} requires forcings")
        matrix = forcings.design_columns(start, end)
        names += ["beta1", "beta2", "beta3"]
        columns += [matrix[:, 0], matrix[:, 1], matrix[:, 2]]
    if kind.has_splines:
        if basis is None:
            raise PaleoReconException(f"Model {kind.value} requires a spline basis")
        if basis.years.size != years.size or np.any(basis.years != years):
            raise CoverageError(
                f"Spline basis covers [{basis.years[0]:.0f}, {basis.years[-1]:.0f}], latent grid [{start}, {end}]"
            )
        prefix = "beta" if kind is ModelKind.NF else "gamma"
        names += basis.column_names(prefix)
        columns += [basis.matrix[:, k] for k in range(basis.K)]
    return names, np.column_stack(columns)


def _initial_values(rps, F, years, cal_values):
    """Plug-in starting point: OLS links on the calibration window, inverted RPs elsewhere."""
    start = int(years[0])
    T0 = np.zeros(years.size)
    known = ~np.isnan(cal_values)
    T0[known] = cal_values[known]

    links, inversions = [], []
    for rp in rps:
        rp_values = rp.series.window(start, int(years[-1]))
        both = known & ~np.isnan(rp_values)
        if both.sum() >= 3 and np.ptp(T0[both]) > 0:
            slope, intercept = np.polyfit(T0[both], rp_values[both], 1)
        else:
            slope, intercept = 1.0, 0.0
        if abs(slope) < 1e-3:
            slope = 1e-3 if slope >= 0 else -1e-3
        links.append((intercept, slope))
        inversions.append((rp_values - intercept) / slope)

    if inversions:
        stacked = np.vstack(inversions)
        counts = np.sum(~np.isnan(stacked), axis=0)
        sums = np.nansum(stacked, axis=0)
        guess = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
        T0[~known] = guess[~known]

    beta0, *_ = np.linalg.lstsq(F, T0, rcond=None)
    rho0 = -math.log(max(np.var(T0 - F @ beta0), 1e-4))
    rhos = []
    for (intercept, slope), rp in zip(links, rps):
        values = rp.series.window(start, int(years[-1]))
        ok = ~np.isnan(values)
        resid = values[ok] - intercept - slope * T0[ok]
        rhos.append(-math.log(max(np.var(resid), 1e-4)))
    return T0, beta0, links, np.array([rho0] + rhos)


def assemble(
    kind: ModelKind,
    rps: Sequence,
    forcings: Optional[ForcingSet],
    basis: Optional[SplineBasis],
    calibration: TimeSeries,
    config: ModelConfig = ModelConfig(),
) -> LatentGaussianModel:
    """
    Builds the latent Gaussian model for one of the NF/WF/Mixed process
    equations with one observation channel per reduced proxy.

    First level: RP_t^i = alpha0^i + alpha1^i T_t + eps_t^i for every observed
    (i, t). Second level: T_t = F_t beta + eta_t. Calibration anomalies enter as
    Gaussian observations of T_t with fixed variance `config.calibration_variance`.

    Parameters:
        kind (ModelKind): NF, WF or Mixed.
        rps (sequence of ReducedProxy): At least one reduced proxy.
        forcings (ForcingSet or None): Required by WF and Mixed.
        basis (SplineBasis or None): Required by NF and Mixed, on the latent grid.
        calibration (TimeSeries): Observed anomalies used as calibration.
        config (ModelConfig): Latent interval, priors and calibration variance.

    Returns:
        LatentGaussianModel: theta = (T_first..T_last, fixed effects, alphas),
        psi = (rho0, rho1..rhoN) with rho = -log sigma^2.

    Raises:
        CoverageError: an RP observes years outside the latent grid.
    """
    kind = ModelKind(kind)
    if not rps:
        raise PaleoReconException("At least one reduced proxy is required")
    rps = sorted(rps, key=lambda rp: (rp.nest_index, getattr(rp.method, "value", str(rp.method))))
    years = np.arange(config.first_year, config.last_year + 1)
    n_years = years.size

    gaps = []
    for rp in rps:
        if rp.series.start_year < config.first_year or rp.series.end_year > config.last_year:
            gaps.append(f"nest {rp.nest_index}: [{rp.series.start_year}, {rp.series.end_year}]")
    if gaps:
        logger.error(f"Reduced proxies outside latent grid: {gaps}")
        raise CoverageError(
            f"Reduced proxies outside latent grid [{config.first_year}, {config.last_year}]: {'; '.join(gaps)}"
        )

    fixed_names, F = _fixed_design(kind, forcings, basis, years)
    p = F.shape[1]
    n_rp = len(rps)
    alpha_names = []
    for rp in rps:
        alpha_names += [f"alpha0[{rp.nest_index}]", f"alpha1[{rp.nest_index}]"]
    names = tuple([f"T[{y}]" for y in years] + fixed_names + alpha_names)
    d = len(names)
    beta_slice = slice(n_years, n_years + p)
    alpha_start = n_years + p

    # prior: T = F beta + eta, eta ~ N(0, exp(-rho0) I); coefficients N(0, prior_variance)
    fixed_diag = np.zeros(d)
    fixed_diag[n_years:] = 1.0 / config.prior_variance
    prior_fixed = sparse.diags(fixed_diag).tocsr()
    eye = sparse.identity(n_years, format="csr")
    Fs = sparse.csr_matrix(F)
    zeros_alpha = (2 * n_rp, 2 * n_rp)
    eta_block = sparse.bmat(
        [
            [eye, -Fs, None],
            [-Fs.T, sparse.csr_matrix(F.T @ F), None],
            [None, None, sparse.csr_matrix(zeros_alpha)],
        ],
        format="csr",
    )

    cal_full = calibration.window(config.first_year, config.last_year)
    outside = (years < config.calibration[0]) | (years > config.calibration[1])
    cal_full[outside] = np.nan

    # calibration block: y = T_t with fixed precision
    cal_t = np.flatnonzero(~np.isnan(cal_full))
    cols = [cal_t]
    values = [cal_full[cal_t]]
    bilinear = [np.full((cal_t.size, 2), -1)]
    hyper = [np.full(cal_t.size, -1)]
    fixed_prec = [np.full(cal_t.size, 1.0 / config.calibration_variance)]

    # proxy blocks: y = alpha0 + alpha1 * T_t
    for i, rp in enumerate(rps):
        a0, a1 = alpha_start + 2 * i, alpha_start + 2 * i + 1
        observed = np.flatnonzero(~rp.series.missing)
        t = observed + (rp.series.start_year - config.first_year)
        cols.append(np.full(observed.size, a0))
        values.append(rp.series.values[observed])
        bilinear.append(np.column_stack([np.full(observed.size, a1), t]))
        hyper.append(np.full(observed.size, i + 1))
        fixed_prec.append(np.zeros(observed.size))

    cols = np.concatenate(cols).astype(int)
    n_obs = cols.size
    obs_matrix = sparse.csr_matrix(
        (np.ones(n_obs), (np.arange(n_obs), cols)), shape=(n_obs, d)
    )
    values = np.concatenate(values)
    bilinear = np.concatenate(bilinear).astype(int)
    hyper = np.concatenate(hyper).astype(int)
    fixed_prec = np.concatenate(fixed_prec)
    T0, beta0, links, psi0 = _initial_values(rps, F, years, cal_full)
    theta0 = np.zeros(d)
    theta0[:n_years] = T0
    theta0[beta_slice] = beta0
    for i, (intercept, slope) in enumerate(links):
        theta0[alpha_start + 2 * i] = intercept
        theta0[alpha_start + 2 * i + 1] = slope

    hyper_names = tuple(["rho0"] + [f"rho{rp.nest_index}" for rp in rps])
    n_hyper = len(hyper_names)
    lgm = LatentGaussianModel(
        parameter_names=names,
        hyper_names=hyper_names,
        n_local=n_years,
        prior_fixed=prior_fixed,
        prior_scaled=((0, eta_block),),
        obs_values=values,
        obs_matrix=obs_matrix,
        obs_bilinear=bilinear,
        obs_hyper=hyper,
        obs_fixed_precision=fixed_prec,
        hyper_shape=np.full(n_hyper, config.hyper_shape),
        hyper_rate=np.full(n_hyper, config.hyper_rate),
        initial_theta=theta0,
        initial_hyper=psi0,
        latent_years=years,
        kind=kind,
        n_nests=n_rp,
        metadata={
            "prior_variance": config.prior_variance,
            "calibration_variance": config.calibration_variance,
            "calibration_window": list(config.calibration),
            "latent_interval": [config.first_year, config.last_year],
            "reduced_proxies": [
                {"nest": rp.nest_index, "method": getattr(rp.method, "value", str(rp.method))}
                for rp in rps
            ],
        },
    )
    logger.info(
        f"Assembled {kind.value}: {lgm.n_local} latent, {lgm.n_fixed} fixed effects, "
        f"{lgm.n_hyper} hyperparameters, {lgm.n_obs} observations"
    )
    return lgm
