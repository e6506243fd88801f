"""
Nested Laplace inference for LatentGaussianModel.

The hyperparameter posterior is explored around its mode; every explored
point carries the Gaussian conditional of the latent field, and posterior
marginals are the weighted mixtures of those conditionals.
"""

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import integrate, interpolate, optimize, sparse, stats

from ._core import ArrowheadCholesky
from .const import INTERVAL_LEVELS
from .exceptions import ConvergenceError, SingularPrecisionError
from .model import LOG_2PI, LatentGaussianModel, log_joint

logger = logging.getLogger(__name__)

_DRAW_CHUNK = 1000


@dataclass(frozen=True)
class EngineConfig:
    newton_tol: float = 1e-9
    newton_max_iter: int = 200
    fd_step: float = 1e-4
    hessian_step: float = 5e-3
    gtol: float = 1e-6
    max_iter: int = 200
    grid_step: float = 1.0
    grid_extent: float = 2.5
    max_grid_dim: int = 2
    ccd_f0: float = 1.1
    n_jobs: Optional[int] = None
    levels: Tuple[float, ...] = INTERVAL_LEVELS


@dataclass(frozen=True, eq=False)
class GaussianConditional:
    """Gaussian approximation of p(theta | psi, y) at its mode."""

    psi: np.ndarray
    mode: np.ndarray
    precision: sparse.csr_matrix
    factor: ArrowheadCholesky
    newton_steps: int

    @property
    def logdet(self) -> float:
        return self.factor.logdet

    def variances(self) -> np.ndarray:
        return self.factor.marginal_variances()

    def covariance(self) -> np.ndarray:
        return self.factor.covariance()

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """(n x dim) draws."""
        z = rng.standard_normal((self.mode.size, n))
        return (self.mode[:, None] + self.factor.solve_lt(z)).T


def _factorize(lgm: LatentGaussianModel, precision) -> ArrowheadCholesky:
    try:
        return ArrowheadCholesky(precision, lgm.n_local)
    except SingularPrecisionError:
        values, vectors = np.linalg.eigh(precision.toarray())
        null = vectors[:, 0]
        name = lgm.parameter_names[int(np.argmax(np.abs(null)))]
        logger.error(f"Singular posterior precision, smallest eigenvalue {values[0]:.3e} along {name}")
        raise SingularPrecisionError(
            f"Posterior precision is singular (eigenvalue {values[0]:.3e}); "
            f"null direction dominated by '{name}'",
            direction=name,
        )


def _log_density(lgm, theta, prior, tau) -> float:
    resid = lgm.obs_values - lgm.predictor(theta)
    return float(-0.5 * theta @ (prior @ theta) - 0.5 * np.sum(tau * resid**2))


def gaussian_conditional(
    lgm: LatentGaussianModel,
    psi,
    initial=None,
    config: EngineConfig = EngineConfig(),
) -> GaussianConditional:
    """
    Mode and precision of p(theta | psi, y) by Newton iteration.

    With Gaussian observations the Newton step uses the Gauss-Newton
    curvature J^T W J; for a predictor that is linear in theta the first step
    lands on the exact posterior mean and the second confirms it. Bilinear
    link terms are handled by iterating on the linearized predictor with
    step halving.

    Raises:
        SingularPrecisionError: precision not positive definite, with the
            dominant parameter of the null direction.
        ConvergenceError: no convergence within `config.newton_max_iter`.
    """
    psi = lgm.check_hyper(psi)
    if not np.all(np.isfinite(psi)):
        raise ValueError(f"Non-finite hyperparameters {psi}")
    prior = lgm.prior_precision(psi)
    tau = lgm.obs_precision(psi)
    theta = np.array(lgm.initial_theta if initial is None else initial, dtype=float)
    current = _log_density(lgm, theta, prior, tau)

    steps = 0
    for _ in range(config.newton_max_iter):
        J = lgm.jacobian(theta)
        resid = lgm.obs_values - lgm.predictor(theta)
        precision = (prior + J.T @ sparse.diags(tau) @ J).tocsr()
        factor = _factorize(lgm, precision)
        gradient = J.T @ (tau * resid) - prior @ theta
        delta = factor.solve(gradient)
        if np.max(np.abs(delta), initial=0.0) <= config.newton_tol * (1.0 + np.max(np.abs(theta), initial=0.0)):
            break

        t = 1.0
        candidate = theta + delta
        value = _log_density(lgm, candidate, prior, tau)
        while value < current and t > 1e-8:
            t *= 0.5
            candidate = theta + t * delta
            value = _log_density(lgm, candidate, prior, tau)
        if value < current:
            # no ascent left at machine precision
            break
        theta, current = candidate, value
        steps += 1
    else:
        logger.error(f"Newton iteration did not converge at psi={psi}")
        raise ConvergenceError(f"Newton iteration did not converge in {config.newton_max_iter} steps")

    return GaussianConditional(psi=psi, mode=theta, precision=precision, factor=factor, newton_steps=steps)


def log_hyper_posterior(
    lgm: LatentGaussianModel,
    psi,
    conditional: Optional[GaussianConditional] = None,
    config: EngineConfig = EngineConfig(),
) -> float:
    """
    Laplace approximation p(psi) p(theta|psi) p(y|theta) / p~(theta|psi, y)
    evaluated at theta = theta*(psi), up to an additive constant.
    """
    psi = lgm.check_hyper(psi)
    cond = conditional if conditional is not None else gaussian_conditional(lgm, psi, config=config)
    log_gaussian_at_mode = 0.5 * cond.logdet - 0.5 * lgm.dim * LOG_2PI
    return log_joint(lgm, cond.mode, psi) - log_gaussian_at_mode


@dataclass(frozen=True, eq=False)
class HyperPoint:
    """One integration point of the hyperparameter posterior."""

    psi: np.ndarray
    z: np.ndarray
    log_posterior: float
    weight: float
    mode: np.ndarray = field(repr=False)
    variances: np.ndarray = field(repr=False)


def _central_hessian(f, x, h):
    k = x.size
    H = np.empty((k, k))
    f0 = f(x)
    step = np.eye(k) * h
    for i in range(k):
        H[i, i] = (f(x + step[i]) - 2.0 * f0 + f(x - step[i])) / h**2
        for j in range(i + 1, k):
            H[i, j] = H[j, i] = (
                f(x + step[i] + step[j])
                - f(x + step[i] - step[j])
                - f(x - step[i] + step[j])
                + f(x - step[i] - step[j])
            ) / (4.0 * h**2)
    return H


def grid_design(dim: int, step: float = 1.0, extent: float = 2.5):
    """Regular grid in z-space with unit volume factors."""
    n = int(math.floor(extent / step + 1e-12))
    ticks = step * np.arange(-n, n + 1)
    points = np.array(list(itertools.product(ticks, repeat=dim)), dtype=float)
    return points, np.zeros(len(points))


def ccd_design(dim: int, f0: float = 1.1):
    """
    Central composite design: centre, 2*dim axial points and a 2^min(dim, 6)
    corner block, every non-centre point on radius f0 * sqrt(dim).

    Returns:
        tuple: (points, log volume factors). The factors make the weighted
        second moments exact when the hyperposterior is Gaussian.
    """
    if f0 <= 1.0:
        raise ValueError(f"f0 must exceed 1, got {f0}")
    base = min(dim, 6)
    corners = np.array(list(itertools.product([-1.0, 1.0], repeat=base)))
    if dim > base:
        generators = [
            c for size in range(base, 1, -1) for c in itertools.combinations(range(base), size)
        ]
        extra = [np.prod(corners[:, list(g)], axis=1) for g in generators[: dim - base]]
        corners = np.column_stack([corners] + extra)
    corners = f0 * corners
    axial = f0 * math.sqrt(dim) * np.vstack([np.eye(dim), -np.eye(dim)])
    points = np.vstack([np.zeros((1, dim)), axial, corners])
    n_points = len(points)
    log_factor = dim * f0**2 / 2.0 - math.log((n_points - 1) * (f0**2 - 1.0))
    factors = np.full(n_points, log_factor)
    factors[0] = 0.0
    return points, factors


def _mode_search(lgm, config):
    cache = {"theta": lgm.initial_theta.copy()}
    trace = []

    def objective(psi):
        cond = gaussian_conditional(lgm, psi, initial=cache["theta"], config=config)
        cache["theta"] = cond.mode
        return -log_hyper_posterior(lgm, psi, cond)

    def gradient(psi):
        g = np.empty(psi.size)
        for i in range(psi.size):
            h = config.fd_step * max(1.0, abs(psi[i]))
            e = np.zeros(psi.size)
            e[i] = h
            g[i] = (objective(psi + e) - objective(psi - e)) / (2.0 * h)
        return g

    def record(xk):
        trace.append(xk.copy())
        logger.debug(f"Hyper mode search iteration {len(trace)}: psi={np.round(xk, 4)}")

    x0 = np.asarray(lgm.initial_hyper, dtype=float)
    result = optimize.minimize(
        objective,
        x0,
        jac=gradient,
        method="BFGS",
        callback=record,
        options={"gtol": config.gtol, "maxiter": config.max_iter},
    )
    if result.status == 1 or not np.all(np.isfinite(result.x)):
        logger.error(f"Hyperparameter mode search failed: {result.message}")
        raise ConvergenceError(f"Hyperparameter mode search failed: {result.message}", trace=trace)
    if not result.success:
        logger.warning(f"Mode search stopped with '{result.message}' at |g|={np.max(np.abs(result.jac)):.2e}")
    return result.x, objective, cache["theta"]


def explore_hyper(lgm: LatentGaussianModel, config: EngineConfig = EngineConfig()) -> List[HyperPoint]:
    """
    Locates the mode of log p~(psi | y) by BFGS with finite-difference
    gradients, standardizes psi with the Hessian at the mode, and evaluates a
    grid (K <= 2) or a central composite design (K > 2) in z-space.

    Returns:
        list of HyperPoint: ordered as the design, weights normalized to 1.

    Raises:
        ConvergenceError: the optimizer hit the iteration limit.
    """
    K = lgm.n_hyper
    if K < 1:
        raise ValueError("Hyperparameter exploration needs at least one hyperparameter")
    started = time.perf_counter()
    psi_mode, objective, theta_mode = _mode_search(lgm, config)

    hessian = _central_hessian(objective, psi_mode, config.hessian_step)
    eigvals, eigvecs = np.linalg.eigh(hessian)
    if np.any(eigvals <= 0):
        logger.warning(f"Hessian at the mode is not positive definite: {eigvals}")
    eigvals = np.maximum(np.abs(eigvals), 1e-8 * max(np.max(np.abs(eigvals)), 1.0))
    scale = eigvecs / np.sqrt(eigvals)[None, :]

    if K <= config.max_grid_dim:
        design, log_factors = grid_design(K, config.grid_step, config.grid_extent)
    else:
        design, log_factors = ccd_design(K, config.ccd_f0)

    def evaluate(z):
        psi = psi_mode + scale @ z
        cond = gaussian_conditional(lgm, psi, initial=theta_mode, config=config)
        return psi, log_hyper_posterior(lgm, psi, cond), cond.mode, cond.variances()

    with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
        results = list(pool.map(evaluate, design))

    log_post = np.array([r[1] for r in results])
    log_w = log_post + log_factors
    log_w -= log_w.max()
    weights = np.exp(log_w)
    weights /= weights.sum()

    points = [
        HyperPoint(psi=r[0], z=z, log_posterior=float(r[1]), weight=float(w), mode=r[2], variances=r[3])
        for r, z, w in zip(results, design, weights)
    ]
    logger.info(
        f"Explored {len(points)} hyperparameter points (K={K}) in {time.perf_counter() - started:.2f}s; "
        f"mode psi={np.round(psi_mode, 3)}"
    )
    return points


def _mixture_quantiles(means, sds, weights, probs, iterations: int = 80):
    """
    Vectorized bisection for mixture quantiles.

    Parameters:
        means, sds (np.ndarray): (n_targets x n_components).
        weights (np.ndarray): (n_components,).
        probs (np.ndarray): (n_targets,) probabilities.
    """
    lo = np.min(means - 12.0 * sds, axis=1)
    hi = np.max(means + 12.0 * sds, axis=1)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        cdf = stats.norm.cdf((mid[:, None] - means) / sds) @ weights
        below = cdf < probs
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


@dataclass(frozen=True, eq=False)
class PosteriorMarginal:
    """Gaussian mixture marginal sum_k w_k N(mean_k, variance_k)."""

    name: str
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    @property
    def sds(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.variances, 1e-300))

    def density(self, x):
        x = np.asarray(x, dtype=float)
        values = stats.norm.pdf((x[..., None] - self.means) / self.sds) / self.sds
        return values @ self.weights

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return stats.norm.cdf((x[..., None] - self.means) / self.sds) @ self.weights

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        if np.any((p <= 0) | (p >= 1)):
            raise ValueError("Quantile probabilities must lie in (0, 1)")
        flat = p.ravel()
        n = flat.size
        out = _mixture_quantiles(
            np.tile(self.means, (n, 1)), np.tile(self.sds, (n, 1)), self.weights, flat
        )
        return out.reshape(p.shape) if p.ndim else float(out[0])

    def mean(self) -> float:
        return float(self.weights @ self.means)

    def variance(self) -> float:
        return float(self.weights @ (self.variances + self.means**2) - self.mean() ** 2)

    def sd(self) -> float:
        return math.sqrt(max(self.variance(), 0.0))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        components = rng.choice(self.weights.size, size=n, p=self.weights)
        return self.means[components] + self.sds[components] * rng.standard_normal(n)

    def grid(self, n: int = 200, width: float = 5.0) -> np.ndarray:
        return np.linspace(self.mean() - width * self.sd(), self.mean() + width * self.sd(), n)


def marginal(lgm: LatentGaussianModel, points: Sequence[HyperPoint], parameter) -> PosteriorMarginal:
    """
    Posterior marginal of one element of theta as a mixture over the explored
    points. The conditionals are Gaussian at each point, so the simplified
    Laplace correction is the identity here.

    Raises:
        KeyError: unknown parameter.
    """
    i = lgm.index(parameter)
    return PosteriorMarginal(
        name=lgm.parameter_names[i],
        means=np.array([p.mode[i] for p in points]),
        variances=np.array([p.variances[i] for p in points]),
        weights=np.array([p.weight for p in points]),
    )


@dataclass(frozen=True, eq=False)
class HyperMarginal:
    name: str
    values: np.ndarray
    density: np.ndarray
    atoms: bool


def hyper_marginal(
    lgm: LatentGaussianModel, points: Sequence[HyperPoint], index: int, n_grid: int = 200
) -> HyperMarginal:
    """
    Marginal of psi[index]. For a one- or two-dimensional grid the log
    posterior is refined by cubic interpolation in z-space; for a CCD the
    weighted design points are returned as atoms.
    """
    K = lgm.n_hyper
    name = lgm.hyper_names[index]
    psi = np.array([p.psi for p in points])
    z = np.array([p.z for p in points])
    log_post = np.array([p.log_posterior for p in points])
    weights = np.array([p.weight for p in points])

    if K == 1:
        order = np.argsort(psi[:, 0])
        spline = interpolate.CubicSpline(psi[order, 0], log_post[order])
        grid = np.linspace(psi[order[0], 0], psi[order[-1], 0], n_grid)
        dens = np.exp(spline(grid) - np.max(spline(grid)))
        dens /= integrate.trapezoid(dens, grid)
        return HyperMarginal(name, grid, dens, atoms=False)

    if K == 2 and len(points) >= 16:
        ticks = np.unique(z[:, 0])
        table = log_post.reshape(ticks.size, ticks.size)
        interp = interpolate.RegularGridInterpolator((ticks, ticks), table, method="cubic")
        fine = np.linspace(ticks[0], ticks[-1], 41)
        zz = np.array(list(itertools.product(fine, fine)))
        # affine map z -> psi recovered from the design
        A, *_ = np.linalg.lstsq(np.column_stack([z, np.ones(len(z))]), psi, rcond=None)
        fine_psi = np.column_stack([zz, np.ones(len(zz))]) @ A
        w = np.exp(interp(zz) - np.max(interp(zz)))
        edges = np.linspace(fine_psi[:, index].min(), fine_psi[:, index].max(), n_grid + 1)
        hist, _ = np.histogram(fine_psi[:, index], bins=edges, weights=w, density=True)
        return HyperMarginal(name, 0.5 * (edges[1:] + edges[:-1]), hist, atoms=False)

    order = np.argsort(psi[:, index])
    return HyperMarginal(name, psi[order, index], weights[order], atoms=True)


def hyper_summary(lgm: LatentGaussianModel, points: Sequence[HyperPoint]) -> pd.DataFrame:
    """Posterior mean/sd of every psi and of the matching variance exp(-psi)."""
    psi = np.array([p.psi for p in points])
    w = np.array([p.weight for p in points])
    rows = []
    for h, name in enumerate(lgm.hyper_names):
        sigma2 = np.exp(-psi[:, h])
        m_psi = w @ psi[:, h]
        m_s2 = w @ sigma2
        rows.append(
            {
                "hyperparameter": name,
                "mean": m_psi,
                "sd": math.sqrt(max(w @ psi[:, h] ** 2 - m_psi**2, 0.0)),
                "sigma2_mean": m_s2,
                "sigma2_sd": math.sqrt(max(w @ sigma2**2 - m_s2**2, 0.0)),
            }
        )
    return pd.DataFrame(rows)


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    theta: np.ndarray
    psi: np.ndarray
    component: np.ndarray
    names: Tuple[str, ...]


def sample_posterior(
    lgm: LatentGaussianModel,
    points: Sequence[HyperPoint],
    n: int,
    seed: int,
    indices=None,
    config: EngineConfig = EngineConfig(),
) -> PosteriorDraws:
    """
    Draws psi* by weight and theta from the matching Gaussian conditional.
    Each design point gets its own random stream spawned from `seed`.

    Parameters:
        indices (sequence or None): restrict the stored theta columns.
    """
    if n < 0:
        raise ValueError(f"Number of draws must be >= 0, got {n}")
    idx = np.arange(lgm.dim) if indices is None else np.asarray([lgm.index(i) for i in indices])
    names = tuple(lgm.parameter_names[i] for i in idx)
    theta = np.empty((n, idx.size))
    psi = np.empty((n, lgm.n_hyper))
    weights = np.array([p.weight for p in points])
    rng = np.random.default_rng(seed)
    components = rng.choice(len(points), size=n, p=weights) if n else np.zeros(0, dtype=int)
    streams = np.random.SeedSequence(seed).spawn(len(points))

    for k in np.unique(components):
        rows = np.flatnonzero(components == k)
        point = points[k]
        cond = gaussian_conditional(lgm, point.psi, initial=point.mode, config=config)
        rng_k = np.random.default_rng(streams[k])
        for chunk in range(0, rows.size, _DRAW_CHUNK):
            part = rows[chunk : chunk + _DRAW_CHUNK]
            theta[part] = cond.draw(rng_k, part.size)[:, idx]
        psi[rows] = point.psi
    return PosteriorDraws(theta=theta, psi=psi, component=components, names=names)


@dataclass(frozen=True, eq=False)
class Reconstruction:
    """Per-year posterior summary of the latent temperature."""

    years: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    bands: Dict[float, Tuple[np.ndarray, np.ndarray]]

    def interval(self, level: float = 0.95):
        try:
            return self.bands[level]
        except KeyError:
            raise KeyError(f"No {level:.0%} band; available: {sorted(self.bands)}")

    @property
    def lower(self) -> np.ndarray:
        return self.interval(0.95)[0]

    @property
    def upper(self) -> np.ndarray:
        return self.interval(0.95)[1]

    def window(self, start: int, end: int) -> "Reconstruction":
        keep = (self.years >= start) & (self.years <= end)
        return Reconstruction(
            years=self.years[keep],
            mean=self.mean[keep],
            sd=self.sd[keep],
            bands={lvl: (lo[keep], hi[keep]) for lvl, (lo, hi) in self.bands.items()},
        )

    def to_frame(self) -> pd.DataFrame:
        lower, upper = self.interval(0.95)
        return pd.DataFrame(
            {
                "year": self.years.astype(int),
                "mean": self.mean,
                "sd": self.sd,
                "q025": lower,
                "q975": upper,
            }
        )

    @classmethod
    def from_draws(cls, years, draws, levels=INTERVAL_LEVELS) -> "Reconstruction":
        """Empirical summary of a (n_draws x n_years) matrix."""
        draws = np.asarray(draws, dtype=float)
        bands = {}
        for level in levels:
            a = (1.0 - level) / 2.0
            lo, hi = np.quantile(draws, [a, 1.0 - a], axis=0)
            bands[level] = (lo, hi)
        return cls(np.asarray(years), draws.mean(axis=0), draws.std(axis=0, ddof=1), bands)


def reconstruct(
    lgm: LatentGaussianModel,
    points: Sequence[HyperPoint],
    levels: Sequence[float] = INTERVAL_LEVELS,
) -> Reconstruction:
    """Marginal mean, sd and central bands of every latent T_t."""
    if lgm.latent_years is None:
        raise ValueError("Model has no latent year grid")
    n = lgm.n_local
    weights = np.array([p.weight for p in points])
    means = np.column_stack([p.mode[:n] for p in points])
    variances = np.column_stack([p.variances[:n] for p in points])
    sds = np.sqrt(np.maximum(variances, 1e-300))
    mean = means @ weights
    sd = np.sqrt(np.maximum((variances + means**2) @ weights - mean**2, 0.0))
    bands = {}
    for level in levels:
        a = (1.0 - level) / 2.0
        lo = _mixture_quantiles(means, sds, weights, np.full(n, a))
        hi = _mixture_quantiles(means, sds, weights, np.full(n, 1.0 - a))
        bands[float(level)] = (lo, hi)
    return Reconstruction(np.asarray(lgm.latent_years), mean, sd, bands)


@dataclass(frozen=True, eq=False)
class NestedLaplaceFit:
    lgm: LatentGaussianModel
    points: List[HyperPoint]
    config: EngineConfig
    seconds: float

    def marginal(self, parameter) -> PosteriorMarginal:
        return marginal(self.lgm, self.points, parameter)

    def reconstruct(self) -> Reconstruction:
        return reconstruct(self.lgm, self.points, self.config.levels)

    def sample(self, n: int, seed: int, indices=None) -> PosteriorDraws:
        return sample_posterior(self.lgm, self.points, n, seed, indices, self.config)

    def hyper_summary(self) -> pd.DataFrame:
        return hyper_summary(self.lgm, self.points)

    def coefficient_summary(self) -> pd.DataFrame:
        return coefficient_summary(self)


def fit_nested_laplace(lgm: LatentGaussianModel, config: EngineConfig = EngineConfig()) -> NestedLaplaceFit:
    started = time.perf_counter()
    points = explore_hyper(lgm, config)
    return NestedLaplaceFit(lgm, points, config, time.perf_counter() - started)


def coefficient_summary(fit: NestedLaplaceFit, level: float = 0.95) -> pd.DataFrame:
    """Mean, sd and central interval of every fixed effect, with a flag for intervals excluding 0."""
    a = (1.0 - level) / 2.0
    rows = []
    for name in fit.lgm.fixed_names:
        m = fit.marginal(name)
        lo, hi = m.quantile(np.array([a, 1.0 - a]))
        rows.append(
            {
                "parameter": name,
                "mean": m.mean(),
                "sd": m.sd(),
                "q025": lo,
                "q975": hi,
                "excludes_zero": bool(lo > 0 or hi < 0),
            }
        )
    return pd.DataFrame(rows)
