import json
import logging
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass
from functools import wraps
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from . import datafiles, plots
from .config import RunConfig
from .const import Engine, ModelKind, ReductionMethod
from .error_codes import error_dict
from .exceptions import PaleoReconException, StageError
from .inla import EngineConfig, NestedLaplaceFit, Reconstruction, fit_nested_laplace
from .mcmc import Chain, chain_summary, gibbs_wf
from .model import LatentGaussianModel, ModelConfig, assemble
from .reduce import ReducedProxy, reduce_all, rp_correlation_matrix
from .scoring import ScoreReport, score_table, validation_suite
from .splines import SplineBasis, bspline_basis, select_k
from .timeseries import (
    assign_nests,
    normal_score_transform,
    screen_correlation,
    screen_coverage,
    screen_missing,
    transform_forcings,
)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

STAGES = ("reduce", "fit", "reconstruct", "validate", "all")
_RECOVERABLE = (PaleoReconException, ValueError, KeyError, FileNotFoundError, np.linalg.LinAlgError)


def check_loaded(func):
    """Decorator to check that the input data was ingested before executing a function."""

    @wraps(func)
    def wrapper(self, *args, **kwargs):
        if not self._loaded:
            raise PaleoReconException("Input data not loaded; call load() first")
        return func(self, *args, **kwargs)

    return wrapper


@dataclass(frozen=True, eq=False)
class FitResult:
    """Fit of one model with one reduction method on either engine."""

    method: ReductionMethod
    lgm: LatentGaussianModel
    engine: Engine
    seconds: float
    nested: Optional[NestedLaplaceFit] = None
    chain: Optional[Chain] = None

    def reconstruct(self) -> Reconstruction:
        if self.nested is not None:
            return self.nested.reconstruct()
        return self.chain.reconstruct()

    def coefficient_table(self) -> pd.DataFrame:
        if self.nested is not None:
            return self.nested.coefficient_summary()
        table = chain_summary(self.chain)
        table = table[~table["parameter"].str.startswith("sigma2")].reset_index(drop=True)
        table["excludes_zero"] = (table["q025"] > 0) | (table["q975"] < 0)
        return table[["parameter", "mean", "sd", "q025", "q975", "excludes_zero"]]

    def window_draws(self, window, n: int, seed: int) -> np.ndarray:
        """Latent draws (n x years of window)."""
        names = [f"T[{y}]" for y in range(window[0], window[1] + 1)]
        if self.nested is not None:
            return self.nested.sample(n, seed, indices=names).theta
        return np.column_stack([self.chain.column(name) for name in names])


class ReconstructionAPI:
    """
    Runs the reconstruction stages for one RunConfig: ingestion and
    screening, data reduction, model fit, reconstruction and validation.

    Every stage is timed and any failure inside it is re-raised as a
    StageError carrying the stage's exit code.

    Parameters:
        config (RunConfig): Run configuration.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.timings: Dict[str, float] = {}
        self._loaded = False
        self._reduced: Dict[ReductionMethod, Dict[int, ReducedProxy]] = {}
        self._fits: Dict[ReductionMethod, FitResult] = {}
        self._basis: Optional[SplineBasis] = None

    def _error_message(self, exit_code: int) -> str:
        return error_dict.get(exit_code, f"Unknown stage (code: {exit_code})")

    @contextmanager
    def stage(self, name: str):
        started = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except _RECOVERABLE as e:
            logger.error(f"Stage {name} failed: {e}")
            raise StageError(name, str(e)) from e
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - started

    @property
    def model_config(self) -> ModelConfig:
        cfg = self.config
        return ModelConfig(first_year=cfg.latent[0], last_year=cfg.latent[1], calibration=cfg.calibration)

    def load(self) -> "ReconstructionAPI":
        cfg = self.config
        needs_forcings = cfg.kind.has_forcings or cfg.engine is Engine.GIBBS
        with self.stage("CONFIG"):
            cfg.check_paths("proxies", "temperature", *(("forcings",) if needs_forcings else ()))
            if cfg.smoothed_reference:
                cfg.check_paths("smoothed_reference")

        with self.stage("INGEST"):
            proxies = datafiles.read_proxies(cfg.proxies)
            self.temperature = datafiles.read_temperature(cfg.temperature)
            self.forcings = None
            if needs_forcings:
                raw = datafiles.read_forcings(cfg.forcings)
                self.forcings = transform_forcings(*raw, calibration=cfg.calibration)
            self.smoothed_reference = (
                datafiles.read_temperature(cfg.smoothed_reference) if cfg.smoothed_reference else None
            )
            if np.isnan(self.temperature.window(*cfg.calibration)).any():
                raise PaleoReconException(f"Temperature series is incomplete over {cfg.calibration}")

        with self.stage("SCREEN"):
            if cfg.normal_score:
                proxies = [normal_score_transform(p) for p in proxies]
            kept = [
                p
                for p in proxies
                if screen_coverage(p, cfg.calibration[1]) and screen_missing(p, cfg.calibration, cfg.max_missing)
            ]
            logger.info(f"Missing-data screen kept {len(kept)} of {len(proxies)} proxies")
            if cfg.correlation_screen:
                kept = screen_correlation(kept, self.temperature, cfg.calibration, cfg.fdr_level)
            if not kept:
                raise PaleoReconException("No proxy survived screening")
            self.proxies = kept
            self.nests = assign_nests(kept, cfg.calibration[1], cfg.calibration[0])

        self._loaded = True
        return self

    @check_loaded
    def active_nests(self):
        """Non-empty nests; only the earliest one (longest reduced proxy) for N = 1."""
        nests = [n for n in self.nests if not n.is_empty]
        return nests[:1] if self.config.n_nests == 1 else nests

    @check_loaded
    def reduce(self, method) -> Dict[int, ReducedProxy]:
        method = ReductionMethod(method)
        if method not in self._reduced:
            cfg = self.config
            with self.stage("REDUCE"):
                rps = reduce_all(
                    self.active_nests(),
                    self.temperature,
                    [method],
                    seed=cfg.seed,
                    n_jobs=cfg.threads,
                    folds=cfg.folds,
                    slices=cfg.slices,
                    r2_min=cfg.r2_min,
                )
            self._reduced[method] = {nest: rp for (nest, _), rp in rps.items()}
        return self._reduced[method]

    @check_loaded
    def rp_correlations(self) -> Dict[int, pd.DataFrame]:
        """Per nest, the correlation matrix of the configured methods' reduced proxies."""
        by_nest: Dict[int, dict] = {}
        for method in self.config.methods:
            for nest, rp in self.reduce(method).items():
                by_nest.setdefault(nest, {})[method] = rp
        return {nest: rp_correlation_matrix(rps) for nest, rps in by_nest.items()}

    @check_loaded
    def spline_basis(self) -> Optional[SplineBasis]:
        cfg = self.config
        if not cfg.kind.has_splines:
            return None
        if self._basis is None:
            with self.stage("FIT"):
                years = np.arange(cfg.latent[0], cfg.latent[1] + 1)
                K = cfg.k_spline
                if K is None:
                    selection = select_k(
                        self.temperature.restrict(*cfg.calibration), cfg.r2_min, years.size
                    )
                    K = selection.k_full
                    logger.info(f"Spline basis: k={selection.k_calibration} on calibration, K={K} overall")
                self._basis = bspline_basis(years, K)
        return self._basis

    @check_loaded
    def model(self, method) -> LatentGaussianModel:
        rps = list(self.reduce(method).values())
        basis = self.spline_basis()
        with self.stage("FIT"):
            return assemble(self.config.kind, rps, self.forcings, basis, self.temperature, self.model_config)

    @check_loaded
    def fit(self, method) -> FitResult:
        method = ReductionMethod(method)
        if method in self._fits:
            return self._fits[method]
        cfg = self.config
        lgm = self.model(method)
        with self.stage("FIT"):
            started = time.perf_counter()
            if cfg.engine is Engine.GIBBS:
                if cfg.kind is not ModelKind.WF or lgm.n_nests != 1:
                    raise PaleoReconException("The Gibbs engine supports model WF with one nest only")
                rp = next(iter(self.reduce(method).values()))
                chain = gibbs_wf(
                    rp,
                    self.forcings,
                    self.temperature,
                    cfg.gibbs_iterations,
                    cfg.gibbs_burn_in,
                    cfg.seed,
                    self.model_config,
                )
                result = FitResult(method, lgm, cfg.engine, time.perf_counter() - started, chain=chain)
            else:
                nested = fit_nested_laplace(lgm, EngineConfig(n_jobs=cfg.threads))
                result = FitResult(method, lgm, cfg.engine, time.perf_counter() - started, nested=nested)
        self._fits[method] = result
        return result

    @check_loaded
    def reconstruct(self, method) -> Reconstruction:
        fit = self.fit(method)
        with self.stage("RECONSTRUCT"):
            return fit.reconstruct()

    @check_loaded
    def validate(self, method) -> ScoreReport:
        cfg = self.config
        fit = self.fit(method)
        reconstruction = self.reconstruct(method)
        with self.stage("VALIDATE"):
            draws = fit.window_draws(cfg.validation, cfg.crps_draws, cfg.seed)
            return validation_suite(
                reconstruction,
                self.temperature,
                cfg.validation,
                cfg.calibration,
                draws=draws,
                smoothed_reference=self.smoothed_reference,
                model=cfg.kind.value,
                n_nests=fit.lgm.n_nests,
                method=ReductionMethod(method).value,
                cutoff_period=cfg.cutoff_period,
                filter_order=cfg.filter_order,
            )

    def run_dir(self, method) -> Path:
        cfg = self.config
        return cfg.output_path / f"{cfg.kind.value}_N{cfg.n_nests}_{ReductionMethod(method).value}"

    @check_loaded
    def export(self, until: str = "all") -> List[Path]:
        """Runs every configured method up to `until` and writes its artifacts."""
        if until not in STAGES:
            raise PaleoReconException(f"Unknown stage '{until}'; expected one of {STAGES}")
        level = STAGES.index(until)
        cfg = self.config
        out = cfg.output_path
        written: List[Path] = []
        reports = []

        for method in cfg.methods:
            rps = self.reduce(method)
            folder = self.run_dir(method)
            with self.stage("EXPORT"):
                written.append(datafiles.write_reduced_proxies(folder / "reduced_proxies.csv", rps))
                written.append(datafiles.write_reduction_summary(folder / "reduction_summary.csv", rps))
            if level < STAGES.index("fit"):
                continue

            fit = self.fit(method)
            with self.stage("EXPORT"):
                written.append(datafiles.write_frame(folder / "coefficients.csv", fit.coefficient_table()))
                written.append(self._write_json(folder / "model_summary.json", fit.lgm.summary()))
                if self._basis is not None:
                    written.append(datafiles.write_basis(folder / "basis.csv", self._basis))
                if fit.nested is not None:
                    marginals = [fit.nested.marginal(n) for n in fit.lgm.fixed_names]
                    written.append(datafiles.write_marginals(folder / "marginals.csv", marginals))
                    written.append(datafiles.write_frame(folder / "hyperparameters.csv", fit.nested.hyper_summary()))
                    written.append(plots.plot_coefficients(marginals, folder / "coefficients.svg"))
                else:
                    written.append(datafiles.write_chain(folder / "chain.csv", fit.chain))
                    written.append(datafiles.write_frame(folder / "chain_summary.csv", chain_summary(fit.chain)))
            if level < STAGES.index("reconstruct"):
                continue

            reconstruction = self.reconstruct(method)
            with self.stage("EXPORT"):
                written.append(datafiles.write_reconstruction(folder / "reconstruction.csv", reconstruction))
                written.append(
                    plots.plot_reconstruction(
                        reconstruction,
                        folder / "reconstruction.svg",
                        observed=self.temperature,
                        title=f"{cfg.kind.value}, N={fit.lgm.n_nests}, {ReductionMethod(method).value}",
                    )
                )
            if level < STAGES.index("validate"):
                continue
            reports.append(self.validate(method))

        with self.stage("EXPORT"):
            if len(cfg.methods) > 1:
                written.append(datafiles.write_rp_correlations(out / "rp_correlations.csv", self.rp_correlations()))
            if reports:
                written.append(datafiles.write_scores(out / "scores.csv", score_table(reports)))
        return written

    @staticmethod
    def _write_json(path: Path, payload: dict) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True, default=str)
            f.write("\n")
        return path

    def manifest(self, artifacts: List[Path], status: int = 0) -> dict:
        out = self.config.output_path
        return {
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "status": status,
            "status_name": self._error_message(status),
            "versions": package_versions(),
            "timings": {k: round(v, 6) for k, v in self.timings.items()},
            "artifacts": sorted({str(Path(p).relative_to(out)) if Path(p).is_relative_to(out) else str(p) for p in artifacts}),
        }

    def write_manifest(self, artifacts: List[Path], status: int = 0) -> Path:
        return self._write_json(self.config.output_path / "manifest.json", self.manifest(artifacts, status))


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in ("paleorecon-py", "numpy", "scipy", "pandas", "scikit-learn", "matplotlib"):
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def run_pipeline(config: RunConfig, until: str = "all") -> int:
    """
    Runs the pipeline and writes its artifacts plus manifest.json.

    Returns:
        int: 0 on success, otherwise the failing stage's exit code.
    """
    api = ReconstructionAPI(config)
    try:
        api.load()
        artifacts = api.export(until)
    except StageError as e:
        logger.error(f"Pipeline aborted: {e}")
        return e.exit_code
    api.write_manifest(artifacts)
    logger.info(f"Pipeline finished; {len(artifacts)} artifacts in {config.output_path}")
    return 0


@dataclass(frozen=True, eq=False)
class EngineComparison:
    coefficients: pd.DataFrame
    timing: pd.DataFrame
    densities: pd.DataFrame


def compare_engines(config: RunConfig, write: bool = True) -> EngineComparison:
    """
    Fits model WF with one reduced proxy on both engines and reports the
    coefficient posteriors side by side, the 95% interval width ratio
    (nested Laplace / Gibbs) and wall-clock times.

    Raises:
        StageError: COMPARE for a model/nest setup the Gibbs engine cannot run.
    """
    if config.kind is not ModelKind.WF or config.n_nests != 1:
        logger.error(f"Engine comparison requested for {config.kind.value} with {config.n_nests} nests")
        raise StageError("COMPARE", "Engine comparison supports model WF with one nest only")

    method = config.methods[0]
    nested_api = ReconstructionAPI(config.replace(engine=Engine.NESTED_LAPLACE)).load()
    gibbs_api = ReconstructionAPI(config.replace(engine=Engine.GIBBS)).load()
    nested = nested_api.fit(method)
    gibbs = gibbs_api.fit(method)

    with nested_api.stage("COMPARE"):
        names = list(nested.lgm.fixed_names)
        left = nested.coefficient_table().set_index("parameter").loc[names]
        right = gibbs.coefficient_table().set_index("parameter").loc[names]
        coefficients = pd.DataFrame(
            {
                "parameter": names,
                "nested_mean": left["mean"].to_numpy(),
                "nested_sd": left["sd"].to_numpy(),
                "gibbs_mean": right["mean"].to_numpy(),
                "gibbs_sd": right["sd"].to_numpy(),
                "width_ratio": ((left["q975"] - left["q025"]) / (right["q975"] - right["q025"])).to_numpy(),
            }
        )
        timing = pd.DataFrame(
            {
                "engine": [Engine.NESTED_LAPLACE.value, Engine.GIBBS.value],
                "seconds": [nested.seconds, gibbs.seconds],
            }
        )
        frames = []
        for name in names:
            m = nested.nested.marginal(name)
            grid = m.grid(200)
            frames.append(pd.DataFrame({"engine": "nested-laplace", "parameter": name, "grid_value": grid, "density": m.density(grid)}))
            draws = gibbs.chain.column(name)
            density, edges = np.histogram(draws, bins=50, density=True)
            frames.append(
                pd.DataFrame({"engine": "gibbs", "parameter": name, "grid_value": 0.5 * (edges[1:] + edges[:-1]), "density": density})
            )
        densities = pd.concat(frames, ignore_index=True)

    if write:
        out = config.output_path
        with nested_api.stage("EXPORT"):
            paths = [
                datafiles.write_frame(out / "compare_coefficients.csv", coefficients),
                datafiles.write_frame(out / "compare_timing.csv", timing),
                datafiles.write_frame(out / "compare_densities.csv", densities),
                plots.plot_coefficients(
                    [nested.nested.marginal(n) for n in names],
                    out / "compare_coefficients.svg",
                    samples={n: gibbs.chain.column(n) for n in names},
                ),
            ]
            nested_api.timings.update({f"GIBBS_{k}": v for k, v in gibbs_api.timings.items()})
            nested_api.write_manifest(paths)
    logger.info(f"Nested Laplace {nested.seconds:.2f}s vs Gibbs {gibbs.seconds:.2f}s")
    return EngineComparison(coefficients, timing, densities)
