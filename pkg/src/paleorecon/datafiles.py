"""
CSV readers and writers.

Input schemas:
    proxies      year, proxy_id, value      (long format, empty value = missing)
    forcings     year, solar, volcanic, co2
    temperature  year, anomaly
"""

import logging
from pathlib import Path
from typing import List, Mapping, Sequence, Tuple

import numpy as np
import pandas as pd

from .exceptions import CoverageError, PaleoReconException
from .timeseries import TimeSeries

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
PROXY_COLUMNS = ["year", "proxy_id", "value"]
FORCING_COLUMNS = ["year", "solar", "volcanic", "co2"]
TEMPERATURE_COLUMNS = ["year", "anomaly"]


def _read(path, columns: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        logger.error(f"Input file {path} does not exist")
        raise FileNotFoundError(f"Input file {path} does not exist")
    frame = pd.read_csv(path, keep_default_na=False, na_values=[""])
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        logger.error(f"{path} lacks columns {missing}")
        raise PaleoReconException(f"{path.name} must have columns {list(columns)}; missing {missing}")
    if frame["year"].isna().any():
        raise PaleoReconException(f"{path.name} has rows without a year")
    frame["year"] = frame["year"].astype(int)
    return frame


def _to_series(years, values, name: str) -> TimeSeries:
    years = np.asarray(years, dtype=int)
    values = np.asarray(values, dtype=float)
    if np.unique(years).size != years.size:
        raise PaleoReconException(f"Series '{name}' has duplicate years")
    start, end = int(years.min()), int(years.max())
    out = np.full(end - start + 1, np.nan)
    out[years - start] = values
    return TimeSeries(start, out, name)


def _write(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path


def read_proxies(path) -> List[TimeSeries]:
    """One TimeSeries per proxy_id, sorted by id, spanning its first to last listed year."""
    frame = _read(path, PROXY_COLUMNS)
    frame["proxy_id"] = frame["proxy_id"].astype(str)
    series = [
        _to_series(group["year"], group["value"], name)
        for name, group in sorted(frame.groupby("proxy_id"), key=lambda g: g[0])
    ]
    logger.info(f"Read {len(series)} proxies from {path}")
    return series


def read_forcings(path) -> Tuple[TimeSeries, TimeSeries, TimeSeries]:
    """Raw (solar, volcanic, co2) series."""
    frame = _read(path, FORCING_COLUMNS)
    return tuple(_to_series(frame["year"], frame[c], c) for c in ("solar", "volcanic", "co2"))


def read_temperature(path) -> TimeSeries:
    frame = _read(path, TEMPERATURE_COLUMNS)
    return _to_series(frame["year"], frame["anomaly"], "anomaly")


def write_proxies(path, proxies: Sequence[TimeSeries]) -> Path:
    frames = [
        pd.DataFrame({"year": p.years, "proxy_id": p.name, "value": p.values}) for p in proxies
    ]
    return _write(pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=PROXY_COLUMNS), path)


def write_forcings(path, solar: TimeSeries, volcanic: TimeSeries, co2: TimeSeries) -> Path:
    start, end = solar.start_year, solar.end_year
    if (volcanic.start_year, volcanic.end_year) != (start, end) or (co2.start_year, co2.end_year) != (start, end):
        raise CoverageError("Forcing series must share one year grid")
    frame = pd.DataFrame(
        {"year": solar.years, "solar": solar.values, "volcanic": volcanic.values, "co2": co2.values}
    )
    return _write(frame, path)


def write_temperature(path, series: TimeSeries) -> Path:
    return _write(pd.DataFrame({"year": series.years, "anomaly": series.values}), path)


def write_reconstruction(path, reconstruction) -> Path:
    """Columns year, mean, sd, q025, q975."""
    return _write(reconstruction.to_frame(), path)


def write_reduced_proxies(path, rps: Mapping) -> Path:
    """Columns nest, method, year, rp_value."""
    frames = [
        pd.DataFrame(
            {"nest": rp.nest_index, "method": rp.method.value, "year": rp.series.years, "rp_value": rp.series.values}
        )
        for rp in rps.values()
    ]
    columns = ["nest", "method", "year", "rp_value"]
    return _write(pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns), path)


def _format_params(params: dict) -> str:
    parts = []
    for key in sorted(params):
        value = params[key]
        parts.append(f"{key}={value:.6g}" if isinstance(value, float) else f"{key}={value}")
    return ";".join(parts)


def write_reduction_summary(path, rps: Mapping) -> Path:
    """Columns nest, method, hyperparameter, adj_r2; hyperparameter as key=value pairs."""
    rows = []
    for rp in rps.values():
        params = rp.model.hyperparameters if rp.model is not None else {}
        rows.append(
            {
                "nest": rp.nest_index,
                "method": rp.method.value,
                "hyperparameter": _format_params(params),
                "adj_r2": rp.adj_r2,
            }
        )
    return _write(pd.DataFrame(rows, columns=["nest", "method", "hyperparameter", "adj_r2"]), path)


def write_rp_correlations(path, matrices: Mapping[int, pd.DataFrame]) -> Path:
    """Columns nest, method_a, method_b, correlation."""
    rows = [
        {"nest": nest, "method_a": a, "method_b": b, "correlation": matrix.loc[a, b]}
        for nest, matrix in sorted(matrices.items())
        for a in matrix.index
        for b in matrix.columns
    ]
    return _write(pd.DataFrame(rows, columns=["nest", "method_a", "method_b", "correlation"]), path)


def write_marginals(path, marginals: Sequence, n_grid: int = 200) -> Path:
    """Columns parameter, grid_value, density."""
    frames = []
    for m in marginals:
        grid = m.grid(n_grid)
        frames.append(pd.DataFrame({"parameter": m.name, "grid_value": grid, "density": m.density(grid)}))
    columns = ["parameter", "grid_value", "density"]
    return _write(pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns), path)


def write_basis(path, basis) -> Path:
    """Columns year, k, value (k is 1-based)."""
    years = np.repeat(basis.years.astype(int), basis.K)
    k = np.tile(np.arange(1, basis.K + 1), basis.years.size)
    return _write(pd.DataFrame({"year": years, "k": k, "value": basis.matrix.ravel()}), path)


def write_chain(path, chain, include_latent: bool = False) -> Path:
    """Columns iteration, parameter, value."""
    return _write(chain.to_frame(include_latent), path)


def write_frame(path, frame: pd.DataFrame) -> Path:
    return _write(frame, path)


def write_scores(path, table: pd.DataFrame) -> Path:
    return _write(table, path)

