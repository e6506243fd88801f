"""
Run configuration: INI file, then environment overrides (paths and thread
count only), then explicit overrides from the command line.

Example file::

    [paths]
    proxies = data/proxies.csv
    forcings = data/forcings.csv
    temperature = data/temperature.csv
    output_dir = out

    [model]
    kind = WF
    methods = SPCR, PCR
    n_nests = 8
    k_spline =
    folds = 10
    slices = 10
    r2_min = 0.70

    [windows]
    calibration = 1900-2000
    validation = 1850-1899
    latent = 1-2000

    [engine]
    engine = nested-laplace
    seed = 42
    threads = 4
    gibbs_iterations = 5000
    gibbs_burn_in = 1000

    [screening]
    max_missing = 0.05
    fdr_level = 0.05
    correlation_screen = yes
    normal_score = yes

    [scoring]
    crps_draws = 10000
    cutoff_period = 100
    filter_order = 4
    smoothed_reference =
"""

import configparser
import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Tuple

from .const import (
    FDR_LEVEL,
    MAX_MISSING_RATIO,
    R2_MIN,
    Engine,
    FilterSettings,
    ModelKind,
    ReductionMethod,
    ReductionSettings,
    SamplingSettings,
    YearBounds,
)
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

ENV_PATHS = {
    "PALEORECON_PROXIES": "proxies",
    "PALEORECON_FORCINGS": "forcings",
    "PALEORECON_TEMPERATURE": "temperature",
    "PALEORECON_OUTPUT_DIR": "output_dir",
}
ENV_THREADS = "PALEORECON_THREADS"

_SECTIONS = {
    "paths": ("proxies", "forcings", "temperature", "output_dir"),
    "model": ("kind", "methods", "n_nests", "k_spline", "folds", "slices", "r2_min"),
    "windows": ("calibration", "validation", "latent"),
    "engine": ("engine", "seed", "threads", "gibbs_iterations", "gibbs_burn_in"),
    "screening": ("max_missing", "fdr_level", "correlation_screen", "normal_score"),
    "scoring": ("crps_draws", "cutoff_period", "filter_order", "smoothed_reference"),
}

_INTS = {
    "n_nests", "k_spline", "folds", "slices", "seed", "threads",
    "gibbs_iterations", "gibbs_burn_in", "crps_draws", "cutoff_period", "filter_order",
}
_FLOATS = {"r2_min", "max_missing", "fdr_level"}


def parse_window(text) -> Tuple[int, int]:
    if isinstance(text, (tuple, list)):
        start, end = text
    else:
        parts = str(text).replace(",", "-").split("-")
        parts = [p.strip() for p in parts if p.strip()]
        if len(parts) != 2:
            raise ConfigError(f"Window '{text}' must look like 1900-2000")
        start, end = parts
    try:
        start, end = int(start), int(end)
    except ValueError:
        raise ConfigError(f"Window '{text}' must hold two integer years")
    if end < start:
        raise ConfigError(f"Window [{start}, {end}] is empty")
    return start, end


@dataclass(frozen=True)
class RunConfig:
    proxies: Optional[str] = None
    forcings: Optional[str] = None
    temperature: Optional[str] = None
    output_dir: str = "paleorecon-out"
    kind: ModelKind = ModelKind.WF
    methods: Tuple[ReductionMethod, ...] = (ReductionMethod.SPCR,)
    n_nests: int = YearBounds.NEST_COUNT
    k_spline: Optional[int] = None
    folds: int = ReductionSettings.FOLDS
    slices: int = ReductionSettings.SLICES
    r2_min: float = R2_MIN
    calibration: Tuple[int, int] = (YearBounds.CALIBRATION_START, YearBounds.CALIBRATION_END)
    validation: Tuple[int, int] = (YearBounds.VALIDATION_START, YearBounds.VALIDATION_END)
    latent: Tuple[int, int] = (YearBounds.FIRST_YEAR, YearBounds.LAST_YEAR)
    engine: Engine = Engine.NESTED_LAPLACE
    seed: int = 0
    threads: Optional[int] = None
    gibbs_iterations: int = SamplingSettings.GIBBS_ITERATIONS
    gibbs_burn_in: int = SamplingSettings.GIBBS_BURN_IN
    max_missing: float = MAX_MISSING_RATIO
    fdr_level: float = FDR_LEVEL
    correlation_screen: bool = True
    normal_score: bool = True
    crps_draws: int = SamplingSettings.CRPS_DRAWS
    cutoff_period: int = FilterSettings.CUTOFF_PERIOD
    filter_order: int = FilterSettings.ORDER
    smoothed_reference: Optional[str] = None

    def __post_init__(self):
        methods = self.methods
        if isinstance(methods, str):
            methods = [m for m in methods.replace(";", ",").split(",") if m.strip()]
        try:
            object.__setattr__(self, "kind", ModelKind(self.kind))
            object.__setattr__(self, "engine", Engine(self.engine))
            object.__setattr__(
                self, "methods", tuple(ReductionMethod(str(getattr(m, "value", m)).strip().upper()) for m in methods)
            )
        except ValueError as e:
            raise ConfigError(str(e))
        for name in ("calibration", "validation", "latent"):
            object.__setattr__(self, name, parse_window(getattr(self, name)))
        self.validate()

    def validate(self):
        if not self.methods:
            raise ConfigError("At least one reduction method is required")
        if self.n_nests not in (1, YearBounds.NEST_COUNT):
            raise ConfigError(f"n_nests must be 1 or {int(YearBounds.NEST_COUNT)}, got {self.n_nests}")
        (c0, c1), (v0, v1) = self.calibration, self.validation
        if c0 <= v1 and v0 <= c1:
            logger.error(f"Calibration {self.calibration} overlaps validation {self.validation}")
            raise ConfigError(
                f"Calibration window [{c0}, {c1}] and validation window [{v0}, {v1}] must be disjoint"
            )
        l0, l1 = self.latent
        if not (l0 <= min(c0, v0) and max(c1, v1) <= l1):
            raise ConfigError(f"Latent interval [{l0}, {l1}] must contain both windows")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.k_spline is not None and self.k_spline < 4:
            raise ConfigError(f"k_spline must be >= 4, got {self.k_spline}")
        if not 0 <= self.gibbs_burn_in < self.gibbs_iterations:
            raise ConfigError("gibbs_burn_in must lie in [0, gibbs_iterations)")
        if self.crps_draws < 2:
            raise ConfigError("crps_draws must be >= 2")

    def check_paths(self, *names: str):
        """Raises ConfigError for any named input path that is unset or missing."""
        for name in names or ("proxies", "forcings", "temperature"):
            value = getattr(self, name)
            if not value:
                raise ConfigError(f"Path '{name}' is not configured")
            if not Path(value).exists():
                logger.error(f"Configured {name} path {value} does not exist")
                raise ConfigError(f"Path '{name}' = {value} does not exist")

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def replace(self, **overrides) -> "RunConfig":
        """Copy with the non-None overrides applied."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(changes) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"Unknown configuration fields {sorted(unknown)}")
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = [getattr(v, "value", v) for v in value]
            out[f.name] = getattr(value, "value", value)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"Unknown configuration fields {sorted(unknown)}")
        values = dict(data)
        for key in ("calibration", "validation", "latent"):
            if key in values:
                values[key] = tuple(values[key]) if isinstance(values[key], list) else values[key]
        return cls(**values)

    @classmethod
    def from_manifest(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        if "config" not in manifest:
            raise ConfigError(f"{path} is not a run manifest")
        return cls.from_dict(manifest["config"])


def _convert(name: str, text: str):
    text = text.strip()
    if text == "":
        return None
    try:
        if name in ("correlation_screen", "normal_score"):
            return text.lower() in ("1", "yes", "true", "on")
        if name in ("calibration", "validation", "latent"):
            return parse_window(text)
        if name == "methods":
            return text
        if name in _FLOATS:
            return float(text)
        if name in _INTS:
            return int(text)
    except ValueError as e:
        raise ConfigError(f"Invalid value for {name}: '{text}' ({e})")
    return text


def read_ini(path) -> dict:
    """Field overrides from an INI file; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";",))
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigError(f"Configuration file {path} could not be read")
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"Unknown section [{section}] in {path}")
        for key, text in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"Unknown key '{key}' in section [{section}]")
            value = _convert(key, text)
            if value is not None:
                values[key] = value
    return values


def env_overrides(environ: Mapping[str, str] = None) -> dict:
    environ = os.environ if environ is None else environ
    values = {field_name: environ[var] for var, field_name in ENV_PATHS.items() if environ.get(var)}
    if environ.get(ENV_THREADS):
        try:
            values["threads"] = int(environ[ENV_THREADS])
        except ValueError:
            raise ConfigError(f"{ENV_THREADS} must be an integer, got '{environ[ENV_THREADS]}'")
    return values


def load_config(path=None, environ: Mapping[str, str] = None, **overrides) -> RunConfig:
    """INI file < environment < explicit overrides (None means unset)."""
    values = read_ini(path) if path else {}
    values.update(env_overrides(environ))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid configuration: {e}")
