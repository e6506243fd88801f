from enum import Enum, IntEnum, unique


@unique
class ModelKind(str, Enum):
    NF = "NF"
    WF = "WF"
    MIXED = "Mixed"

    @property
    def has_forcings(self) -> bool:
        return self is not ModelKind.NF

    @property
    def has_splines(self) -> bool:
        return self is not ModelKind.WF


@unique
class ReductionMethod(str, Enum):
    LASSO = "LASSO"
    SPLS = "SPLS"
    SIR = "SIR"
    PCR = "PCR"
    SPCR = "SPCR"


@unique
class Engine(str, Enum):
    NESTED_LAPLACE = "nested-laplace"
    GIBBS = "gibbs"


class YearBounds(IntEnum):
    FIRST_YEAR = 1
    LAST_YEAR = 2000
    NEST_WIDTH = 250
    NEST_COUNT = 8
    CALIBRATION_START = 1900
    CALIBRATION_END = 2000
    VALIDATION_START = 1850
    VALIDATION_END = 1899
    MIN_OVERLAP = 10


class SplineSettings(IntEnum):
    DEGREE = 3
    ORDER = 4
    MIN_BASES = 4
    K_NF = 120
    K_MIXED = 100


class ReductionSettings(IntEnum):
    FOLDS = 10
    LASSO_GRID_SIZE = 100
    SLICES = 10
    SPLS_MAX_COMPONENTS = 5


class FilterSettings(IntEnum):
    CUTOFF_PERIOD = 100
    ORDER = 4


class SamplingSettings(IntEnum):
    CRPS_DRAWS = 10000
    GIBBS_ITERATIONS = 5000
    GIBBS_BURN_IN = 1000


PRIOR_VARIANCE = 3.0
LOGGAMMA_SHAPE = 1.0
LOGGAMMA_RATE = 1e-20
CALIBRATION_OBS_VARIANCE = 1e-4

MAX_MISSING_RATIO = 0.05
FDR_LEVEL = 0.05
R2_MIN = 0.70
LASSO_MIN_RATIO = 1e-4
SIR_EIGEN_RATIO = 0.10
SIR_RIDGE_FRACTION = 0.01
SPLS_ETA_GRID = tuple(round(0.1 * i, 1) for i in range(10))
SPCR_THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 19))

INTERVAL_LEVELS = (0.80, 0.95)
