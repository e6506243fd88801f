from .api import ReconstructionAPI, compare_engines, run_pipeline
from .config import RunConfig, load_config
from .const import *
from .error_codes import error_dict
from .exceptions import PaleoReconException, StageError
from .inla import Reconstruction, fit_nested_laplace
from .model import LatentGaussianModel, assemble
from .pseudoproxy import PseudoConfig, generate

__all__ = [
    "ReconstructionAPI",
    "RunConfig",
    "load_config",
    "run_pipeline",
    "compare_engines",
    "LatentGaussianModel",
    "assemble",
    "fit_nested_laplace",
    "Reconstruction",
    "PseudoConfig",
    "generate",
    "ModelKind",
    "ReductionMethod",
    "Engine",
    "YearBounds",
    "PaleoReconException",
    "StageError",
    "error_dict",
]
