import argparse
import logging
import sys
from typing import List, Optional

from .api import STAGES, compare_engines, run_pipeline
from .config import RunConfig, load_config, parse_window
from .const import Engine, ModelKind
from .error_codes import stage_codes
from .exceptions import PaleoReconException, StageError
from .pseudoproxy import PseudoConfig, generate

logger = logging.getLogger(__name__)

PIPELINE_COMMANDS = STAGES


def _window(text):
    try:
        return parse_window(text)
    except PaleoReconException as e:
        raise argparse.ArgumentTypeError(str(e))


def _run_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("--manifest", help="re-run with the configuration recorded in a manifest.json")
    parser.add_argument("--proxies")
    parser.add_argument("--forcings")
    parser.add_argument("--temperature")
    parser.add_argument("--smoothed-reference", dest="smoothed_reference")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--model", dest="kind", choices=[k.value for k in ModelKind])
    parser.add_argument("--methods", help="comma separated, e.g. SPCR,PCR")
    parser.add_argument("--nests", dest="n_nests", type=int, choices=(1, 8))
    parser.add_argument("--k-spline", dest="k_spline", type=int)
    parser.add_argument("--folds", type=int)
    parser.add_argument("--slices", type=int)
    parser.add_argument("--r2-min", dest="r2_min", type=float)
    parser.add_argument("--calibration", type=_window, help="e.g. 1900-2000")
    parser.add_argument("--validation", type=_window, help="e.g. 1850-1899")
    parser.add_argument("--latent", type=_window, help="e.g. 1-2000")
    parser.add_argument("--engine", choices=[e.value for e in Engine])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--gibbs-iterations", dest="gibbs_iterations", type=int)
    parser.add_argument("--gibbs-burn-in", dest="gibbs_burn_in", type=int)
    parser.add_argument("--max-missing", dest="max_missing", type=float)
    parser.add_argument("--fdr-level", dest="fdr_level", type=float)
    parser.add_argument("--no-correlation-screen", dest="correlation_screen", action="store_const", const=False)
    parser.add_argument("--no-normal-score", dest="normal_score", action="store_const", const=False)
    parser.add_argument("--crps-draws", dest="crps_draws", type=int)
    parser.add_argument("--cutoff-period", dest="cutoff_period", type=int)
    parser.add_argument("--filter-order", dest="filter_order", type=int)


_RUN_FIELDS = (
    "proxies", "forcings", "temperature", "smoothed_reference", "output_dir", "kind", "methods",
    "n_nests", "k_spline", "folds", "slices", "r2_min", "calibration", "validation", "latent",
    "engine", "seed", "threads", "gibbs_iterations", "gibbs_burn_in", "max_missing", "fdr_level",
    "correlation_screen", "normal_score", "crps_draws", "cutoff_period", "filter_order",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paleorecon",
        description="Bayesian hierarchical reconstruction of annual temperature from nested proxy networks.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic pseudoproxy world")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--output-dir", dest="output_dir", required=True)
    gen.add_argument("--model", dest="kind", choices=[k.value for k in ModelKind], default=ModelKind.WF.value)
    gen.add_argument("--proxies-per-nest", dest="proxies_per_nest", type=int, default=10)
    gen.add_argument("--snr-range", dest="snr_range", type=float, nargs=2, default=(0.5, 2.0))
    gen.add_argument("--missing-fraction", dest="missing_fraction", type=float, default=0.01)

    for name in PIPELINE_COMMANDS:
        _run_arguments(sub.add_parser(name, help=f"run the pipeline through '{name}'"))
    _run_arguments(sub.add_parser("compare-engines", help="nested Laplace vs Gibbs for WF with one nest"))
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {name: getattr(args, name, None) for name in _RUN_FIELDS}
    if args.manifest:
        return RunConfig.from_manifest(args.manifest).replace(**overrides)
    return load_config(args.config, **overrides)


def _generate(args) -> int:
    config = PseudoConfig(
        kind=ModelKind(args.kind),
        proxies_per_nest=args.proxies_per_nest,
        snr_range=tuple(args.snr_range),
        missing_fraction=args.missing_fraction,
    )
    try:
        world = generate(config, seed=args.seed)
        world.write(args.output_dir)
    except (PaleoReconException, OSError) as e:
        logger.error(f"Generation failed: {e}")
        return stage_codes["GENERATE"]
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger("paleorecon").setLevel(logging.DEBUG)

    if args.command == "generate":
        return _generate(args)

    try:
        config = config_from_args(args)
    except (PaleoReconException, OSError, ValueError) as e:
        logger.error(f"Invalid configuration: {e}")
        return stage_codes["CONFIG"]

    if args.command == "compare-engines":
        try:
            compare_engines(config)
        except StageError as e:
            logger.error(str(e))
            return e.exit_code
        return 0
    return run_pipeline(config, args.command)


if __name__ == "__main__":
    sys.exit(main())
