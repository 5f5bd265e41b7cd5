import argparse
import logging
import sys
from typing import List, Optional

import fem
import file_utils
from adjoint import solve_adjoint, summary_rows
from control import run_algorithm1
from errors import ConfigurationError, SolverError
from model import build_model, observe
from run_config import PRESETS, RunConfig, parse_config, save_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SOLVER_ERROR = 1
EXIT_CONFIG_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Partially observed optimal control of a stochastic heat equation "
                    "by conditional SGD with a branching particle filter")
    parser.add_argument("--config", metavar="PATH", help="JSON file of configuration keys")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="named parameter set")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                        help="override one configuration key (repeatable)")
    parser.add_argument("--plot", action="store_true", help="also render PNG figures")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def run(config: RunConfig, plot: bool = False) -> int:
    """Run the solver for a resolved configuration and write its artifacts"""
    output_dir = file_utils.ensure_output_dir(config.output_dir)
    save_config(config, f"{output_dir}/{file_utils.CONFIG_ECHO_FILE}")

    ops = fem.assemble(config.length, config.n_elems, config.dt)
    model = build_model(config, ops)
    report = run_algorithm1(config, ops=ops, model=model)
    file_utils.write_report(report, output_dir)

    truth = report.truth
    if config.dump_noise:
        file_utils.dump_noise(output_dir, truth.dW, truth.dB, ops.dt)
    if config.dump_paths:
        sensors = observe(model, truth.states, truth.controls, ops)
        file_utils.dump_paths(output_dir, report.observations.Y, sensors, ops.dt)
    if config.dump_adjoint:
        adjoint = solve_adjoint(truth, model, ops, config.hxp_mode, z2_estimator=config.z2_estimator)
        file_utils.dump_adjoint(output_dir, summary_rows(truth, adjoint, ops), model.obs_dim)
    if plot:
        # matplotlib is only needed for figures
        from plotting import save_figures
        save_figures(report, ops, output_dir)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the solver"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = parse_config(preset=args.preset, path=args.config, overrides=args.overrides,
                              seed=args.seed, output_dir=args.out)
    except ConfigurationError as e:
        logger.error("invalid configuration: %s", e)
        return EXIT_CONFIG_ERROR

    try:
        return run(config, plot=args.plot)
    except ConfigurationError as e:
        logger.error("invalid configuration: %s", e)
        return EXIT_CONFIG_ERROR
    except SolverError as e:
        logger.error("run failed: %s", e)
        return EXIT_SOLVER_ERROR


if __name__ == "__main__":
    sys.exit(main())
