import argparse
import sys
import traceback
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from config import (
    DEFAULT_SEED,
    DEFAULT_WORKERS,
    EXIT_CONFIG_ERROR,
    EXIT_NONCONVERGENCE,
    EXIT_OK,
    OUTPUT_DIR,
    SCENARIOS,
    ConfigError,
)
from harness import ExperimentConfig, load_config_file, parse_assignment, run_many
from utils import log, set_verbose, verbose_log

# subcommand -> default scenario
COMMANDS = {
    "dana-d": "dana_discrete",
    "dana-c": "dana_continuous",
    "dana-robust": "dana_robust",
    "discrn": "discrn",
    "nnn": "nnn_quality",
    "dispatch": "dispatch_fullday",
    "weights": "weight_study",
}


class CliParser(argparse.ArgumentParser):
    """Usage errors exit with the configuration-error code."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        log(f"❌ {self.prog}: {message}")
        sys.exit(EXIT_CONFIG_ERROR)


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help=f"Base seed (default {DEFAULT_SEED})")
    parser.add_argument("--seeds", type=int, default=1, help="Number of consecutive seeds to run")
    parser.add_argument("--out", type=Path, default=None, help=f"Output directory (default {OUTPUT_DIR})")
    parser.add_argument("--config", type=Path, default=None, help="JSON or TOML file with parameter overrides")
    parser.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one preset parameter (repeatable)")
    parser.add_argument("--workers", type=int, default=DEFAULT_WORKERS, help="Parallel runs")
    parser.add_argument("--quiet", action="store_true", help="Suppress progress bars and verbose logs")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="dana-lab", description="Distributed Newton-like allocation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="Run any scenario preset by name")
    p.add_argument("scenario", choices=SCENARIOS)
    add_common_arguments(p)

    p = sub.add_parser("dana-d", help="DANA-D q-sweep on sinusoidal-quadratic costs")
    p.add_argument("--q", type=int, nargs="+", default=None, help="q values to sweep")
    add_common_arguments(p)

    p = sub.add_parser("dana-c", help="DANA-C on a box-constrained quadratic instance")
    p.add_argument("--instance", choices=("three_node", "forty_node"), default="three_node")
    p.add_argument("--q", type=int, nargs="+", default=None)
    add_common_arguments(p)

    p = sub.add_parser("dana-robust", help="Robust DANA under state perturbations")
    add_common_arguments(p)

    p = sub.add_parser("discrn", help="Cubic vs Newton vs gradient outer steps on the nested problem")
    p.add_argument("--ev", action="store_true", help="Two-driver EV example instead of the random instance")
    add_common_arguments(p)

    p = sub.add_parser("nnn", help="Binary allocation by annealed neural dynamics")
    p.add_argument("--traj2d", action="store_true", help="Two-variable instance instead of the quality study")
    add_common_arguments(p)

    p = sub.add_parser("dispatch", help="Frequency-regulation tracking with rc / pd / dana")
    p.add_argument("--signal", default=None, help="synthetic or csv:PATH")
    p.add_argument("--devices", default=None, help="JSON device list (default: built-in fleet)")
    p.add_argument("--methods", default=None, help="Comma-separated subset of rc,pd,dana")
    stage = p.add_mutually_exclusive_group()
    stage.add_argument("--two-stage", dest="two_stage", action="store_true", default=None)
    stage.add_argument("--single-stage", dest="two_stage", action="store_false")
    add_common_arguments(p)

    p = sub.add_parser("weights", help="Epsilon statistics of the post-scaled Laplacian")
    add_common_arguments(p)
    return parser


def scenario_and_flags(args: argparse.Namespace) -> Tuple[str, Dict]:
    """Maps subcommand flags onto a scenario name and parameter overrides."""
    if args.command == "run":
        return args.scenario, {}
    scenario = COMMANDS[args.command]
    flags: Dict = {}
    if args.command == "dana-c" and args.instance == "forty_node":
        scenario = "dana_continuous_forty"
    if args.command == "discrn" and args.ev:
        scenario = "discrn_ev"
    if args.command == "nnn" and args.traj2d:
        scenario = "nnn_traj2d"
    if getattr(args, "q", None):
        flags["q_values"] = tuple(args.q)
    if args.command == "dispatch":
        if args.signal:
            flags["signal"] = args.signal
        if args.devices:
            flags["devices"] = args.devices
        if args.methods:
            flags["methods"] = tuple(m.strip() for m in args.methods.split(",") if m.strip())
        if args.two_stage is not None:
            flags["two_stage"] = args.two_stage
    return scenario, flags


def build_configs(args: argparse.Namespace) -> List[ExperimentConfig]:
    """
    Precedence: preset < config file < named flags and --set.
    """
    scenario, flags = scenario_and_flags(args)
    overrides: Dict = {}
    seed = DEFAULT_SEED
    out = Path(OUTPUT_DIR)
    if args.config:
        payload = load_config_file(args.config)
        scenario = payload.pop("scenario", scenario)
        seed = int(payload.pop("seed", seed))
        out = Path(payload.pop("out", payload.pop("output_dir", out)))
        overrides.update(payload)
    overrides.update(flags)
    overrides.update(dict(parse_assignment(a) for a in args.assignments))
    if args.seed is not None:
        seed = args.seed
    if args.out is not None:
        out = args.out
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    return [ExperimentConfig(scenario, seed + k, dict(overrides), out) for k in range(args.seeds)]


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    set_verbose(not args.quiet)
    try:
        configs = build_configs(args)
        results = run_many(configs, args.workers)
    except ConfigError as e:
        log(f"❌ Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except Exception as e:
        log(f"❌ Run failed: {e}")
        verbose_log(traceback.format_exc())
        return 1
    stalled = [r for r in results if not r.converged]
    for r in stalled:
        log(f"⚠️ {r.scenario} seed {r.seed} flagged nonconvergence ({r.run_dir})")
    return EXIT_NONCONVERGENCE if stalled else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
