import argparse
import dataclasses
import logging
import os
import sys
from typing import List, Optional

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), 'simulation_integration')))
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), 'verifier/plugins')))

from errors import ConfigError, ToolkitError
from sde_engine import simulate_path
from context import set_parallelism
from estimators import radial_point
from experiments import SUITES, SuiteContext, condition_frame, run_suite
from presets import catalogue_frame
from report_io import OUTPUT_FORMATS, write_path_csv, write_reports
from run_config import RunConfig, load_config

logger = logging.getLogger(__name__)

# Exit 1 means "a gating check failed"; 2-4 are the ToolkitError families.
UNEXPECTED_EXIT = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Switching diffusion simulator and recurrence verification suites")
    parser.add_argument("--config", help="Path to the JSON run configuration")
    parser.add_argument("--seed", type=int, help="Override the master seed")
    parser.add_argument("--workers", type=int, help="Override the number of worker processes")
    parser.add_argument("--format", choices=OUTPUT_FORMATS, default="both", help="Report file format")
    parser.add_argument("--suite", action="append",
                        help=f"Run only this suite (repeatable, or 'all'); one of {sorted(SUITES)}")
    parser.add_argument("--dump-path", metavar="CSV", help="Also write one simulated path from 2*M1 in regime 0")
    parser.add_argument("--list-presets", action="store_true", help="Print the preset catalogue and exit")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    return parser


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    changes = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("must be non-negative", "seed")
        changes["seed"] = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("must be at least 1", "workers")
        changes["workers"] = args.workers
    if args.suite:
        for suite_id in args.suite:
            if suite_id != "all" and suite_id not in SUITES:
                raise ConfigError(f"unknown suite '{suite_id}'", "suites")
        changes["suites"] = list(args.suite)
    return dataclasses.replace(config, **changes) if changes else config


def verdict_line(report) -> str:
    estimate = "n/a" if report.estimate is None else f"{report.estimate:.6g}"
    threshold = "n/a" if report.threshold is None else f"{report.threshold:.6g}"
    line = f"[{report.verdict.upper():12}] {report.check_id}: estimate={estimate} threshold={threshold}"
    if report.note:
        line += f" ({report.note})"
    return line


def dump_path(context: SuiteContext, filename: str) -> str:
    params = context.params
    cfg = context.engine_cfg
    x = radial_point(params, 2.0 * params.M1)
    path = simulate_path(x, 0, params, context.spec, cfg, cfg.streams("dump-path"), stop="embedded")
    return write_path_csv(path, filename)


def run(config: RunConfig, fmt: str = "both", dump: Optional[str] = None) -> int:
    set_parallelism(config.workers, config.estimation.block_size)
    context = SuiteContext(config)
    reports = []
    for suite_id in config.expanded_suites():
        tier = SUITES[suite_id].requires
        if suite_id not in config.suites and not context.conditions.holds(tier):
            logger.warning(f"Skipping suite '{suite_id}': condition ({tier}) does not hold")
            continue
        if suite_id == "conditions":
            print("\nCondition margins:")
            print(condition_frame(context).to_string(index=False))
        suite_reports = run_suite(suite_id, config, context)
        print(f"\nSuite '{suite_id}':")
        for report in suite_reports:
            print(verdict_line(report))
        reports.extend(suite_reports)

    write_reports(reports, config.output_dir, context.config_hash, config.seed, fmt=fmt, m1=context.resolved_m1,
                  tables=context.tables)
    if dump:
        dump_path(context, dump)

    failed = [r for r in reports if r.gating and r.verdict != "pass"]
    inconclusive = [r for r in reports if r.verdict == "inconclusive"]
    print(f"\n{len(reports)} checks, {len(failed)} failed, {len(inconclusive)} inconclusive")
    return 1 if failed else 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.list_presets:
        print(catalogue_frame().to_string(index=False))
        return 0
    if not args.config:
        parser.error("--config is required")

    try:
        config = apply_overrides(load_config(args.config), args)
        return run(config, fmt=args.format, dump=args.dump_path)
    except ToolkitError as e:
        print(f"Error: {e}", file=sys.stderr)
        logger.debug("toolkit error", exc_info=True)
        return e.exit_code
    except Exception:
        logger.exception("Unexpected failure")
        return UNEXPECTED_EXIT


if __name__ == "__main__":
    sys.exit(main())
