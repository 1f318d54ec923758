"""
CubeFlow - Command-line entry point

Subcommands:
    run             time loop of a case file
    validate-sphere Re = 100 sphere wake against the reference bubble
    balance-report  γ sweep of the clustered-particle case, balancing off and on
    compress-bench  lossy compression ratio and error table
    mesh-stats      cubes and cells per level of a case mesh

Exit codes: 0 ok, 1 configuration or usage, 2 numerics, 3 I/O.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from loguru import logger

from src.config import DEFAULT_LOG_LEVEL, DEFAULT_RUN_DIR, DEFAULT_THREADS
from src.errors import CheckpointError, ConfigError, CubeFlowError, MeshGenerationError, NumericsError
from src.infra.log import setup_logging
from src.models.case import CaseConfig
from src.repositories.json_repo import JsonCaseRepository
from src.services.mesh_service import mesh_stats
from src.services.run_service import Simulation
from src.services.validation_service import (
    BALANCE_REPORT_COLUMNS, BENCH_CELLS, BENCH_COLUMNS, BENCH_TOLS, balance_report, compress_bench,
    sphere_case, validate_sphere, with_overrides, write_rows,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICS = 2
EXIT_IO = 3


def _on_off(value: str) -> bool:
    v = value.lower()
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")
    return v == "on"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="Case file (JSON)")
    common.add_argument("--ranks", type=int, help="Number of ranks P")
    common.add_argument("--threads", type=int, help="Worker threads per rank")
    common.add_argument("--seed", type=int, help="Transport delay seed")
    common.add_argument("--overlap", type=_on_off, help="Overlap halo exchange with compute (on|off)")
    common.add_argument("--balance", type=_on_off, help="Dynamic load balancing (on|off)")
    common.add_argument("--out", type=str, default=None, help=f"Run directory (default {DEFAULT_RUN_DIR})")
    common.add_argument("--dry-run", action="store_true", help="Validate and print the plan without compute")
    common.add_argument("--log-level", type=str, default=None, help=f"Log level (default {DEFAULT_LOG_LEVEL})")

    parser = argparse.ArgumentParser(prog="cubeflow", description="Building-Cube immersed boundary flow solver")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="Run a case")
    run.add_argument("--restart", type=str, default=None, help="Resume from a checkpoint")

    sphere = sub.add_parser("validate-sphere", parents=[common], help="Sphere wake validation")
    sphere.add_argument("--steps", type=int, default=None, help="Step cap")
    sphere.add_argument("--inflow", type=float, default=1.0, help="Free-stream speed (0 for the control run)")

    bal = sub.add_parser("balance-report", parents=[common], help="Load-balance γ sweep")
    bal.add_argument("--gammas", type=float, nargs="+", default=None, help="Particle cost factors")
    bal.add_argument("--steps", type=int, default=10, help="Steps per run")

    bench = sub.add_parser("compress-bench", parents=[common], help="Compression ratio table")
    bench.add_argument("--cells", type=int, nargs="+", default=list(BENCH_CELLS))
    bench.add_argument("--tols", type=float, nargs="+", default=list(BENCH_TOLS))

    sub.add_parser("mesh-stats", parents=[common], help="Mesh statistics of a case")
    return parser


def load_case(args: argparse.Namespace) -> CaseConfig:
    """
    Case file (or defaults) with CLI overrides applied.

    Raises:
        ConfigError: invalid file or override
    """
    if args.config:
        try:
            case = JsonCaseRepository().load(args.config)
        except FileNotFoundError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        case = CaseConfig()
    return with_overrides(case, cli_overrides(args))


def cli_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    if args.ranks is not None:
        out["parallel.ranks"] = args.ranks
    if args.threads is not None:
        out["parallel.threads"] = args.threads
    elif not args.config:
        out["parallel.threads"] = DEFAULT_THREADS
    if args.seed is not None:
        out["parallel.seed"] = args.seed
    if args.overlap is not None:
        out["parallel.overlap"] = args.overlap
    if args.balance is not None:
        out["balance.enabled"] = args.balance
    return out


def _print_json(obj: Any) -> None:
    print(json.dumps(obj, indent=2, default=str))


def cmd_run(args: argparse.Namespace, run_dir: Path) -> int:
    case = load_case(args)
    sim = Simulation(case, run_dir=run_dir, restart=args.restart)
    if args.dry_run:
        _print_json(sim.plan())
        return EXIT_OK
    result = sim.run()
    print(f"steps={result.steps} t={result.t:.6g} time_per_step={result.time_per_step:.4f}s "
          f"capped_solves={result.capped_solves} checkpoints={len(result.checkpoints)}")
    return EXIT_OK


def cmd_validate_sphere(args: argparse.Namespace, run_dir: Path) -> int:
    overrides = cli_overrides(args)
    if args.steps is not None:
        overrides["time.n_steps"] = args.steps
    if args.dry_run:
        case = with_overrides(sphere_case(inflow=args.inflow), overrides)
        _print_json(Simulation(case).plan())
        return EXIT_OK
    report = validate_sphere(overrides, run_dir=run_dir, inflow=args.inflow)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERICS


def cmd_balance_report(args: argparse.Namespace, run_dir: Path) -> int:
    gammas = args.gammas or [1.0, 2.0, 3.0, 4.0]
    ranks = args.ranks or 4
    if args.dry_run:
        _print_json({"gammas": gammas, "ranks": ranks, "steps": args.steps, "balancing": ["off", "on"]})
        return EXIT_OK
    rows = balance_report(gammas, ranks=ranks, n_steps=args.steps, seed=args.seed or 0, threads=args.threads or 1)
    write_rows(run_dir / "balance_report.csv", BALANCE_REPORT_COLUMNS, [r.csv_row() for r in rows])
    print(",".join(BALANCE_REPORT_COLUMNS))
    for r in rows:
        print(",".join(r.csv_row()))
    return EXIT_OK


def cmd_compress_bench(args: argparse.Namespace, run_dir: Path) -> int:
    if args.dry_run:
        _print_json({"cells": args.cells, "tols": args.tols})
        return EXIT_OK
    rows = compress_bench(args.cells, args.tols)
    write_rows(run_dir / "compress_bench.csv", BENCH_COLUMNS, [r.csv_row() for r in rows])
    print(",".join(BENCH_COLUMNS))
    for r in rows:
        print(",".join(r.csv_row()))
    return EXIT_OK


def cmd_mesh_stats(args: argparse.Namespace, run_dir: Path) -> int:
    case = load_case(args)
    sim = Simulation(case)
    if args.dry_run:
        _print_json(sim.plan())
        return EXIT_OK
    _print_json(mesh_stats(sim.prepare()))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "validate-sphere": cmd_validate_sphere,
    "balance-report": cmd_balance_report,
    "compress-bench": cmd_compress_bench,
    "mesh-stats": cmd_mesh_stats,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv`` and run a subcommand; returns the exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE

    run_dir = Path(args.out or DEFAULT_RUN_DIR)
    log_file = None if args.dry_run or args.command == "mesh-stats" else run_dir / "log.txt"
    setup_logging(args.log_level, log_file)
    try:
        return COMMANDS[args.command](args, run_dir)
    except (ConfigError, MeshGenerationError) as exc:
        logger.error("configuration error: {}", exc)
        return EXIT_USAGE
    except NumericsError as exc:
        logger.error("numerics failure: {}", exc)
        return EXIT_NUMERICS
    except (CheckpointError, OSError) as exc:
        logger.error("I/O failure: {}", exc)
        return EXIT_IO
    except CubeFlowError as exc:
        logger.error("{}: {}", type(exc).__name__, exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
