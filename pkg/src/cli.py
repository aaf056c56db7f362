"""
Command-line interface
validate | gen-corpus | run | gridsearch | report

Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from src.backends import BACKENDS
from src.config import KNOWN_POLICIES, configure_logging, load_config, load_environment
from src.errors import AegisError, ConfigError, UsageError
from src.harness import build_corpus, compute_report, load_records, run_experiment, run_gridsearch, write_file_atomically
from src.report import FORMATS, emit_report
from src.world import load_corpus

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting on bad usage."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _policies(value: str) -> List[str]:
    names = [name.strip() for name in value.split(",") if name.strip()]
    unknown = [name for name in names if name not in KNOWN_POLICIES]
    if not names or unknown:
        raise argparse.ArgumentTypeError(
            f"unknown policies {', '.join(unknown) or value!r} (known: {', '.join(KNOWN_POLICIES)})"
        )
    return names


def build_parser() -> CliParser:
    parser = CliParser(prog="aegis", description="Self-healing agent orchestration experiments")
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    validate = commands.add_parser("validate", help="check a config file (and its corpus, if set)")
    validate.add_argument("--config", required=True, help="experiment config JSON")

    gen = commands.add_parser("gen-corpus", help="generate the task corpus and KB from a seed")
    gen.add_argument("--config", required=True, help="experiment config JSON")
    gen.add_argument("--out", required=True, help="output directory (receives corpus.json)")
    gen.add_argument("--seed", type=int, default=None, help="master seed (default: config master_seed)")

    run = commands.add_parser("run", help="run the experiment and write runs, report and lock files")
    run.add_argument("--config", required=True, help="experiment config JSON")
    run.add_argument("--seed", type=int, default=None, help="master seed (default: config master_seed)")
    run.add_argument("--out", required=True, help="output directory, replaced atomically")
    run.add_argument("--policies", type=_policies, default=None,
                     help=f"comma-separated subset of: {', '.join(KNOWN_POLICIES)}")
    run.add_argument("--backend", choices=BACKENDS, default="scripted", help="agent backend")
    run.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")

    grid = commands.add_parser("gridsearch", help="search reliability weights on the simplex grid")
    grid.add_argument("--config", required=True, help="experiment config JSON")
    grid.add_argument("--step", type=float, default=0.1, help="grid step, must divide 1")
    grid.add_argument("--objective", choices=("f1", "tsr"), default="f1", help="objective to maximize")
    grid.add_argument("--out", required=True, help="output directory (receives gridsearch.json)")
    grid.add_argument("--seed", type=int, default=None, help="master seed (default: config master_seed)")

    report = commands.add_parser("report", help="rebuild a report from run logs")
    report.add_argument("--runs", required=True, help="run directory or its runs/ subdirectory")
    report.add_argument("--format", choices=FORMATS, default="json", help="report format")
    report.add_argument("--out", required=True, help="report file to write")
    return parser


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    if cfg.corpus_path:
        load_corpus(cfg.corpus_path)
    print(f"{args.config}: OK")
    return EXIT_OK


def cmd_gen_corpus(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.master_seed if args.seed is None else args.seed
    corpus = build_corpus(cfg, seed)
    write_file_atomically(Path(args.out) / "corpus.json", corpus.to_json())
    print(f"Wrote {len(corpus.tasks)} tasks to {Path(args.out) / 'corpus.json'}")
    return EXIT_OK


def cmd_run(args) -> int:
    if args.jobs is not None and args.jobs < 1:
        raise UsageError(f"--jobs must be at least 1, got {args.jobs}")
    cfg = load_config(args.config)
    report = run_experiment(cfg, args.out, args.seed, args.policies, args.backend, args.jobs)
    for name, metrics in report.policies.items():
        rsr = "n/a" if metrics.rsr is None else f"{metrics.rsr:.4f}"
        print(f"{name:<24} TSR={metrics.tsr:.4f} FDA={metrics.fda.accuracy:.4f} RSR={rsr}")
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    cfg = load_config(args.config)
    result = run_gridsearch(cfg, args.step, args.objective, args.out, args.seed)
    print(f"{result.candidates} candidates; best w=({result.w1:.2f}, {result.w2:.2f}, {result.w3:.2f}) "
          f"{result.objective_name}={result.objective:.4f}")
    return EXIT_OK


def _master_seed(runs_dir: Path) -> int:
    for lock in (runs_dir / "config.lock.json", runs_dir.parent / "config.lock.json"):
        if lock.is_file():
            try:
                return int(json.loads(lock.read_text(encoding="utf-8")).get("master_seed", 0))
            except (ValueError, AttributeError) as e:
                raise ConfigError(f"{lock}: unreadable lock file ({e})") from e
    return 0


def cmd_report(args) -> int:
    records = load_records(args.runs)
    report = compute_report(records, _master_seed(Path(args.runs)))
    path = emit_report(report, args.format, args.out)
    print(f"Wrote {path}")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "gen-corpus": cmd_gen_corpus,
    "run": cmd_run,
    "gridsearch": cmd_gridsearch,
    "report": cmd_report,
}


def cli_run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run the command and map errors to an exit code."""
    load_environment()
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else EXIT_OK
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (AegisError, OSError) as e:
        logger.error(f"Runtime failure: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
