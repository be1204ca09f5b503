"""Command-line entry point: gen, ingest, run, compare, inspect and sweep."""

import argparse
import logging
import sys
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler

from . import __version__
from .common import SUPPORTED_FORMATS, Table, get_output_root, guess_file_format, handle_error, write_tables
from .config import PROFILES, load_config

log = logging.getLogger(__name__)


def cli(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse command-line arguments."""
    parser = argparse.ArgumentParser(
        prog="pt",
        description="Plasticity-triggered incremental learning for encrypted traffic classification.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Examples:\n"
        "  %(prog)s gen -o synth.ptds --set scenario.num_classes=14\n"
        "  %(prog)s run -c scenario.json --set methods='[\"lwf\",\"prime\"]' --set seeds='[0,1]'\n"
        "  %(prog)s compare runs/a runs/b -o table.xlsx\n"
        "  %(prog)s inspect runs/a/prime/seed-0/model.npz\n",
    )
    parser.add_argument("-V", "--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="Only warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("-c", "--config", help="RunConfig JSON file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="PATH=VALUE",
            help="Override a config value by dotted path (value parsed as JSON), e.g. `lwf.lambda0=0.5`",
        )
        p.add_argument("--profile", choices=sorted(PROFILES), help="Model/training scale profile")

    p = sub.add_parser("gen", help="Generate a synthetic dataset file")
    config_flags(p)
    p.add_argument("-o", "--output", required=True, help="Dataset file to write")
    p.add_argument("--csv", help="Also export the vectors as CSV")

    p = sub.add_parser("ingest", help="Turn a capture directory (or dataset file) into a labeled dataset file")
    p.add_argument("source", help="Directory of .pcap files, or a dataset file")
    p.add_argument("-m", "--manifest", help="Labeling manifest (JSON with `files`, `rules`, `classes`)")
    p.add_argument("-o", "--output", required=True, help="Dataset file to write")
    p.add_argument("--n-b", type=int, default=784, help="Payload bytes per flow (default: 784)")
    p.add_argument("--n-p", type=int, default=32, help="Header rows per flow (default: 32)")
    p.add_argument("--idle-timeout", type=float, default=60.0, help="Flow idle timeout in seconds (default: 60)")
    p.add_argument("--csv", help="Also export the vectors as CSV")

    p = sub.add_parser("run", help="Run a scenario for every configured method and seed")
    config_flags(p)
    p.add_argument("--out", help="Output root (default: $PRIME_TRAFFIC_OUTPUT or ./runs)")
    p.add_argument("--name", help="Run directory name (default: timestamp + fingerprint)")

    p = sub.add_parser("compare", help="Compare run directories that share a scenario")
    p.add_argument("runs", nargs="+", help="Run directories")
    p.add_argument("-o", "--output", help="Write the table (.csv, .tsv, .parquet, .json, .xlsx)")

    p = sub.add_parser("inspect", help="Browse a run directory or a checkpoint")
    p.add_argument("target", help="Run directory or .npz checkpoint")
    p.add_argument("--plain", action="store_true", help="Print tables instead of opening the viewer")

    p = sub.add_parser("sweep", help="Plasticity versus hidden width on the first stage of a scenario")
    config_flags(p)
    p.add_argument("--widths", type=int, nargs="+", default=[16, 32, 64, 128], help="First hidden layer widths")
    p.add_argument("-o", "--output", help="Write the table (.csv, .parquet, .xlsx, ...)")

    args = parser.parse_args(argv)
    validate_args(args)
    return args


def validate_args(args: argparse.Namespace) -> None:
    """Validate command-line arguments and exit with an error message if invalid."""
    if args.verbose and args.quiet:
        print("Cannot specify both --verbose and --quiet.", file=sys.stderr)
        sys.exit(1)

    if getattr(args, "config", None) and not Path(args.config).is_file():
        print(f"Config file not found: `{args.config}`", file=sys.stderr)
        sys.exit(1)

    if args.command in ("compare", "sweep") and args.output and not guess_file_format(args.output):
        print(
            f"Unsupported output file format for `{args.output}`. Supported formats: {', '.join(SUPPORTED_FORMATS)}",
            file=sys.stderr,
        )
        sys.exit(1)

    if args.command == "ingest":
        if not Path(args.source).exists():
            print(f"Source not found: `{args.source}`", file=sys.stderr)
            sys.exit(1)
        if args.manifest and not Path(args.manifest).is_file():
            print(f"Manifest not found: `{args.manifest}`", file=sys.stderr)
            sys.exit(1)
        if args.n_b < 1 or args.n_p < 1 or args.idle_timeout <= 0:
            print("--n-b, --n-p and --idle-timeout must be positive.", file=sys.stderr)
            sys.exit(1)

    if args.command == "compare":
        for run in args.runs:
            if not Path(run).is_dir():
                print(f"Not a directory: `{run}`", file=sys.stderr)
                sys.exit(1)

    if args.command == "sweep" and min(args.widths) < 1:
        print("Widths must be positive.", file=sys.stderr)
        sys.exit(1)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=verbose, markup=False)],
        force=True,
    )


def _config(args: argparse.Namespace):
    overrides = list(args.overrides)
    if args.profile:
        overrides.insert(0, f"profile={args.profile}")
    return load_config(args.config, overrides)


def cmd_gen(args: argparse.Namespace) -> None:
    from .harness import load_dataset

    config = _config(args)
    dataset, _ = load_dataset(config)
    dataset.write(args.output)
    if args.csv:
        dataset.export_csv(args.csv)
    log.info(f"Wrote {len(dataset)} vectors over {len(dataset.class_counts())} classes to {args.output}")


def cmd_ingest(args: argparse.Namespace) -> None:
    from .harness import LabelManifest, ingest_external

    manifest = LabelManifest.read(args.manifest) if args.manifest else None
    dataset, report = ingest_external(args.source, manifest, n_b=args.n_b, n_p=args.n_p, idle_timeout=args.idle_timeout)
    dataset.write(args.output)
    if args.csv:
        dataset.export_csv(args.csv)
    log.info(
        f"{report.captures} captures, {report.flows} flows: {report.labeled} labeled, {report.unlabeled} unlabeled "
        f"(excluded), {report.skipped_frames} undecodable frames; per class {report.per_class}"
    )


def cmd_run(args: argparse.Namespace) -> None:
    from .harness import run_scenario

    config = _config(args)
    run_dir = run_scenario(config, get_output_root(args.out), name=args.name)
    print(run_dir)


def cmd_compare(args: argparse.Namespace) -> None:
    from .harness import compare, comparison_table, write_comparison

    df = compare(args.runs)
    Console().print(comparison_table(df))
    if args.output:
        for path in write_comparison(df, args.output):
            log.info(f"Wrote {path}")


def cmd_inspect(args: argparse.Namespace) -> None:
    from .viewer import ReportViewer, load_tables, print_tables

    tables = load_tables(args.target)
    if args.plain or not sys.stdout.isatty():
        print_tables(tables)
        return
    ReportViewer(tables, title=Path(args.target).name).run()


def cmd_sweep(args: argparse.Namespace) -> None:
    from .harness import sweep
    from .viewer import print_tables

    config = _config(args)
    df = sweep(config, args.widths)
    print_tables([Table(df, "width sweep")])
    if args.output:
        write_tables([Table(df, "sweep")], args.output)


COMMANDS = {
    "gen": cmd_gen,
    "ingest": cmd_ingest,
    "run": cmd_run,
    "compare": cmd_compare,
    "inspect": cmd_inspect,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> None:
    args = cli(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("Interrupted.", file=sys.stderr)
        sys.exit(130)
    except Exception as e:
        log.debug("Command failed", exc_info=True)
        handle_error(e)


if __name__ == "__main__":
    main()
