"""``lorentz_lab`` entry point: one subcommand per experiment mode, plus ``plot``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from lorentz_lab.config import Mode, load_config
from lorentz_lab.errors import (
    CalibrationError,
    ConfigurationError,
    DomainError,
    QuadratureError,
)
from lorentz_lab.harness import MANIFEST_FILE, run

log = logging.getLogger(__name__)

# (flag, config field, help)
_OVERRIDES = (
    ("--d", "d", "Spatial dimension (>= 2)"),
    ("--r", "r", "Scatterer radius"),
    ("--scaling", "scaling", "Lattice scaling: raw or boltzmann_grad"),
    ("--backend", "backend", "Kernel backend: surrogate_iid or empirical"),
    ("--gamma", "gamma", "Truncation exponent in (0, 1)"),
    ("--n-grid", "n_grid", "Comma-separated flight counts, ascending"),
    ("--t-grid", "t_grid", "Comma-separated times, ascending"),
    ("--replicas", "replicas", "Independent replicas per grid point"),
    ("--seed", "seed", "64-bit master seed"),
    ("--workers", "workers", "Worker processes"),
    ("--output-dir", "output_dir", "Directory receiving all outputs"),
    ("--n-flights", "n_flights", "Billiard flights per replica"),
    ("--table-flights", "table_flights", "Billiard flights harvested for the empirical backend"),
    ("--l-max-factor", "l_max_factor", "Flight cap in mean free paths"),
    ("--n-proj", "n_proj", "Random projections of the sliced W1"),
    ("--n-bootstrap", "n_bootstrap", "Bootstrap resamples per distance"),
    ("--n-bins", "n_bins", "Deflection bins of the empirical decomposition"),
    ("--n-legendre", "n_legendre", "Gauss-Legendre nodes of the Stein solver"),
    ("--n-hermite", "n_hermite", "Gauss-Hermite nodes per axis"),
    ("--mixing-lags", "mixing_lags", "Largest lag of the mixing check"),
    ("--probes", "probes", "Probe points for residual and bound checks"),
)

_MODE_HELP = {
    Mode.BILLIARD: "Trace billiard flights and check free-path statistics",
    Mode.LIMIT: "Run the limit chain: moments, truncation gaps, mixing",
    Mode.DISTANCES: "Distances of W_n to the standard Gaussian over the n grid",
    Mode.STEIN_CHECK: "Stein solver, derivative bounds and exchangeable-pair identities",
    Mode.RATES: "Distances over the n and t grids with rate-model fits",
    Mode.RENEWAL: "Renewal counter deviations and continuous-time distances",
}


def _add_logging_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-v", "--verbose", action="store_true", help="Log stage progress")
    parser.add_argument("--debug", action="store_true", help="Log per-replica details")


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="lorentz_lab",
        description="Periodic Lorentz gas experiments in the Boltzmann-Grad limit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for mode in Mode:
        mode_parser = sub.add_parser(str(mode), help=_MODE_HELP[mode])
        mode_parser.add_argument(
            "--config", type=Path, default=None, help="key = value config file"
        )
        for flag, dest, help_text in _OVERRIDES:
            mode_parser.add_argument(flag, dest=dest, default=None, help=help_text)
        _add_logging_flags(mode_parser)

    plot = sub.add_parser("plot", help="Draw distance-vs-n curves from a ledger")
    plot.add_argument("ledger", type=Path, help="Ledger CSV written by a run")
    plot.add_argument("--out", type=Path, default=None, help="PNG path (default: beside the ledger)")
    plot.add_argument(
        "--metric", action="append", default=None, help="Only plot this metric (repeatable)"
    )
    _add_logging_flags(plot)
    return parser.parse_args(argv)


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.WARNING
    if args.debug:
        level = logging.DEBUG
    elif args.verbose:
        level = logging.INFO
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )


def _plot(args: argparse.Namespace) -> int:
    from lorentz_lab.plotting import plot_ledger

    out = args.out or args.ledger.with_suffix(".png")
    written = plot_ledger(args.ledger, out, args.metric)
    if written is not None:
        print(written)
    return 0


def main(argv: list[str] | None = None) -> int:
    """Lorentz lab entry point; returns the process exit code."""
    args = _parse_args(argv)
    _configure_logging(args)
    try:
        if args.command == "plot":
            return _plot(args)
        overrides = {dest: getattr(args, dest) for _, dest, _ in _OVERRIDES}
        config = load_config(args.command, args.config, overrides)
        run(config)
    except ConfigurationError as exc:
        print(f"lorentz_lab: {exc}", file=sys.stderr)
        for field_name, message in sorted(exc.diagnostics.items()):
            print(f"  {field_name}: {message}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"lorentz_lab: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 1
    except (DomainError, CalibrationError, QuadratureError, ImportError) as exc:
        print(f"lorentz_lab: {exc}", file=sys.stderr)
        return 1
    print(config.output_dir / MANIFEST_FILE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
