"""CLI entry point for HydroDiffusion.

Usage:
    hydrodiff generate-data --config config/toy.yaml --out data/toy
    hydrodiff train         --config config/toy.yaml --data data/toy --out runs/toy
    hydrodiff forecast      --config config/toy.yaml --data data/toy --checkpoint runs/toy/model.ckpt
    hydrodiff climatology   --config config/toy.yaml --data data/toy --out runs/toy/climatology
    hydrodiff evaluate      --data data/toy --forecasts runs/toy/forecasts/forecasts.csv --leads 1..7
    hydrodiff experiment    --config config/desk_experiment.yaml --out runs/desk

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from hydrodiffusion import __version__
from hydrodiffusion.commands import (
    cmd_climatology,
    cmd_evaluate,
    cmd_forecast,
    cmd_generate_data,
    cmd_train,
    parse_dates,
)
from hydrodiffusion.config import configure_runtime, load_run_config
from hydrodiffusion.errors import EXIT_INPUT, EXIT_OK, exit_code_for
from hydrodiffusion.evaluation import parse_leads
from hydrodiffusion.graph import build_experiment_graph
from hydrodiffusion.models import ExperimentState, ModelKind, RunConfig

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(name)s] %(levelname)s: %(message)s"


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML or TOML run configuration.")
    parser.add_argument("--seed", type=int, help="Root seed (overrides the config).")
    parser.add_argument("--out", type=Path, help="Output directory.")
    parser.add_argument("--data", type=Path, help="Data directory (overrides data.data_dir).")
    parser.add_argument("--verbose", "-v", action="store_true", help="Log at DEBUG level.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hydrodiff",
        description="Probabilistic streamflow forecasting with diffusion models",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Exit codes: 0 success, 2 usage or input error, 3 numerical failure.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate-data", help="Write synthetic basins, static table and manifest.")
    _common(generate)

    train = sub.add_parser("train", help="Train one model kind and write a checkpoint.")
    _common(train)
    train.add_argument("--kind", choices=[k.value for k in ModelKind], help="Model kind (overrides model.kind).")
    train.add_argument("--checkpoint", type=Path, help="Resume from this checkpoint.")

    forecast = sub.add_parser("forecast", help="Sample forecasts from a checkpoint.")
    _common(forecast)
    forecast.add_argument("--checkpoint", type=Path, required=True, help="Trained checkpoint.")
    forecast.add_argument("--dates", help="Init dates: A..B or a comma list (ISO); the split when omitted.")
    forecast.add_argument("--members", type=int, help="Ensemble size M.")
    forecast.add_argument("--steps", type=int, help="DDIM sampling steps T.")

    climatology = sub.add_parser("climatology", help="Build the climatology reference ensemble.")
    _common(climatology)
    climatology.add_argument("--dates", help="Init dates: A..B or a comma list (ISO).")
    climatology.add_argument("--members", type=int, help="Ensemble size M.")

    evaluate = sub.add_parser("evaluate", help="Score forecasts against observations.")
    _common(evaluate)
    evaluate.add_argument("--forecasts", type=Path, required=True, help="Forecast CSV to score.")
    evaluate.add_argument("--reference", type=Path, help="Reference forecast CSV for skill scores.")
    evaluate.add_argument("--leads", help="Lead days: A..B or a comma list.")

    experiment = sub.add_parser("experiment", help="Run the full desk-scale experiment pipeline.")
    _common(experiment)
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.data is not None:
        overrides.setdefault("data", {})["data_dir"] = str(args.data)
    if getattr(args, "members", None) is not None:
        overrides.setdefault("forecast", {})["members"] = args.members
    if getattr(args, "steps", None) is not None:
        overrides.setdefault("diffusion", {})["sample_steps"] = args.steps
    if getattr(args, "kind", None) is not None:
        overrides.setdefault("model", {})["kind"] = args.kind
    if args.command == "experiment" and args.out is not None:
        overrides["output_dir"] = str(args.out)
    return overrides


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _run_experiment(config: RunConfig) -> int:
    initial_state: ExperimentState = {
        "config": config,
        "output_dir": str(config.output_dir),
        "data_dir": "",
        "checkpoints": {},
        "forecasts": {},
        "reports": {},
        "failed": False,
        "error": "",
        "exit_code": EXIT_OK,
        "summary": {},
    }
    result = build_experiment_graph().invoke(initial_state)
    if result.get("failed"):
        print(f"Error: {result.get('error')}", file=sys.stderr)
        return int(result.get("exit_code", EXIT_INPUT))
    for key, value in result.get("summary", {}).items():
        print(f"{key}: {value:.6g}")
    return EXIT_OK


def run(args: argparse.Namespace) -> int:
    """Execute one parsed command; returns the exit code."""
    config = load_run_config(args.config, _overrides(args))
    configure_runtime(config)
    data_dir = Path(config.data.data_dir)
    out_dir = args.out

    if args.command == "generate-data":
        records = cmd_generate_data(config, out_dir or data_dir)
        print(f"Wrote {len(records)} basins to {out_dir or data_dir}")
    elif args.command == "train":
        outcome = cmd_train(
            config, data_dir, out_dir or Path(config.output_dir), ModelKind(config.model.kind), args.checkpoint
        )
        for row in outcome.fit.trace.itertuples(index=False):
            print(f"epoch {row.epoch}: train_loss={row.train_loss:.6f} val_loss={row.val_loss:.6f}")
        print(f"Checkpoint: {outcome.checkpoint}")
    elif args.command == "forecast":
        dates = parse_dates(args.dates) if args.dates else None
        out_dir = out_dir or Path(config.output_dir) / "forecasts"
        output = cmd_forecast(config, args.checkpoint, data_dir, out_dir, dates)
        print(
            f"Wrote {len(output.frame)} forecast rows "
            f"({output.negative_count} negative, {len(output.skipped)} skipped)"
        )
    elif args.command == "climatology":
        dates = parse_dates(args.dates) if args.dates else None
        output = cmd_climatology(config, data_dir, out_dir or Path(config.output_dir) / "climatology", dates)
        print(f"Wrote {len(output.frame)} climatology rows")
    elif args.command == "evaluate":
        leads = parse_leads(args.leads) if args.leads else None
        out_dir = out_dir or Path(config.output_dir) / "evaluation"
        report = cmd_evaluate(config, args.forecasts, data_dir, out_dir, args.reference, leads)
        headline = report.lead_summary[report.lead_summary["metric"].isin(["nse", "crps"])]
        print(headline.to_string(index=False))
    elif args.command == "experiment":
        return _run_experiment(config)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    """CLI entry point."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT, force=True)
    try:
        return run(args)
    except Exception as exc:
        code = exit_code_for(exc)
        if code == 1:
            raise
        logger.debug("[main] %s", exc, exc_info=True)
        print(f"Error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
