"""
Command line entry point.

    rwre run --config <path> [--out <dir>] [--seed <u64>] [--workers <n>]
    rwre list
    rwre validate-env --config <path>

Exit status: 0 when every enabled assertion passes, 1 when an assertion fails
(reports are still written), 2 for an invalid config or model.
"""

import argparse
import logging
import sys
import time
from typing import List, Optional, Tuple

from config import (
    ExperimentConfig,
    get_config,
    load_experiment_config,
    worker_override,
)
from rwre_toolkit import __version__
from rwre_toolkit.errors import AssertionFailed, ConfigInvalid, ModelInvalid, ModelSpecError
from rwre_toolkit.experiments import list_experiments, run_experiment
from rwre_toolkit.models import EnvironmentModel
from rwre_toolkit.tools.environment import build_model, validate_assumptions
from services.artifacts import ArtifactError, ArtifactStore, utc_timestamp
from services.models import ExperimentRecord, RunManifest
from services.serialization import content_hash, model_hash, report_to_json
from services.service_manager import service_manager

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_INVALID = 2


def configure_logging():
    settings = get_config().logging
    logging.basicConfig(level=getattr(logging, settings.level), format=settings.format)


def resolve_workers(cli_workers: Optional[int], cfg: ExperimentConfig) -> Tuple[int, str]:
    """Worker count and where it came from: cli > environment > config file > settings."""
    if cli_workers:
        return cli_workers, "cli"
    from_env = worker_override()
    if from_env:
        return from_env, "environment"
    if cfg.workers:
        return cfg.workers, "config"
    return get_config().simulation.workers, "settings"


def load_model(cfg: ExperimentConfig) -> EnvironmentModel:
    """
    Build and check the configured model.

    Raises:
        ConfigInvalid: If the model description is malformed (key under model.)
        ModelInvalid: If the model violates the walk assumptions
    """
    try:
        model = build_model(cfg.model)
    except ModelSpecError as e:
        raise ConfigInvalid(str(e), key=f"model.{e.key}" if e.key else "model") from e
    report = validate_assumptions(model)
    if not report.passed:
        failed = ", ".join(f"{c.name} ({c.detail})" for c in report.failures())
        raise ModelInvalid(f"model violates the walk assumptions: {failed}")
    return model


def run(config_path: str, out: Optional[str] = None, seed: Optional[int] = None,
        workers: Optional[int] = None, run_name: Optional[str] = None) -> Tuple[int, Optional[str]]:
    """
    Run every enabled experiment of a config.

    Returns:
        (exit status, run directory or None when nothing was written)
    """
    started = time.perf_counter()
    try:
        cfg = load_experiment_config(config_path)
        if seed is not None:
            cfg = cfg.model_copy(update={"master_seed": seed})
        model = load_model(cfg)
    except (ConfigInvalid, ModelInvalid) as e:
        logger.error(str(e))
        return EXIT_INVALID, None

    worker_count, worker_source = resolve_workers(workers, cfg)
    service_manager.initialize(workers=worker_count)
    store = ArtifactStore(out or cfg.output_dir, run_name=run_name)
    try:
        run_dir = store.init_run()
    except ArtifactError as e:
        logger.error(str(e))
        return EXIT_INVALID, None

    with open(config_path, "r", encoding="utf-8") as fh:
        config_text = fh.read()
    store.save_text("config.yaml", config_text)
    manifest = RunManifest(
        tool_version=__version__,
        config_path=config_path,
        config_hash=content_hash(config_text),
        model_hash=model_hash(model),
        master_seed=cfg.master_seed,
        environment_seeds=list(cfg.environment_seeds),
        workers=worker_count,
        workers_source=worker_source,
        chunk_size=service_manager.chunk_size,
        started_at=utc_timestamp(),
    )

    failed: List[str] = []
    for kind in cfg.enabled_experiments():
        t0 = time.perf_counter()
        result = run_experiment(kind, cfg, model)
        body = {
            "experiment": kind,
            "success": result["success"],
            "passed": result["passed"],
            "error": result["error"],
            "model_hash": manifest.model_hash,
            "master_seed": cfg.master_seed,
            "environment_seeds": list(cfg.environment_seeds),
            "report": result["report"],
        }
        record = ExperimentRecord(
            kind=kind,
            passed=result["passed"],
            success=result["success"],
            seconds=round(time.perf_counter() - t0, 3),
            report_path=store.save_report(kind, body),
            table_path=store.save_table(kind, result["table"]),
            error=result["error"],
            artifact_paths=[store.save_artifact(kind, name, text)
                            for name, text in sorted(result.get("artifacts", {}).items())],
        )
        manifest.experiments.append(record)
        if not result["passed"]:
            failed.append(kind)

    status = EXIT_OK
    if failed:
        error = AssertionFailed(f"assertions failed in: {', '.join(failed)}")
        logger.error(str(error))
        status = EXIT_ASSERTION
    manifest.finished_at = utc_timestamp()
    manifest.total_seconds = round(time.perf_counter() - started, 3)
    manifest.exit_status = status
    store.save_manifest(manifest)
    service_manager.shutdown()
    logger.info(f"Run finished with status {status}: {run_dir}")
    return status, run_dir


def validate_env(config_path: str) -> int:
    """Print the assumption report of the configured model."""
    try:
        cfg = load_experiment_config(config_path)
        model = build_model(cfg.model)
    except ConfigInvalid as e:
        logger.error(str(e))
        return EXIT_INVALID
    except ModelSpecError as e:
        logger.error(str(ConfigInvalid(str(e), key=f"model.{e.key}" if e.key else "model")))
        return EXIT_INVALID
    report = validate_assumptions(model)
    sys.stdout.write(report_to_json({"model_hash": model_hash(model), "assumptions": report}))
    return EXIT_OK if report.passed else EXIT_INVALID


def print_experiments() -> int:
    for info in list_experiments():
        sys.stdout.write(f"{info['kind']}\n")
        sys.stdout.write(f"    checks: {info['claim']}\n")
        sys.stdout.write(f"    parameters: {', '.join(info['parameters'])}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rwre", description="Random walks in time-random environments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="Run the experiments of a config")
    run_parser.add_argument("--config", required=True, help="Experiment config (YAML)")
    run_parser.add_argument("--out", help="Output directory (default: config output_dir)")
    run_parser.add_argument("--seed", type=int, help="Master seed override (unsigned 64-bit)")
    run_parser.add_argument("--workers", type=int, help="Worker processes")

    commands.add_parser("list", help="List experiment kinds")

    validate_parser = commands.add_parser("validate-env", help="Check the model assumptions")
    validate_parser.add_argument("--config", required=True, help="Experiment config (YAML)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    if args.command == "list":
        return print_experiments()
    if args.command == "validate-env":
        return validate_env(args.config)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        logger.error(str(ConfigInvalid("must be an unsigned 64-bit integer", key="master_seed")))
        return EXIT_INVALID
    if args.workers is not None and args.workers < 1:
        logger.error(str(ConfigInvalid("must be >= 1", key="workers")))
        return EXIT_INVALID
    status, _ = run(args.config, out=args.out, seed=args.seed, workers=args.workers)
    return status


if __name__ == "__main__":
    sys.exit(main())
