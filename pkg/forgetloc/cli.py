"""
Command-line entry point.

    forgetloc run --scenario icl --runs 2 --epochs 1
    forgetloc report --format csv
    forgetloc verify --quadratic-oracle
    forgetloc fetch --source mnist
    forgetloc serve --port 8000

Exit codes: 0 success, 1 a verify check failed, 2 usage or runtime error.
"""

import argparse
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from forgetloc.config.settings import app_settings
from forgetloc.models.schemas import (
    DataSource, ExportFormat, FigureMode, ModelConfig, OptimizerKind, PathIntegralConfig,
    Quadrature, RunManifest, ScenarioKind, ScenarioSpec, TrackingWindow, TrainConfig
)
from forgetloc.utils.exceptions import ForgetLocError, InvalidInputError
from forgetloc.utils.logger import configure_logging, logger


def _add_run_parser(subparsers) -> None:
    run = subparsers.add_parser("run", help="train a task sequence with per-parameter attribution")
    run.add_argument("--scenario", required=True, choices=[k.value for k in ScenarioKind])
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--runs", type=int, default=app_settings.runs, help="repetitions with seeds seed, seed+1, ...")
    run.add_argument("--tasks", type=int, default=2, help="number of tasks in the sequence")
    run.add_argument("--epochs", type=int, default=app_settings.epochs)
    run.add_argument("--batch-size", type=int, default=app_settings.batch_size)
    run.add_argument("--lr", type=float, default=app_settings.learning_rate)
    run.add_argument("--optimizer", choices=[o.value for o in OptimizerKind], default=app_settings.optimizer.value)
    run.add_argument("--beta1", type=float, default=app_settings.adam_beta1)
    run.add_argument("--beta2", type=float, default=app_settings.adam_beta2)
    run.add_argument("--epsilon", type=float, default=app_settings.adam_epsilon)
    run.add_argument("--train-limit", type=int, default=None, help="first N training examples per task")
    run.add_argument("--quadrature", choices=[q.value for q in Quadrature], default=app_settings.quadrature.value)
    run.add_argument("--substeps", type=int, default=app_settings.substeps)
    run.add_argument("--eval-size", type=int, default=app_settings.eval_set_size)
    run.add_argument("--eval-seed", type=int, default=None, help="defaults to the run seed")
    run.add_argument("--window", choices=[w.value for w in TrackingWindow],
                     default=app_settings.tracking_window.value)
    run.add_argument("--permutation-seed", type=int, default=0)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--data-dir", type=Path, default=None)
    run.add_argument("--out", type=Path, default=None)
    run.add_argument("--save-model", action="store_true", help="also store the final parameters of each run")
    run.set_defaults(handler=_run)


def _add_report_parser(subparsers) -> None:
    report = subparsers.add_parser("report", help="aggregate stored runs into CSV, JSON or SVG")
    report.add_argument("--in", dest="in_dirs", type=Path, nargs="+", default=None,
                        help="experiment directories (default: the latest run)")
    report.add_argument("--format", choices=[f.value for f in ExportFormat], default=ExportFormat.CSV.value)
    report.add_argument("--mode", choices=[m.value for m in FigureMode], default=FigureMode.SUM.value)
    report.add_argument("--transition", type=int, default=0)
    report.add_argument("--out", type=Path, default=None)
    report.set_defaults(handler=_report)


def _add_verify_parser(subparsers) -> None:
    verify = subparsers.add_parser("verify", help="numerical self-checks")
    which = verify.add_mutually_exclusive_group(required=True)
    which.add_argument("--gradients", action="store_true")
    which.add_argument("--quadratic-oracle", action="store_true")
    which.add_argument("--quadrature-convergence", action="store_true")
    which.add_argument("--layer-pattern", action="store_true")
    verify.add_argument("--seeds", type=int, default=20)
    verify.add_argument("--coords", type=int, default=200)
    verify.add_argument("--train-limit", type=int, default=2000)
    verify.add_argument("--epochs", type=int, default=2)
    verify.add_argument("--eval-size", type=int, default=512)
    verify.add_argument("--in", dest="in_dirs", type=Path, nargs="+", default=None)
    verify.add_argument("--data-dir", type=Path, default=None)
    verify.set_defaults(handler=_verify)


def _add_fetch_parser(subparsers) -> None:
    fetch = subparsers.add_parser("fetch", help="download and cache MNIST / FashionMNIST")
    fetch.add_argument("--source", choices=[s.value for s in DataSource] + ["all"], default="all")
    fetch.add_argument("--mirror", default=None, help="override the configured mirror URL")
    fetch.add_argument("--cache-dir", type=Path, default=None)
    fetch.set_defaults(handler=_fetch)


def _add_serve_parser(subparsers) -> None:
    serve = subparsers.add_parser("serve", help="read-only HTTP API over stored results")
    serve.add_argument("--host", default=None, help="defaults to HOST")
    serve.add_argument("--port", type=int, default=None, help="defaults to PORT")
    serve.set_defaults(handler=_serve)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forgetloc",
        description="Localize catastrophic forgetting to individual parameters."
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for add in (_add_run_parser, _add_report_parser, _add_verify_parser, _add_fetch_parser, _add_serve_parser):
        add(subparsers)
    return parser

# ============================================================================
# HANDLERS
# ============================================================================

def _run(args: argparse.Namespace) -> int:
    from forgetloc.services.health_service import host_info
    from forgetloc.services.results_service import write_experiment
    from forgetloc.services.training_service import run_experiment

    spec = ScenarioSpec(kind=args.scenario, seed=args.seed, task_count=args.tasks,
                        permutation_seed=args.permutation_seed)
    train = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, beta1=args.beta1,
                        beta2=args.beta2, epsilon=args.epsilon, optimizer=args.optimizer,
                        train_limit=args.train_limit)
    path = PathIntegralConfig(quadrature=args.quadrature, substeps=args.substeps, eval_set_size=args.eval_size,
                              eval_set_seed=args.eval_seed, window=args.window)
    data_dir = args.data_dir or app_settings.data_dir
    started = datetime.now(timezone.utc)
    out = args.out or app_settings.results_dir / f"{spec.kind.value}-seed{args.seed}-{started:%Y%m%d-%H%M%S}"

    artifacts = run_experiment(spec, train, path, args.seed, args.runs, args.workers, data_dir,
                               keep_model=args.save_model)
    head_count = spec.task_count if spec.kind is ScenarioKind.ITL else 1
    manifest = RunManifest(
        scenario=spec,
        seeds=[a.result.seed for a in artifacts],
        model=ModelConfig(head_count=head_count),
        train=train,
        path=path,
        data_dir=str(data_dir),
        started_at=started,
        finished_at=datetime.now(timezone.utc),
        host=host_info()
    )
    write_experiment(out, manifest, artifacts)

    for item in artifacts:
        for report in item.result.reports:
            logger.info(f"run {item.result.run_index} transition {report.transition}: "
                        f"exact dL={report.exact_delta:.6g} approx={report.approx_delta:.6g} "
                        f"rel.err={report.relative_error:.3g}")
    print(out)
    return 0


def _report(args: argparse.Namespace) -> int:
    from forgetloc.services.report_service import emit_figure, export, multi_run
    from forgetloc.services.results_service import latest_experiment, load_run_results, reports_for_transition

    dirs: List[Path] = args.in_dirs or [latest_experiment()]
    stats = [multi_run(reports_for_transition(load_run_results(d), args.transition)) for d in dirs]
    fmt = ExportFormat(args.format)

    if fmt is ExportFormat.SVG:
        target = args.out or dirs[0] / f"figure_t{args.transition}_{args.mode}.svg"
        print(emit_figure(stats if len(stats) > 1 else stats[0], FigureMode(args.mode), target))
        return 0

    if args.out is not None and len(dirs) > 1:
        raise InvalidInputError("--out with several --in directories is only supported for svg")
    for folder, folder_stats in zip(dirs, stats):
        target = args.out or folder / f"report_t{args.transition}.{fmt.value}"
        print(export(folder_stats, fmt.value, target))
    return 0


def _verify(args: argparse.Namespace) -> int:
    from forgetloc.services import verify_service
    from forgetloc.services.data_service import DataService

    if args.gradients:
        checks = [verify_service.gradient_check(range(args.seeds), coords=args.coords)]
    elif args.quadratic_oracle:
        checks = [verify_service.quadratic_oracle()]
    elif args.quadrature_convergence:
        checks = [verify_service.quadrature_convergence(DataService(args.data_dir), train_limit=args.train_limit,
                                                        epochs=args.epochs, eval_size=args.eval_size)]
    else:
        if not args.in_dirs:
            raise InvalidInputError("--layer-pattern needs --in with one or more experiment directories")
        checks = verify_service.layer_pattern(args.in_dirs)

    for check in checks:
        print(json.dumps(check.model_dump(mode="json")))
        (logger.info if check.passed else logger.error)(f"{check.name}: {'PASS' if check.passed else 'FAIL'}")
    return 0 if all(check.passed for check in checks) else 1


def _fetch(args: argparse.Namespace) -> int:
    from forgetloc.services.data_service import fetch_dataset

    config = app_settings.get_fetch_config()
    sources = list(DataSource) if args.source == "all" else [DataSource(args.source)]
    cache_dir = args.cache_dir or Path(config.cache_dir)
    for source in sources:
        paths = fetch_dataset(source, args.mirror or config.mirrors[source], cache_dir, config.timeout)
        for path in paths.values():
            print(path)
    return 0


def _serve(args: argparse.Namespace) -> int:
    import uvicorn

    config = app_settings.get_app_config()
    uvicorn.run("forgetloc.main:app", host=args.host or config.host, port=args.port or config.port,
                reload=config.reload)
    return 0


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code is None else int(e.code)

    configure_logging(app_settings)
    try:
        return args.handler(args)
    except ForgetLocError as e:
        logger.error(f"{args.command} failed: {e}")
        return 2
    except ValidationError as e:
        logger.error(f"{args.command}: invalid configuration\n{e}")
        return 2
