"""
Command Line Interface

Subcommands:
    gen-data       write a synthetic track file
    train          jointly train the network and the Dirichlet table
    eval           accuracy vs observed moves, per policy or over the variant grid
    export-policy  consecutive-action statistics as CSV and Graphviz DOT

Exit status is 0 when every output was written, 1 on runtime failures
and 2 on usage errors.
"""

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Tuple

from observability import MetricsCollector, RunExporter, Tracer, collect_system_metrics
from observability.logger import LogLevel, configure_logging, get_logger, run_scope
from src import env
from src.agent import LEARNED, TrainingAbortedError, train
from src.belief import DirichletTable, EncoderKind
from src.config import RunConfig, add_config_arguments, resolve_config, save_config
from src.evaluation import (
    ComparisonReport, compare, compare_rows, evaluate, grid_run_specs, nll_curve_csv, nll_trend,
    transition_stats
)
from src.net import NetworkParams
from src.storage import atomic_write_text, write_json

logger = get_logger("aor.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class CommandError(Exception):
    """A command cannot produce its outputs; reported and mapped to exit status 1."""


Datasets = Tuple[Optional[env.TrackDataset], Optional[env.TrackDataset]]


def load_datasets(config: RunConfig) -> Datasets:
    """(train, test) from pre-split files, one file split by track, or fresh synthetic data."""
    paths = config.paths
    if paths.train_data or paths.test_data:
        train_set = env.load_tracks(paths.train_data, "train") if paths.train_data else None
        test_set = env.load_tracks(paths.test_data, "test") if paths.test_data else None
        return train_set, test_set
    if paths.data:
        full = env.load_tracks(paths.data)
    else:
        full = env.gen_synthetic(config.env.synthetic(), config.seed)
    return env.split_by_track(full, config.env.train_tracks)


def _require(dataset: Optional[env.TrackDataset], what: str) -> env.TrackDataset:
    if dataset is None or not dataset.tracks:
        raise CommandError(f"no {what} data available")
    return dataset


def load_model(config: RunConfig, need_q_head: bool) -> Tuple[NetworkParams, DirichletTable]:
    checkpoint = config.checkpoint_path()
    if not os.path.exists(checkpoint):
        raise CommandError(f"checkpoint not found: {checkpoint}")
    params = NetworkParams.load(checkpoint)
    if need_q_head and not params.has_q_head:
        raise CommandError(f"checkpoint {checkpoint} has no action head; only the random policy can use it")

    table_path = config.table_path()
    if os.path.exists(table_path):
        table = DirichletTable.load(table_path)
    elif config.train.encoder == EncoderKind.NAIVE_BAYES:
        table = DirichletTable.uniform(params.spec.num_classes, params.spec.num_actions)
    else:
        raise CommandError(f"Dirichlet table not found: {table_path}")
    return params, table


def write_training_log(path: str, log: List[Dict[str, float]]) -> str:
    return atomic_write_text(path, "".join(json.dumps(record) + "\n" for record in log))


def cmd_gen_data(config: RunConfig, exporter: RunExporter) -> int:
    path = config.paths.data or config.output_path("tracks.csv")
    with Tracer().span("generate", {"num_classes": config.env.num_classes, "num_tracks": config.env.num_tracks}):
        dataset = env.gen_synthetic(config.env.synthetic(), config.seed)
        env.save_tracks(dataset, path)
    save_config(config)

    exporter.add_results("dataset", {"path": path, "records": dataset.num_observations,
                                     "tracks": len(dataset.tracks)})
    logger.info("track file written", path=path, records=dataset.num_observations)
    return EXIT_OK


def cmd_train(config: RunConfig, exporter: RunExporter) -> int:
    train_set = _require(load_datasets(config)[0], "training")
    actions = config.env.action_set(train_set.num_bins)
    spec = config.network.spec(train_set.feature_dim, train_set.num_classes, actions.num_actions)
    save_config(config)
    log_path = config.output_path("training_log.jsonl")

    logger.info("training started", variant=config.train.variant, iterations=config.train.num_iterations,
                tracks=len(train_set.tracks))
    try:
        with MetricsCollector().timer("train.duration", "Training wall time").time():
            with Tracer().span("train", {"variant": config.train.variant}):
                result = train(train_set, config.train, spec, actions)
    except TrainingAbortedError as e:
        write_training_log(log_path, e.log)
        exporter.add_results("training", {"aborted_at": e.iteration, "records": len(e.log)})
        logger.critical("training aborted, partial log written", iteration=e.iteration, path=log_path,
                        reason=str(e))
        return EXIT_FAILURE

    result.params.save(config.checkpoint_path())
    result.table.save(config.table_path())
    write_training_log(log_path, result.log)
    atomic_write_text(config.output_path("nll_curve.csv"), nll_curve_csv(result.log, config.eval.smoothing_window))

    summary = {"iterations": len(result.log)}
    if result.log:
        trend = nll_trend(result.log)
        summary.update(final_c_cl=result.log[-1]["c_cl"], final_c_rl=result.log[-1]["c_rl"],
                       nll_first_10pct=trend["first_10pct"], nll_last_10pct=trend["last_10pct"])
    exporter.add_results("training", summary)
    logger.info("training finished", checkpoint=config.checkpoint_path(), **summary)
    return EXIT_OK


def _grid_trainer(config: RunConfig, train_set: env.TrackDataset, actions: env.ActionSet):
    spec = config.network.spec(train_set.feature_dim, train_set.num_classes, actions.num_actions)

    def trainer(encoder: EncoderKind, mask_repeats: bool, seed: int):
        run_config = replace(config.train, encoder_kind=encoder.value, mask_repeats=mask_repeats, seed=seed)
        with Tracer().span("train", {"variant": run_config.variant, "seed": seed}):
            result = train(train_set, run_config, spec, actions)
        return result.params, result.table

    return trainer


def _write_report(config: RunConfig, report: ComparisonReport) -> None:
    report.save(config.output_path("report.json"))
    atomic_write_text(config.output_path("report.md"), report.to_markdown())
    atomic_write_text(config.output_path("accuracy.csv"), report.table.to_csv())
    atomic_write_text(config.output_path("accuracy_per_seed.csv"), report.table.per_seed_csv())


def cmd_eval(config: RunConfig, exporter: RunExporter) -> int:
    train_set, test_set = load_datasets(config)
    test_set = _require(test_set, "test")
    actions = config.env.action_set(test_set.num_bins)
    save_config(config)

    if config.eval.grid:
        trainer = _grid_trainer(config, _require(train_set, "training"), actions)
        report = compare(grid_run_specs(config.eval.policies), test_set, trainer, config.train, config.eval,
                         config.threads, actions)
    else:
        params, table = load_model(config, need_q_head=LEARNED in config.eval.policies)
        tables = [evaluate(params, table, test_set, policy, config.train, config.eval, config.threads, actions)
                  for policy in config.eval.policies]
        merged = tables[0]
        for t in tables[1:]:
            merged = merged.merged(t)
        rows = merged.rows
        pairs = [compare_rows(rows[i], rows[j]) for i in range(len(rows)) for j in range(i + 1, len(rows))]
        report = ComparisonReport(merged, pairs)

    _write_report(config, report)
    exporter.add_results("evaluation", {"rows": [row.to_dict() for row in report.table.rows]})
    logger.info("evaluation written", runs=report.table.names, path=config.output_path("report.json"))
    return EXIT_OK


def cmd_export_policy(config: RunConfig, exporter: RunExporter) -> int:
    train_set, test_set = load_datasets(config)
    if train_set is None and test_set is None:
        raise CommandError("no track data to play")
    params, table = load_model(config, need_q_head=True)

    summary = {}
    for split, dataset in (("train", train_set), ("test", test_set)):
        if dataset is None or not dataset.tracks:
            continue
        actions = config.env.action_set(dataset.num_bins)
        with Tracer().span("export_policy", {"split": split}):
            stats = transition_stats(params, table, dataset, config.train, config.eval, config.threads, actions)
        atomic_write_text(config.output_path(f"policy_{split}.csv"), stats.to_csv())
        atomic_write_text(config.output_path(f"policy_{split}.dot"), stats.to_dot(f"policy_{split}"))
        summary[split] = stats.to_dict()
        logger.info("policy statistics written", split=split, episodes=stats.num_episodes,
                    concentration=stats.concentration())

    write_json(config.output_path("policy_stats.json"), summary)
    save_config(config)
    exporter.add_results("policy", {split: {"episodes": s["num_episodes"], "concentration": s["concentration"]}
                                    for split, s in summary.items()})
    return EXIT_OK


COMMANDS: Dict[str, Tuple[Callable[[RunConfig, RunExporter], int], str]] = {
    "gen-data": (cmd_gen_data, "Write a synthetic track file"),
    "train": (cmd_train, "Train network and Dirichlet table"),
    "eval": (cmd_eval, "Accuracy vs observed moves"),
    "export-policy": (cmd_export_policy, "Consecutive-action statistics for train and test splits"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aor", description="Active object recognition on a rotating gripper")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        add_config_arguments(sub)
        verbosity = sub.add_mutually_exclusive_group()
        verbosity.add_argument("--quiet", action="store_true", help="Console shows warnings and errors only")
        verbosity.add_argument("--verbose", action="store_true", help="Console shows per-iteration records")
        sub.add_argument("--json-logs", action="store_true", help="Also write JSON log lines to stdout")
    return parser


def _console_level(args: argparse.Namespace) -> LogLevel:
    if args.quiet:
        return LogLevel.WARN
    if args.verbose:
        return LogLevel.DEBUG
    return LogLevel.INFO


def run_command(command: str, config: RunConfig, console_level: LogLevel = LogLevel.INFO,
                json_logs: bool = False) -> int:
    """Run one subcommand inside a fresh observability scope and export its run report."""
    handler = COMMANDS[command][0]
    try:
        os.makedirs(config.output_dir, exist_ok=True)
    except OSError as e:
        print(f"error: cannot create output directory {config.output_dir}: {e}", file=sys.stderr)
        return EXIT_FAILURE

    MetricsCollector.reset_instance()
    Tracer.reset_instance()
    memory_handler = configure_logging(config.output_dir, console_level, json_logs)
    metrics = MetricsCollector()
    metrics.set_metadata("command", command)
    metrics.set_metadata("seed", config.seed)
    tracer = Tracer()
    tracer.configure("aor", command=command)
    exporter = RunExporter(config.output_dir)
    exporter.set_memory_handler(memory_handler)

    status = EXIT_FAILURE
    with run_scope(command, seed=config.seed):
        collect_system_metrics(metrics)
        try:
            with tracer.span(f"command.{command}", {"seed": config.seed, "output": config.output_dir}):
                status = handler(config, exporter)
        except CommandError as e:
            logger.error(str(e))
        except (OSError, ValueError, FloatingPointError) as e:
            logger.exception("command failed", exc_info=e, error_type=type(e).__name__)
        finally:
            collect_system_metrics(metrics, prefix="system.end")
            logger.info("command finished", status=status)
            try:
                exporter.export_all()
            except OSError as e:
                logger.warn("run report not written", error=str(e))
    return status


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
    except (ValueError, TypeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return run_command(args.command, config, _console_level(args), args.json_logs)


if __name__ == "__main__":
    sys.exit(main())
