"""
Acceptance Run

Trains and evaluates the full six-row grid on the default synthetic
benchmark (10 seeds, 4000 iterations unless overridden) and checks the
variant ordering: Dirichlet NLL falls during training, Dirichlet
single-image accuracy matches Naive Bayes, the masked Dirichlet agent
with a learned policy is at least as accurate as its random-policy and
Naive Bayes counterparts in most seeds, and the Naive Bayes policy
concentrates on fewer action pairs.

Usage:
    python scripts/acceptance.py --out runs/acceptance --threads 4
    python scripts/acceptance.py --out runs/quick --train.num_iterations 500 --eval.seeds 0 1 2

Exit status is 0 when every check passes, 1 otherwise.
"""

import argparse
import os
import sys
from dataclasses import replace
from typing import Dict, List

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from observability.logger import LogLevel, configure_logging, get_logger
from src import env
from src.agent import train
from src.config import add_config_arguments, resolve_config, save_config
from src.evaluation import acceptance_checks, compare, grid_run_specs, nll_trend, transition_stats
from src.storage import atomic_write_text, write_json

logger = get_logger("aor.acceptance")


def run_acceptance(config) -> Dict[str, object]:
    full = env.gen_synthetic(config.env.synthetic(), config.seed)
    train_set, test_set = env.split_by_track(full, config.env.train_tracks)
    actions = config.env.action_set(train_set.num_bins)
    spec = config.network.spec(train_set.feature_dim, train_set.num_classes, actions.num_actions)

    trends: List[Dict[str, float]] = []
    concentrations: Dict[str, List[float]] = {}

    def trainer(encoder, mask_repeats, seed):
        run_config = replace(config.train, encoder_kind=encoder.value, mask_repeats=mask_repeats, seed=seed)
        result = train(train_set, run_config, spec, actions)
        if run_config.encoder_kind == "dirichlet":
            trends.append(nll_trend(result.log))
        seed_eval = replace(config.eval, seeds=[seed])
        stats = transition_stats(result.params, result.table, test_set, run_config, seed_eval, 1, actions)
        concentrations.setdefault(run_config.variant, []).append(stats.concentration())
        logger.info("model trained", variant=run_config.variant, seed=seed, concentration=stats.concentration())
        return result.params, result.table

    report = compare(grid_run_specs(), test_set, trainer, config.train, config.eval, config.threads, actions)
    checks = acceptance_checks(report.table, trends, concentrations)
    return {"report": report, "checks": checks, "concentrations": concentrations, "nll_trends": trends}


def checks_markdown(checks) -> str:
    lines = ["# Acceptance checks", "", "| Check | Result | Detail |", "|---|---|---|"]
    for check in checks:
        lines.append(f"| {check.name} | {'PASS' if check.passed else 'FAIL'} | {check.detail} |")
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Full-grid acceptance run")
    add_config_arguments(parser)
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
    except (ValueError, TypeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    os.makedirs(config.output_dir, exist_ok=True)
    configure_logging(config.output_dir, LogLevel.INFO)
    save_config(config)
    outcome = run_acceptance(config)

    outcome["report"].save(config.output_path("report.json"))
    atomic_write_text(config.output_path("report.md"), outcome["report"].to_markdown())
    write_json(config.output_path("acceptance.json"), {
        "checks": [c.to_dict() for c in outcome["checks"]],
        "concentrations": outcome["concentrations"],
        "nll_trends": outcome["nll_trends"]
    })
    summary = checks_markdown(outcome["checks"])
    atomic_write_text(config.output_path("acceptance.md"), summary)
    print(summary)

    failed = [c.name for c in outcome["checks"] if not c.passed]
    if failed:
        logger.error("acceptance checks failed", failed=failed)
        return 1
    logger.info("acceptance checks passed", checks=len(outcome["checks"]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
