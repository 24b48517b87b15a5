"""
Policy Evaluation

Accuracy as a function of the number of observed frames, comparisons of
encoder/policy variants across seeds, consecutive-action statistics for
policy visualization, and the Dirichlet NLL learning curve.
"""

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from observability.logger import get_logger
from observability.metrics import MetricsCollector
from observability.tracer import Tracer
from src import env
from src.agent import LEARNED, POLICIES, RANDOM, TrainConfig, run_episode, variant_name
from src.belief import DirichletTable, EncoderKind
from src.net import NetworkParams
from src.storage import atomic_write_text

logger = get_logger("aor.evaluation")

Model = Tuple[NetworkParams, DirichletTable]
Trainer = Callable[[EncoderKind, bool, int], Model]


@dataclass
class EvalConfig:
    """How many episodes, from which poses, over which seeds."""
    episodes_per_track: int = 5
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    initial_poses: List[int] = field(default_factory=list)
    policies: List[str] = field(default_factory=lambda: [RANDOM, LEARNED])
    grid: bool = False
    smoothing_window: int = 50

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        self.initial_poses = [int(p) for p in self.initial_poses]
        if self.episodes_per_track < 1:
            raise ValueError("episodes_per_track must be positive")
        if not self.seeds:
            raise ValueError("at least one evaluation seed is required")
        unknown = [p for p in self.policies if p not in POLICIES]
        if unknown:
            raise ValueError(f"unknown policies {unknown}; choose from {POLICIES}")
        if self.smoothing_window < 1:
            raise ValueError("smoothing_window must be positive")


@dataclass(frozen=True)
class RunSpec:
    """One row of a comparison: encoder, repeat masking and policy."""
    encoder_kind: EncoderKind
    mask_repeats: bool
    policy: str

    def __post_init__(self):
        object.__setattr__(self, "encoder_kind", EncoderKind(self.encoder_kind))
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")

    @property
    def name(self) -> str:
        return f"{variant_name(self.encoder_kind, self.mask_repeats)}/{self.policy}"


# Naive Bayes, Dirichlet, and Dirichlet without repeated views; each under both policies.
VARIANTS = (
    (EncoderKind.NAIVE_BAYES, False),
    (EncoderKind.DIRICHLET, False),
    (EncoderKind.DIRICHLET, True),
)


def grid_run_specs(policies: Sequence[str] = (RANDOM, LEARNED)) -> List[RunSpec]:
    return [RunSpec(encoder, mask, policy) for encoder, mask in VARIANTS for policy in policies]


@dataclass
class AccuracyRow:
    """
    Accuracy after 0..T observed moves for one run spec.

    `per_seed[s][t]` is the fraction of correct label readouts after t
    moves under seed `seeds[s]`; every seed contributes the same number of
    episodes, so the overall accuracy is the mean over seeds.
    """

    name: str
    per_seed: List[List[float]]
    episodes_per_seed: int

    @property
    def accuracy(self) -> List[float]:
        return np.mean(np.asarray(self.per_seed, dtype=float), axis=0).tolist()

    @property
    def stderr(self) -> List[float]:
        n = self.episodes_per_seed * len(self.per_seed)
        return [math.sqrt(p * (1.0 - p) / n) for p in self.accuracy]

    def seed_scores(self) -> List[float]:
        """Per-seed mean accuracy over the frames after the first."""
        return [float(np.mean(row[1:])) if len(row) > 1 else float(row[0]) for row in self.per_seed]

    def to_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "accuracy": self.accuracy,
            "stderr": self.stderr,
            "per_seed": self.per_seed,
            "episodes_per_seed": self.episodes_per_seed
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> 'AccuracyRow':
        return cls(data["name"], [list(map(float, r)) for r in data["per_seed"]], int(data["episodes_per_seed"]))


@dataclass
class AccuracyTable:
    rows: List[AccuracyRow]
    num_episodes: int
    seeds: List[int]

    def row(self, name: str) -> AccuracyRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    @property
    def names(self) -> List[str]:
        return [row.name for row in self.rows]

    def merged(self, other: 'AccuracyTable') -> 'AccuracyTable':
        if self.seeds != other.seeds:
            raise ValueError("only tables over the same seeds can be merged")
        return AccuracyTable(self.rows + other.rows, self.num_episodes, list(self.seeds))

    def to_dict(self) -> Dict[str, object]:
        return {
            "num_episodes": self.num_episodes,
            "seeds": self.seeds,
            "rows": [row.to_dict() for row in self.rows]
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> 'AccuracyTable':
        return cls([AccuracyRow.from_dict(r) for r in data["rows"]], int(data["num_episodes"]),
                   [int(s) for s in data["seeds"]])

    def to_csv(self) -> str:
        """One line per row and frame count: name, frames, accuracy, stderr."""
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["run", "observed_moves", "accuracy", "stderr"])
        for row in self.rows:
            for t, (acc, err) in enumerate(zip(row.accuracy, row.stderr)):
                writer.writerow([row.name, t, repr(acc), repr(err)])
        return out.getvalue()

    def per_seed_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["run", "seed", "observed_moves", "accuracy"])
        for row in self.rows:
            for seed, values in zip(self.seeds, row.per_seed):
                for t, acc in enumerate(values):
                    writer.writerow([row.name, seed, t, repr(acc)])
        return out.getvalue()


@dataclass
class SeedOutcome:
    """Counts from the episodes of one seed; merges by addition."""
    correct: np.ndarray
    episodes: int
    action_pairs: np.ndarray


def _episode_keys(dataset: env.TrackDataset) -> List[env.TrackKey]:
    keys = dataset.track_keys()
    if not keys:
        raise ValueError("evaluation needs a non-empty test set")
    return keys


def evaluate_seed(params: NetworkParams, table: DirichletTable, dataset: env.TrackDataset, policy: str,
                  config: TrainConfig, eval_config: EvalConfig, seed: int,
                  actions: Optional[env.ActionSet] = None) -> SeedOutcome:
    """
    Play `episodes_per_track` greedy (or random) episodes on every track.

    Initial poses come from their own stream, so every policy starts from
    the same poses for a given seed.
    """
    actions = actions or env.ActionSet.standard(dataset.num_bins)
    moves = config.moves_per_sequence
    pose_rng = np.random.default_rng([seed, 0])
    policy_rng = np.random.default_rng([seed, 1])

    correct = np.zeros(moves + 1, dtype=int)
    pairs = np.zeros((max(moves - 1, 0), actions.num_actions, actions.num_actions), dtype=int)
    episodes = 0
    for key in _episode_keys(dataset):
        for index in range(eval_config.episodes_per_track):
            pose = env.sample_initial_pose(dataset, key, pose_rng, eval_config.initial_poses, index)
            result = run_episode(params, table, dataset, key, pose, config, actions, policy_rng,
                                 mode="eval", policy=policy)
            correct += np.array([b.argmax() == key[0] for b in result.readouts], dtype=int)
            for t in range(moves - 1):
                pairs[t, result.actions[t], result.actions[t + 1]] += 1
            episodes += 1
    return SeedOutcome(correct, episodes, pairs)


def _run_seeds(models: Dict[int, Model], dataset: env.TrackDataset, policy: str, config: TrainConfig,
               eval_config: EvalConfig, threads: int, actions: Optional[env.ActionSet]) -> Dict[int, SeedOutcome]:
    parent = Tracer().current_span()

    def work(seed: int) -> SeedOutcome:
        params, table = models[seed]
        with Tracer().span("evaluate.seed", {"seed": seed, "policy": policy}, parent=parent):
            return evaluate_seed(params, table, dataset, policy, config, eval_config, seed, actions)

    seeds = list(eval_config.seeds)
    if threads <= 1 or len(seeds) == 1:
        outcomes = [work(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            outcomes = list(executor.map(work, seeds))

    MetricsCollector().counter("eval.episodes", "Evaluation episodes played").inc(sum(o.episodes for o in outcomes))
    return dict(zip(seeds, outcomes))


def _row(name: str, outcomes: Dict[int, SeedOutcome], seeds: Sequence[int]) -> AccuracyRow:
    per_seed = [(outcomes[s].correct / outcomes[s].episodes).tolist() for s in seeds]
    histogram = MetricsCollector().histogram("eval.final_accuracy", "Final-step accuracy per seed",
                                             buckets=[0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0])
    histogram.observe_many([r[-1] for r in per_seed])
    return AccuracyRow(name, per_seed, outcomes[seeds[0]].episodes)


def evaluate(params: NetworkParams, table: DirichletTable, dataset_test: env.TrackDataset, policy: str,
             config: TrainConfig, eval_config: EvalConfig, threads: int = 1,
             actions: Optional[env.ActionSet] = None, name: Optional[str] = None) -> AccuracyTable:
    """
    Label accuracy after 0..T moves of one model under one policy.

    Seeds vary the initial poses (and the random policy's draws); the
    result has a single row.
    """
    if dataset_test.split == "train":
        raise ValueError("evaluate needs the test split, got the training split")
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
    _episode_keys(dataset_test)

    models = {seed: (params, table) for seed in eval_config.seeds}
    outcomes = _run_seeds(models, dataset_test, policy, config, eval_config, threads, actions)
    row_name = name or RunSpec(config.encoder, config.mask_repeats, policy).name
    row = _row(row_name, outcomes, eval_config.seeds)
    logger.info("evaluation complete", run=row_name, accuracy=row.accuracy)
    return AccuracyTable([row], row.episodes_per_seed, list(eval_config.seeds))


@dataclass
class TransitionStats:
    """
    Consecutive-action counts: `counts[t, i, j]` is how often action `i`
    at move t+1 was followed by action `j` at move t+2.
    """

    counts: np.ndarray
    num_episodes: int
    action_labels: List[str]

    @property
    def num_steps(self) -> int:
        return self.counts.shape[0]

    def totals(self) -> List[int]:
        return [int(c.sum()) for c in self.counts]

    def concentration(self) -> float:
        """Mean over step pairs of the largest cell's share of that step's transitions."""
        if self.num_steps == 0 or self.num_episodes == 0:
            return 0.0
        return float(np.mean([c.max() / c.sum() for c in self.counts]))

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["step", "from_action", "to_action", "from_label", "to_label", "count"])
        for t, matrix in enumerate(self.counts):
            for i, j in zip(*np.nonzero(matrix)):
                writer.writerow([t + 1, int(i), int(j), self.action_labels[i], self.action_labels[j],
                                 int(matrix[i, j])])
        return out.getvalue()

    def to_dot(self, name: str = "policy") -> str:
        """Graphviz digraph: one node per (move, action), edge width by frequency."""
        lines = [f'digraph "{name}" {{', "  rankdir=LR;", "  node [shape=box];"]
        peak = max(int(self.counts.max()), 1) if self.counts.size else 1
        for t, matrix in enumerate(self.counts):
            for i, j in zip(*np.nonzero(matrix)):
                weight = int(matrix[i, j])
                width = 0.5 + 4.5 * weight / peak
                lines.append(
                    f'  "m{t + 1}_a{i}" -> "m{t + 2}_a{j}" [weight={weight}, penwidth={width:.2f}, label="{weight}"];'
                )
        nodes = set()
        for t, matrix in enumerate(self.counts):
            nodes.update((t + 1, int(i)) for i in np.nonzero(matrix.sum(axis=1))[0])
            nodes.update((t + 2, int(j)) for j in np.nonzero(matrix.sum(axis=0))[0])
        for move, action in sorted(nodes):
            lines.append(f'  "m{move}_a{action}" [label="move {move}\\n{self.action_labels[action]}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict[str, object]:
        return {
            "num_episodes": self.num_episodes,
            "action_labels": self.action_labels,
            "counts": self.counts.tolist(),
            "concentration": self.concentration()
        }


def transition_stats(params: NetworkParams, table: DirichletTable, dataset: env.TrackDataset,
                     config: TrainConfig, eval_config: EvalConfig, threads: int = 1,
                     actions: Optional[env.ActionSet] = None) -> TransitionStats:
    """Consecutive-action counts of greedy episodes; totals equal the episode count at every step."""
    actions = actions or env.ActionSet.standard(dataset.num_bins)
    _episode_keys(dataset)
    models = {seed: (params, table) for seed in eval_config.seeds}
    outcomes = _run_seeds(models, dataset, LEARNED, config, eval_config, threads, actions)
    counts = sum(o.action_pairs for o in outcomes.values())
    episodes = sum(o.episodes for o in outcomes.values())
    labels = [actions.label(a) for a in range(actions.num_actions)]
    return TransitionStats(np.asarray(counts), episodes, labels)


@dataclass
class PairComparison:
    """Row `b` minus row `a`, per frame count, and per-seed wins of `b` over `a`."""
    a: str
    b: str
    delta: List[float]
    wins: int
    ties: int
    losses: int

    def to_dict(self) -> Dict[str, object]:
        return {"a": self.a, "b": self.b, "delta": self.delta,
                "wins": self.wins, "ties": self.ties, "losses": self.losses}


@dataclass
class ComparisonReport:
    table: AccuracyTable
    pairs: List[PairComparison]

    def to_dict(self) -> Dict[str, object]:
        return {"table": self.table.to_dict(), "pairs": [p.to_dict() for p in self.pairs]}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> 'ComparisonReport':
        return cls(AccuracyTable.from_dict(data["table"]), [PairComparison(**p) for p in data["pairs"]])

    def save(self, path: str) -> str:
        return atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str) -> 'ComparisonReport':
        with open(path, 'r') as f:
            return cls.from_dict(json.load(f))

    def to_markdown(self) -> str:
        rows = self.table.rows
        width = max(len(r.accuracy) for r in rows)
        lines = [
            "# Accuracy vs observed moves",
            "",
            f"Seeds: {len(self.table.seeds)}, episodes per seed: {self.table.num_episodes}",
            "",
            "| Run | " + " | ".join(str(t) for t in range(width)) + " |",
            "|" + "---|" * (width + 1)
        ]
        for row in rows:
            cells = " | ".join(f"{100 * a:.1f} ± {100 * s:.1f}" for a, s in zip(row.accuracy, row.stderr))
            lines.append(f"| {row.name} | {cells} |")
        if self.pairs:
            lines += ["", "## Pairwise", "", "| B vs A | final delta | wins | ties | losses |",
                      "|---|---|---|---|---|"]
            for p in self.pairs:
                lines.append(f"| {p.b} vs {p.a} | {100 * p.delta[-1]:+.1f} | {p.wins} | {p.ties} | {p.losses} |")
        return "\n".join(lines) + "\n"


def compare_rows(a: AccuracyRow, b: AccuracyRow) -> PairComparison:
    delta = (np.asarray(b.accuracy) - np.asarray(a.accuracy)).tolist()
    wins = ties = losses = 0
    for score_a, score_b in zip(a.seed_scores(), b.seed_scores()):
        if score_b > score_a:
            wins += 1
        elif score_b < score_a:
            losses += 1
        else:
            ties += 1
    return PairComparison(a.name, b.name, delta, wins, ties, losses)


def compare(run_specs: Sequence[RunSpec], dataset_test: env.TrackDataset, trainer: Trainer,
            config: TrainConfig, eval_config: EvalConfig, threads: int = 1,
            actions: Optional[env.ActionSet] = None) -> ComparisonReport:
    """
    Evaluate several run specs over the same seeds.

    `trainer(encoder, mask_repeats, seed)` supplies one model per variant
    and seed; policies of the same variant share it. The report holds the
    merged table and every pairwise delta and win count.
    """
    if len(run_specs) < 2:
        raise ValueError("compare needs at least two run specs")
    _episode_keys(dataset_test)

    cache: Dict[Tuple[EncoderKind, bool, int], Model] = {}
    rows = []
    for spec in run_specs:
        with Tracer().span("compare.run", {"run": spec.name}):
            models = {}
            for seed in eval_config.seeds:
                cache_key = (spec.encoder_kind, spec.mask_repeats, seed)
                if cache_key not in cache:
                    cache[cache_key] = trainer(spec.encoder_kind, spec.mask_repeats, seed)
                models[seed] = cache[cache_key]
            run_config = replace(config, encoder_kind=spec.encoder_kind.value, mask_repeats=spec.mask_repeats)
            outcomes = _run_seeds(models, dataset_test, spec.policy, run_config, eval_config, threads, actions)
            rows.append(_row(spec.name, outcomes, eval_config.seeds))
            logger.info("run evaluated", run=spec.name, accuracy=rows[-1].accuracy)

    table = AccuracyTable(rows, rows[0].episodes_per_seed, list(eval_config.seeds))
    pairs = [compare_rows(rows[i], rows[j]) for i in range(len(rows)) for j in range(i + 1, len(rows))]
    return ComparisonReport(table, pairs)


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        return x
    sums = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, x.size + 1)
    start = np.maximum(idx - window, 0)
    return (sums[idx] - sums[start]) / (idx - start)


def nll_curve(log: Sequence[Dict[str, float]], window: int = 50) -> List[Tuple[int, float, float]]:
    """(iteration, dirichlet_nll, smoothed nll) per training record."""
    values = [r["dirichlet_nll"] for r in log]
    smoothed = smooth(values, window)
    return [(int(r["iteration"]), float(v), float(s)) for r, v, s in zip(log, values, smoothed)]


def nll_curve_csv(log: Sequence[Dict[str, float]], window: int = 50) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["iteration", "dirichlet_nll", "smoothed"])
    for iteration, value, smoothed in nll_curve(log, window):
        writer.writerow([iteration, repr(value), repr(smoothed)])
    return out.getvalue()


def nll_trend(log: Sequence[Dict[str, float]]) -> Dict[str, float]:
    """Mean NLL of the first and last 10% of iterations; `decreased` when the end is lower."""
    values = np.asarray([r["dirichlet_nll"] for r in log], dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return {"first_10pct": float("nan"), "last_10pct": float("nan"), "decreased": False}
    n = max(1, values.size // 10)
    first, last = float(values[:n].mean()), float(values[-n:].mean())
    return {"first_10pct": first, "last_10pct": last, "decreased": last < first}


@dataclass
class CheckResult:
    """Outcome of one acceptance check on a full comparison run."""
    name: str
    passed: bool
    detail: str

    def to_dict(self) -> Dict[str, object]:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


NB_RANDOM = RunSpec(EncoderKind.NAIVE_BAYES, False, RANDOM).name
NB_LEARNED = RunSpec(EncoderKind.NAIVE_BAYES, False, LEARNED).name
DR_RANDOM = RunSpec(EncoderKind.DIRICHLET, False, RANDOM).name
DN_RANDOM = RunSpec(EncoderKind.DIRICHLET, True, RANDOM).name
DN_LEARNED = RunSpec(EncoderKind.DIRICHLET, True, LEARNED).name


def acceptance_checks(table: AccuracyTable, nll_trends: Sequence[Dict[str, float]],
                      concentrations: Dict[str, Sequence[float]], min_share: float = 0.7,
                      lookahead_step: int = 2) -> List[CheckResult]:
    """
    Ordering checks for a grid run over several seeds.

    `nll_trends` holds one `nll_trend` per trained Dirichlet model;
    `concentrations` maps a variant name to its per-seed transition
    concentration. Per-seed comparisons count ties in favor and need
    `min_share` of the seeds.
    """
    seeds = len(table.seeds)
    needed = math.ceil(min_share * seeds)
    checks = []

    decreased = sum(1 for t in nll_trends if t["decreased"])
    checks.append(CheckResult("dirichlet_nll_decreases", bool(nll_trends) and decreased == len(nll_trends),
                              f"{decreased}/{len(nll_trends)} training runs end below their first 10%"))

    single_dr, single_nb = table.row(DR_RANDOM).accuracy[0], table.row(NB_RANDOM).accuracy[0]
    checks.append(CheckResult("single_image_dirichlet_vs_naive_bayes", single_dr >= single_nb,
                              f"{100 * single_dr:.1f}% vs {100 * single_nb:.1f}%"))

    learned = table.row(DN_LEARNED)
    for other in (DN_RANDOM, NB_LEARNED):
        pair = compare_rows(table.row(other), learned)
        at_least = pair.wins + pair.ties
        checks.append(CheckResult(f"{DN_LEARNED} >= {other}", at_least >= needed,
                                  f"{at_least}/{seeds} seeds, need {needed}; final delta {100 * pair.delta[-1]:+.1f}"))

    step = min(lookahead_step, len(learned.accuracy) - 1)
    at_step, random_at_step = learned.accuracy[step], table.row(DN_RANDOM).accuracy[step]
    checks.append(CheckResult(f"learned_beats_random_at_step_{step}", at_step > random_at_step,
                              f"{100 * at_step:.1f}% vs {100 * random_at_step:.1f}%"))

    nb_conc = float(np.mean(concentrations.get(variant_name(EncoderKind.NAIVE_BAYES, False), [np.nan])))
    dn_conc = float(np.mean(concentrations.get(variant_name(EncoderKind.DIRICHLET, True), [np.nan])))
    checks.append(CheckResult("naive_bayes_policy_more_concentrated", nb_conc > dn_conc,
                              f"{nb_conc:.3f} vs {dn_conc:.3f}"))
    return checks
