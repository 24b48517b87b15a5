"""
Q-Learning Agent

Epsilon-greedy action selection with optional non-repeat masking,
look-ahead targets and the joint training loop: each interaction
sequence feeds SGD minibatches for the network and maximum-likelihood
steps for the Dirichlet table.
"""

import math
from enum import Enum
from functools import partial
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from observability.logger import get_logger
from observability.metrics import MetricsCollector
from observability.tracer import Tracer
from src import env
from src.belief import (
    BeliefStatistics, BeliefVector, DirichletTable, EncodedState, EncoderKind, ReadoutMode, fit_cell, fuse,
    gradient_step, mean_negative_log_likelihood, readout
)
from src.net import (
    NetworkParams, NetworkSpec, Sample, action_values, batch_costs, classify, init_params, latest_block,
    temporal_differences, train_step
)

logger = get_logger("aor.agent")

LEARNED = "learned"
RANDOM = "random"
POLICIES = (LEARNED, RANDOM)


class DirichletFit(str, Enum):
    """How the table follows the running belief statistics during training."""
    NEWTON = "newton"
    GRADIENT = "gradient"


@dataclass
class TrainConfig:
    """Training schedule and agent variant."""

    num_iterations: int = 4000
    moves_per_sequence: int = 5
    minibatch_size: int = 128
    lr_initial: float = 0.1
    lr_decay_points: List[int] = field(default_factory=lambda: [400, 800, 1200, 1500])
    lr_decay_factor: float = 0.5
    epsilon_start: float = 0.9
    epsilon_end: float = 0.1
    epsilon_levels: int = 8
    epsilon_decay_fraction: float = 0.75
    gamma: float = 0.9
    encoder_kind: str = EncoderKind.DIRICHLET.value
    mask_repeats: bool = False
    dirichlet_fit: str = DirichletFit.NEWTON.value
    dirichlet_lr: float = 0.1
    dirichlet_steps: int = 5
    dirichlet_prior_weight: float = 4.0
    dirichlet_window: int = 200
    readout: str = ReadoutMode.JOINT.value
    reward_every_step: bool = False
    initial_poses: List[int] = field(default_factory=list)
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        self.encoder_kind = EncoderKind(self.encoder_kind).value
        self.dirichlet_fit = DirichletFit(self.dirichlet_fit).value
        self.readout = ReadoutMode(self.readout).value
        self.lr_decay_points = sorted(int(p) for p in self.lr_decay_points)
        self.initial_poses = [int(p) for p in self.initial_poses]
        if self.num_iterations < 0:
            raise ValueError("num_iterations must be non-negative")
        if self.moves_per_sequence < 1 or self.minibatch_size < 1:
            raise ValueError("moves_per_sequence and minibatch_size must be positive")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not (0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0):
            raise ValueError("epsilon must satisfy 0 <= epsilon_end <= epsilon_start <= 1")
        if self.epsilon_levels < 1 or not (0.0 < self.epsilon_decay_fraction <= 1.0):
            raise ValueError("epsilon_levels must be positive and epsilon_decay_fraction in (0, 1]")
        if self.lr_initial <= 0 or not (0.0 < self.lr_decay_factor <= 1.0):
            raise ValueError("lr_initial must be positive and lr_decay_factor in (0, 1]")
        if self.dirichlet_lr < 0:
            raise ValueError("dirichlet_lr must be non-negative")
        if self.dirichlet_steps < 1 or self.dirichlet_prior_weight <= 0 or self.dirichlet_window < 1:
            raise ValueError("dirichlet_steps, dirichlet_prior_weight and dirichlet_window must be positive")
        if self.log_every < 1:
            raise ValueError("log_every must be positive")

    @property
    def encoder(self) -> EncoderKind:
        return EncoderKind(self.encoder_kind)

    @property
    def variant(self) -> str:
        return variant_name(self.encoder, self.mask_repeats)


def variant_name(encoder: EncoderKind, mask_repeats: bool) -> str:
    """e.g. `naive_bayes`, `dirichlet`, `dirichlet+norepeat`."""
    name = EncoderKind(encoder).value
    return f"{name}+norepeat" if mask_repeats else name


def learning_rate_at(config: TrainConfig, iteration: int) -> float:
    """Step schedule: lr_initial halved (by lr_decay_factor) after each decay point; iterations are 1-based."""
    decays = sum(1 for p in config.lr_decay_points if iteration > p)
    return config.lr_initial * config.lr_decay_factor ** decays


def epsilon_at(config: TrainConfig, iteration: int) -> float:
    """
    Step-wise decay from epsilon_start to epsilon_end.

    `epsilon_levels` equal steps spread over the first
    `epsilon_decay_fraction` of the iterations, constant afterwards.
    """
    levels = config.epsilon_levels
    if levels == 1:
        return config.epsilon_end
    span = max(1, math.ceil(config.epsilon_decay_fraction * config.num_iterations))
    level = min(levels - 1, ((iteration - 1) * levels) // span)
    return config.epsilon_start + (config.epsilon_end - config.epsilon_start) * level / (levels - 1)


def select_action(qvalues: np.ndarray, visited_bins: Set[int], current_pose: int, actions: env.ActionSet,
                  epsilon: float, mask_repeats: bool, rng: np.random.Generator,
                  resolve_pose: Optional[Callable[[int], int]] = None) -> int:
    """
    Epsilon-greedy choice among admissible actions.

    With masking, an action is admissible only if the pose it reaches has
    not been visited; when nothing is admissible the mask is dropped.
    `resolve_pose` maps a target bin to the pose actually observed there
    (the nearest recorded bin on tracks with gaps). Greedy ties go to the
    lowest action index.
    """
    q = np.asarray(qvalues, dtype=float)
    if q.shape != (actions.num_actions,):
        raise ValueError(f"expected {actions.num_actions} Q-values, got shape {q.shape}")

    admissible = list(range(actions.num_actions))
    if mask_repeats:
        resolve = resolve_pose or (lambda pose: pose)
        fresh = [a for a in admissible if resolve(actions.apply(current_pose, a)) not in visited_bins]
        if fresh:
            admissible = fresh

    if epsilon > 0 and rng.random() < epsilon:
        return admissible[int(rng.integers(len(admissible)))]
    return admissible[int(np.argmax(q[admissible]))]


def lookahead_value(next_qvalues: np.ndarray, gamma: float) -> float:
    """gamma * max_a Q(s_{t+1}, a), used as a constant in the TD target."""
    return float(gamma * np.max(next_qvalues))


def lookahead(params: NetworkParams, next_observation: np.ndarray, state_after_fuse: EncodedState,
              gamma: float) -> float:
    """Discounted best next action-value, scoring `next_observation` from the already fused state."""
    belief, features = classify(params, next_observation)
    qvalues = action_values(params, state_after_fuse, latest_block(params, belief, features))
    return lookahead_value(qvalues, gamma)


def td_target(lookahead_term: float, reward: float, terminal: bool, reward_every_step: bool = False) -> float:
    """The reward joins the target on the terminal move only, unless `reward_every_step`."""
    if terminal or reward_every_step:
        return lookahead_term + reward
    return lookahead_term


@dataclass(frozen=True)
class Transition:
    """One move: the state and observation before it, the action and its frozen target."""
    state_before: EncodedState
    observation: np.ndarray
    action: int
    target_q: float
    label: int

    def as_sample(self) -> Sample:
        return Sample(self.observation, self.state_before, self.label, self.action, self.target_q)


@dataclass
class EpisodeResult:
    """
    Outcome of one interaction sequence.

    `readouts[t]` is the label belief after t moves (t = 0 is the first
    view alone); `views` lists (object, action, belief) for every view an
    action produced.
    """

    transitions: List[Transition]
    readouts: List[BeliefVector]
    rewards: List[float]
    actions: List[int]
    poses: List[int]
    views: List[Tuple[int, int, BeliefVector]]


def run_episode(params: NetworkParams, table: DirichletTable, dataset: env.TrackDataset, key: env.TrackKey,
                initial_pose: int, config: TrainConfig, actions: env.ActionSet, rng: np.random.Generator,
                mode: str = "train", policy: str = LEARNED, epsilon: Optional[float] = None) -> EpisodeResult:
    """
    Play `config.moves_per_sequence` moves on track `key`.

    Each move classifies the current view, fuses it into the state, picks
    an action, rotates, and forms the TD target from the next view. Eval
    mode is greedy (epsilon 0); the random policy picks uniformly among
    admissible actions in either mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
    if policy == RANDOM:
        epsilon = 1.0
    elif mode == "eval":
        epsilon = 0.0
    elif epsilon is None:
        epsilon = config.epsilon_start

    obj = key[0]
    kind = config.encoder
    spec = params.spec
    env_state, observation = env.reset(dataset, key[0], key[1], initial_pose)

    belief, features = classify(params, observation)
    state = fuse(EncodedState.initial(kind, spec.num_classes, spec.num_actions), belief, None, table)
    qvalues = action_values(params, state, latest_block(params, belief, features))

    resolve_pose = partial(dataset.nearest_pose, key)
    result = EpisodeResult([], [readout(state, config.readout)], [], [], [env_state.pose_bin], [])
    for t in range(1, config.moves_per_sequence + 1):
        action = select_action(qvalues, env_state.visited_bins, env_state.pose_bin, actions,
                               epsilon, config.mask_repeats, rng, resolve_pose)
        env_state, next_observation = env.step(env_state, action, actions, dataset)

        next_belief, next_features = classify(params, next_observation)
        next_state = fuse(state, next_belief, action, table)
        next_q = action_values(params, next_state, latest_block(params, next_belief, next_features))

        label_belief = readout(next_state, config.readout)
        r = env.reward(label_belief, obj)
        target = td_target(lookahead_value(next_q, config.gamma), r, t == config.moves_per_sequence,
                           config.reward_every_step)

        result.transitions.append(Transition(state, observation, action, target, obj))
        result.readouts.append(label_belief)
        result.rewards.append(r)
        result.actions.append(action)
        result.poses.append(env_state.pose_bin)
        result.views.append((obj, action, next_belief))

        state, observation, qvalues = next_state, next_observation, next_q
    return result


class TrainingAbortedError(RuntimeError):
    """Training hit a non-finite cost; `log` holds the records written before it."""

    def __init__(self, message: str, iteration: int, log: List[Dict[str, float]]):
        super().__init__(message)
        self.iteration = iteration
        self.log = log


@dataclass
class TrainingResult:
    params: NetworkParams
    table: DirichletTable
    log: List[Dict[str, float]]


def _check_compatible(dataset: env.TrackDataset, spec: NetworkSpec, actions: env.ActionSet) -> None:
    if dataset.feature_dim != spec.input_dim:
        raise ValueError(f"dataset has {dataset.feature_dim} features, network expects {spec.input_dim}")
    if dataset.num_classes != spec.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, network expects {spec.num_classes}")
    if actions.num_actions != spec.num_actions:
        raise ValueError(f"action set has {actions.num_actions} actions, network expects {spec.num_actions}")
    if actions.num_bins != dataset.num_bins:
        raise ValueError(f"action set covers {actions.num_bins} bins, dataset has {dataset.num_bins}")


def fit_table(table: DirichletTable, stats: BeliefStatistics, views: Sequence[Tuple[int, int, BeliefVector]],
              fit: DirichletFit = DirichletFit.NEWTON, steps: int = 5, lr: float = 0.1) -> DirichletTable:
    """
    Add `views` to the running statistics, then refit each cell they touched.

    Newton fitting runs up to `steps` Newton iterations per cell; gradient
    fitting runs `steps` log-space gradient steps of size `lr`. Cells are
    refitted in first-seen order; `stats` is updated in place.
    """
    cells: List[Tuple[int, int]] = []
    for obj, action, belief in views:
        stats.add(obj, action, belief)
        if (obj, action) not in cells:
            cells.append((obj, action))
    for obj, action in cells:
        mean_log_b = stats.cell(obj, action)
        if DirichletFit(fit) == DirichletFit.NEWTON:
            table = fit_cell(table, obj, action, mean_log_b, steps)
        else:
            for _ in range(steps):
                table = gradient_step(table, obj, action, mean_log_b, lr)
    return table


def train(dataset: env.TrackDataset, config: TrainConfig, spec: NetworkSpec,
          actions: Optional[env.ActionSet] = None,
          callback: Optional[Callable[[Dict[str, float]], None]] = None) -> TrainingResult:
    """
    Jointly train the network and the Dirichlet table.

    Every iteration plays one sequence from a random training track. Its
    transitions go to a FIFO buffer that fires an SGD step whenever
    `minibatch_size` transitions are waiting; its views update the table.
    The log records, per iteration, the costs of the sequence's
    transitions and the table's mean NLL of its views, both measured
    before that iteration's updates. Deterministic given `config.seed`.
    """
    if dataset.split == "test":
        raise ValueError("train needs the training split, got the test split")
    actions = actions or env.ActionSet.standard(dataset.num_bins)
    _check_compatible(dataset, spec, actions)

    rng = np.random.default_rng(config.seed)
    params = init_params(spec, config.seed)
    table = DirichletTable.uniform(spec.num_classes, spec.num_actions)
    stats = BeliefStatistics.prior(spec.num_classes, spec.num_actions, config.dirichlet_prior_weight,
                                   config.dirichlet_window)
    log: List[Dict[str, float]] = []
    if config.num_iterations == 0:
        return TrainingResult(params, table, log)

    metrics = MetricsCollector()
    gauges = {name: metrics.gauge(f"train.{name}") for name in ("c_cl", "c_rl", "dirichlet_nll", "epsilon", "lr")}
    sgd_steps = metrics.counter("train.sgd_steps", "Minibatch SGD updates")
    transitions_seen = metrics.counter("train.transitions", "Transitions collected")
    td_errors = metrics.histogram("train.td_error", "Absolute TD error of collected transitions",
                                  buckets=[0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0])

    keys = dataset.track_keys()
    buffer: List[Sample] = []
    previous_lr = None

    with Tracer().span("train.loop", {"variant": config.variant, "iterations": config.num_iterations}):
        for iteration in range(1, config.num_iterations + 1):
            epsilon = epsilon_at(config, iteration)
            lr = learning_rate_at(config, iteration)
            if previous_lr is not None and lr != previous_lr:
                logger.info("learning rate decayed", iteration=iteration, lr=lr)
            previous_lr = lr

            key = keys[int(rng.integers(len(keys)))]
            pose = env.sample_initial_pose(dataset, key, rng, config.initial_poses, iteration - 1)
            episode = run_episode(params, table, dataset, key, pose, config, actions, rng,
                                  mode="train", epsilon=epsilon)

            samples = [t.as_sample() for t in episode.transitions]
            c_cl, c_rl = batch_costs(params, samples)
            td_errors.observe_many(np.abs(temporal_differences(params, samples)))
            nll = mean_negative_log_likelihood(table, episode.views)
            record = {
                "iteration": iteration,
                "c_cl": c_cl,
                "c_rl": c_rl,
                "dirichlet_nll": nll,
                "epsilon": epsilon,
                "lr": lr
            }

            if not (math.isfinite(c_cl) and math.isfinite(c_rl)):
                logger.critical("non-finite cost, training aborted", **record)
                raise TrainingAbortedError(f"non-finite cost at iteration {iteration}", iteration, log)

            table = fit_table(table, stats, episode.views, DirichletFit(config.dirichlet_fit),
                              config.dirichlet_steps, config.dirichlet_lr)
            buffer.extend(samples)
            transitions_seen.inc(len(samples))
            while len(buffer) >= config.minibatch_size:
                batch, buffer = buffer[:config.minibatch_size], buffer[config.minibatch_size:]
                try:
                    params = train_step(params, batch, lr, rng if spec.dropout > 0 else None)
                except FloatingPointError as e:
                    logger.critical("training step failed, training aborted", iteration=iteration, reason=str(e))
                    raise TrainingAbortedError(str(e), iteration, log) from e
                sgd_steps.inc()

            log.append(record)
            for name, gauge in gauges.items():
                gauge.record(iteration, record[name])

            logger.debug("iteration complete", **record)
            if iteration % config.log_every == 0 or iteration == config.num_iterations:
                logger.info("training progress", **record, sgd_steps=sgd_steps.get())
            if callback is not None:
                callback(record)

    return TrainingResult(params, table, log)
