"""
Belief Fusion

State encoders that accumulate per-image class beliefs over an
interaction sequence: Naive Bayes product fusion and a Dirichlet
generative model with one Dirichlet per (object, action) pair whose
parameters are fitted by maximum likelihood.

All fusion happens in log space with per-column renormalization.
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from src.storage import atomic_write_text

EPS_BELIEF = 1e-8
SIMPLEX_TOL = 1e-9
LOG_FLOOR = -700.0
ALPHA_MIN = 1e-4
ALPHA_MAX = 1e4
MAX_LOG_STEP = 1.0


class EncoderKind(str, Enum):
    """Which state encoder an agent uses."""
    NAIVE_BAYES = "naive_bayes"
    DIRICHLET = "dirichlet"


class ReadoutMode(str, Enum):
    """How the Dirichlet encoder's state is collapsed to a label belief."""
    JOINT = "joint"
    COLUMN_MEAN = "column_mean"


@dataclass(frozen=True)
class BeliefVector:
    """
    A point on the C-simplex: the class posterior of one image.

    The array is stored read-only; construct a new vector instead of
    editing one in place.
    """

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size < 1:
            raise ValueError(f"belief must be a non-empty vector, got shape {probs.shape}")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ValueError("belief entries must be finite and non-negative")
        total = probs.sum()
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"belief must sum to 1 (got {total!r})")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, num_classes: int) -> 'BeliefVector':
        return cls(np.full(num_classes, 1.0 / num_classes))

    @classmethod
    def normalized(cls, weights: Sequence[float]) -> 'BeliefVector':
        """Build a belief from non-negative weights by normalizing them."""
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if not np.isfinite(total) or total <= 0:
            raise ValueError("weights must have a positive finite sum")
        p = w / total
        # one extra pass pulls the sum back inside the simplex tolerance
        return cls(p / p.sum())

    @property
    def num_classes(self) -> int:
        return self.probs.size

    def argmax(self) -> int:
        """Most probable class; ties go to the lowest class index."""
        return int(np.argmax(self.probs))

    def log_probs(self) -> np.ndarray:
        """Log of the clamped belief, as used by every density and fusion rule."""
        return np.log(np.clip(self.probs, EPS_BELIEF, 1.0))


BeliefLike = Union[BeliefVector, Sequence[float], np.ndarray]


def as_belief(b: BeliefLike) -> BeliefVector:
    return b if isinstance(b, BeliefVector) else BeliefVector(np.asarray(b, dtype=float))


def _stack_log_beliefs(samples: Iterable[BeliefLike]) -> np.ndarray:
    rows = [as_belief(s).log_probs() for s in samples]
    if not rows:
        raise ValueError("at least one belief sample is required")
    sizes = {r.size for r in rows}
    if len(sizes) != 1:
        raise ValueError(f"belief samples have mixed dimensions {sorted(sizes)}")
    return np.vstack(rows)


def _check_alpha(alpha: Sequence[float], size: Optional[int] = None) -> np.ndarray:
    a = np.asarray(alpha, dtype=float)
    if a.ndim != 1:
        raise ValueError(f"alpha must be a vector, got shape {a.shape}")
    if size is not None and a.size != size:
        raise ValueError(f"alpha has {a.size} components, belief has {size}")
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ValueError("alpha components must be finite and strictly positive")
    return a


def digamma(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Digamma function; defined for positive arguments only."""
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("digamma is only defined here for x > 0")
    result = special.digamma(arr)
    return float(result) if arr.ndim == 0 else result


def _row_log_densities(log_b: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """log Dir(b; alpha) for every alpha along the last axis of `alphas`."""
    return special.gammaln(alphas.sum(axis=-1)) - special.gammaln(alphas).sum(axis=-1) + (alphas - 1.0) @ log_b


def dirichlet_log_density(b: BeliefLike, alpha: Sequence[float]) -> float:
    """
    log Dir(b; alpha).

    Belief entries are clamped to [EPS_BELIEF, 1] before taking logs.
    """
    belief = as_belief(b)
    a = _check_alpha(alpha, belief.num_classes)
    return float(_row_log_densities(belief.log_probs(), a))


def dirichlet_grad_loglik(samples: Sequence[BeliefLike], alpha: Sequence[float]) -> np.ndarray:
    """
    Gradient of the summed log-likelihood of `samples` with respect to alpha.

    d/d alpha_k = N psi(sum alpha) - N psi(alpha_k) + sum_i log b_ik
    """
    log_b = _stack_log_beliefs(samples)
    a = _check_alpha(alpha, log_b.shape[1])
    n = log_b.shape[0]
    return n * special.digamma(a.sum()) - n * special.digamma(a) + log_b.sum(axis=0)


@dataclass(eq=False)
class DirichletTable:
    """
    Dirichlet parameters, one positive C-vector per (object, action) cell.

    `alphas[o, a]` parameterizes the distribution of beliefs the
    classifier produces when action `a` is performed on object `o`.
    """

    alphas: np.ndarray

    def __post_init__(self):
        alphas = np.array(self.alphas, dtype=float)
        if alphas.ndim != 3 or alphas.shape[0] != alphas.shape[2]:
            raise ValueError(f"alphas must have shape (C, H, C), got {alphas.shape}")
        if not np.all(np.isfinite(alphas)) or np.any(alphas <= 0):
            raise ValueError("every alpha component must be finite and strictly positive")
        self.alphas = alphas

    @classmethod
    def uniform(cls, num_classes: int, num_actions: int, value: float = 1.0) -> 'DirichletTable':
        """All cells set to the same symmetric Dirichlet; 1.0 carries no information."""
        return cls(np.full((num_classes, num_actions, num_classes), float(value)))

    @property
    def num_classes(self) -> int:
        return self.alphas.shape[0]

    @property
    def num_actions(self) -> int:
        return self.alphas.shape[1]

    def alpha(self, obj: int, action: int) -> np.ndarray:
        return self.alphas[obj, action].copy()

    def copy(self) -> 'DirichletTable':
        return DirichletTable(self.alphas.copy())

    def equals(self, other: 'DirichletTable') -> bool:
        return self.alphas.shape == other.alphas.shape and bool(np.array_equal(self.alphas, other.alphas))

    def log_likelihood(self, obj: int, action: int, samples: Sequence[BeliefLike]) -> float:
        """Summed log density of `samples` under cell (obj, action)."""
        log_b = _stack_log_beliefs(samples)
        alpha = self.alphas[obj, action]
        log_norm = special.gammaln(alpha.sum()) - special.gammaln(alpha).sum()
        return float(log_b.shape[0] * log_norm + np.sum(log_b @ (alpha - 1.0)))

    def to_dict(self) -> Dict[str, object]:
        return {
            "num_classes": self.num_classes,
            "num_actions": self.num_actions,
            "alphas": self.alphas.tolist()
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> 'DirichletTable':
        table = cls(np.asarray(data["alphas"], dtype=float))
        if table.num_classes != data["num_classes"] or table.num_actions != data["num_actions"]:
            raise ValueError("declared table dimensions do not match the alpha array")
        return table

    def save(self, path: str) -> str:
        return atomic_write_text(path, json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str) -> 'DirichletTable':
        with open(path, 'r') as f:
            return cls.from_dict(json.load(f))


def log_belief_mean(samples: Iterable[BeliefLike]) -> np.ndarray:
    """
    Mean clamped log belief of a batch.

    The Dirichlet likelihood of a batch depends on the data only through
    this vector, so fitting against it once replaces rescanning the batch.
    """
    return _stack_log_beliefs(samples).mean(axis=0)


def dirichlet_mean_grad(mean_log_b: Sequence[float], alpha: Sequence[float]) -> np.ndarray:
    """Per-sample gradient psi(sum alpha) - psi(alpha_k) + mean log b_k."""
    s = np.asarray(mean_log_b, dtype=float)
    a = _check_alpha(alpha, s.size)
    return special.digamma(a.sum()) - special.digamma(a) + s


def _mean_loglik(alpha: np.ndarray, mean_log_b: np.ndarray) -> float:
    return float(special.gammaln(alpha.sum()) - special.gammaln(alpha).sum() + (alpha - 1.0) @ mean_log_b)


def _check_cell(table: DirichletTable, obj: int, action: int) -> None:
    if not (0 <= obj < table.num_classes) or not (0 <= action < table.num_actions):
        raise ValueError(f"cell ({obj}, {action}) is outside the table")


def gradient_step(table: DirichletTable, obj: int, action: int,
                  mean_log_b: Sequence[float], lr: float) -> DirichletTable:
    """
    One gradient-ascent step on cell (obj, action) given the batch statistic.

    The step is taken on theta = log(alpha) and clipped to MAX_LOG_STEP,
    so alpha stays positive. Only cell (obj, action) changes.
    """
    if lr < 0 or not np.isfinite(lr):
        raise ValueError(f"learning rate must be a non-negative finite number, got {lr!r}")
    _check_cell(table, obj, action)

    updated = table.copy()
    if lr == 0:
        return updated
    alpha = table.alphas[obj, action]
    grad = dirichlet_mean_grad(mean_log_b, alpha)
    log_step = np.clip(lr * alpha * grad, -MAX_LOG_STEP, MAX_LOG_STEP)
    updated.alphas[obj, action] = np.clip(alpha * np.exp(log_step), ALPHA_MIN, ALPHA_MAX)
    return updated


def fit_step(table: DirichletTable, obj: int, action: int,
             batch: Sequence[BeliefLike], lr: float) -> DirichletTable:
    """
    One gradient-ascent step on the batch log-likelihood of one cell.

    Uses the per-sample mean gradient, so lr does not scale with the
    batch size. Only cell (obj, action) changes.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("fit_step needs a non-empty batch")
    return gradient_step(table, obj, action, log_belief_mean(batch), lr)


def _newton_direction(alpha: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """
    H^-1 grad for the Hessian H = diag(-psi'(alpha)) + psi'(sum alpha) 11^T.

    Sherman-Morrison on the diagonal-plus-rank-one form.
    """
    q = -special.polygamma(1, alpha)
    z = special.polygamma(1, alpha.sum())
    b = np.sum(grad / q) / (1.0 / z + np.sum(1.0 / q))
    return (grad - b) / q


def newton_fit(alpha: Sequence[float], mean_log_b: Sequence[float], max_steps: int = 20,
               tol: float = 1e-10) -> np.ndarray:
    """
    Maximum-likelihood alpha for a batch statistic, by Newton's method from `alpha`.

    Each step halves its length until the likelihood does not drop and
    alpha stays inside [ALPHA_MIN, ALPHA_MAX]; the likelihood is concave
    in alpha, so the iterates climb monotonically.
    """
    s = np.asarray(mean_log_b, dtype=float)
    a = np.clip(_check_alpha(alpha, s.size), ALPHA_MIN, ALPHA_MAX)
    if not np.all(np.isfinite(s)):
        raise ValueError("belief statistic must be finite")
    value = _mean_loglik(a, s)
    for _ in range(max_steps):
        grad = special.digamma(a.sum()) - special.digamma(a) + s
        if np.max(np.abs(grad)) < tol:
            break
        direction = -_newton_direction(a, grad)
        length = 1.0
        while length > 1e-8:
            candidate = np.clip(a + length * direction, ALPHA_MIN, ALPHA_MAX)
            candidate_value = _mean_loglik(candidate, s)
            if candidate_value >= value:
                break
            length *= 0.5
        else:
            break
        if np.array_equal(candidate, a):
            break
        a, value = candidate, candidate_value
    return a


def fit_cell(table: DirichletTable, obj: int, action: int, mean_log_b: Sequence[float],
             max_steps: int = 20) -> DirichletTable:
    """Newton fit of cell (obj, action) to a batch statistic; other cells are unchanged."""
    _check_cell(table, obj, action)
    updated = table.copy()
    updated.alphas[obj, action] = newton_fit(table.alphas[obj, action], mean_log_b, max_steps)
    return updated


@dataclass(eq=False)
class BeliefStatistics:
    """
    Running mean log belief of every (object, action) cell.

    A cell starts from `prior_weight` pseudo-views carrying the statistic
    of the uniform Dirichlet, so an unobserved cell fits to alpha = 1.
    Once a cell holds `window` views the mean becomes an exponential
    moving average with weight 1 / window, which lets it follow a
    classifier that is still being trained.
    """

    mean_log: np.ndarray
    counts: np.ndarray
    window: int = 200

    def __post_init__(self):
        if self.mean_log.ndim != 3 or self.counts.shape != self.mean_log.shape[:2]:
            raise ValueError(f"statistics of shape {self.mean_log.shape} do not match counts {self.counts.shape}")
        if self.window < 1:
            raise ValueError("window must be positive")

    @classmethod
    def prior(cls, num_classes: int, num_actions: int, prior_weight: float = 4.0,
              window: int = 200) -> 'BeliefStatistics':
        if prior_weight <= 0:
            raise ValueError("prior_weight must be positive")
        uniform = special.digamma(1.0) - special.digamma(float(num_classes))
        return cls(np.full((num_classes, num_actions, num_classes), uniform),
                   np.full((num_classes, num_actions), float(prior_weight)), int(window))

    def add(self, obj: int, action: int, b: BeliefLike) -> None:
        log_b = as_belief(b).log_probs()
        if log_b.size != self.mean_log.shape[2]:
            raise ValueError(f"belief has {log_b.size} classes, statistics have {self.mean_log.shape[2]}")
        n = self.counts[obj, action] + 1.0
        self.mean_log[obj, action] += (log_b - self.mean_log[obj, action]) / min(n, self.window)
        self.counts[obj, action] = n

    def cell(self, obj: int, action: int) -> np.ndarray:
        return self.mean_log[obj, action].copy()


def mean_negative_log_likelihood(table: DirichletTable,
                                 observations: Sequence[Tuple[int, int, BeliefLike]]) -> float:
    """Average -log Dir(b; alpha[o, a]) over (object, action, belief) triples."""
    if not observations:
        return float("nan")
    total = 0.0
    for obj, action, b in observations:
        total -= float(_row_log_densities(as_belief(b).log_probs(), table.alphas[obj, action]))
    return total / len(observations)


@dataclass(eq=False)
class EncodedState:
    """
    Agent state accumulated over one interaction sequence.

    `log_posterior[o, a]` holds the log posterior of object `o` in the
    column of action `a`; every column is normalized over objects. The
    Naive Bayes encoder uses column 0 only. `used_actions` lists the
    actions fused so far, in first-use order.

    `log_joint` is the Dirichlet encoder's object posterior over the whole
    sequence: each view scored under the Dirichlet of the action that
    produced it, the first view under the mixture of all actions.
    """

    log_posterior: np.ndarray
    encoder_kind: EncoderKind
    latest_block: Optional[np.ndarray] = None
    used_actions: Tuple[int, ...] = field(default_factory=tuple)
    log_joint: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, kind: Union[EncoderKind, str], num_classes: int, num_actions: int) -> 'EncodedState':
        """Uniform posterior in every column and in the joint."""
        kind = EncoderKind(kind)
        return cls(
            log_posterior=np.full((num_classes, num_actions), -np.log(num_classes)),
            encoder_kind=kind,
            log_joint=np.full(num_classes, -np.log(num_classes)) if kind == EncoderKind.DIRICHLET else None
        )

    @property
    def num_classes(self) -> int:
        return self.log_posterior.shape[0]

    @property
    def num_actions(self) -> int:
        return self.log_posterior.shape[1]

    def copy(self) -> 'EncodedState':
        return EncodedState(
            log_posterior=self.log_posterior.copy(),
            encoder_kind=self.encoder_kind,
            latest_block=None if self.latest_block is None else self.latest_block.copy(),
            used_actions=self.used_actions,
            log_joint=None if self.log_joint is None else self.log_joint.copy()
        )

    def posterior(self) -> np.ndarray:
        """Exponentiated (C, H) posterior."""
        return np.exp(self.log_posterior)


def _normalize_column(column: np.ndarray) -> np.ndarray:
    return np.maximum(column - special.logsumexp(column), LOG_FLOOR)


def _require_kind(state: EncodedState, kind: EncoderKind) -> None:
    if state.encoder_kind != kind:
        raise ValueError(f"state was built for {state.encoder_kind.value}, not {kind.value}")


def nb_fuse(state: EncodedState, b: BeliefLike) -> EncodedState:
    """
    Naive Bayes fusion: multiply the running belief by b and renormalize.

    Assumes a uniform prior over images and labels.
    """
    _require_kind(state, EncoderKind.NAIVE_BAYES)
    belief = as_belief(b)
    if belief.num_classes != state.num_classes:
        raise ValueError(f"belief has {belief.num_classes} classes, state has {state.num_classes}")
    new_state = state.copy()
    new_state.log_posterior[:, 0] = _normalize_column(state.log_posterior[:, 0] + belief.log_probs())
    return new_state


def _joint(state: EncodedState) -> np.ndarray:
    if state.log_joint is None:
        return np.full(state.num_classes, -np.log(state.num_classes))
    return state.log_joint


def _check_table(state: EncodedState, table: DirichletTable) -> None:
    if table.num_classes != state.num_classes or table.num_actions != state.num_actions:
        raise ValueError(
            f"table is {table.num_classes}x{table.num_actions}, state is {state.num_classes}x{state.num_actions}"
        )


def dirichlet_fuse(state: EncodedState, b: BeliefLike, action_taken: int,
                   table: DirichletTable) -> EncodedState:
    """
    Add log Dir(b; alpha[o, action_taken]) to column `action_taken` and to the joint.

    Columns of other actions are left untouched.
    """
    _require_kind(state, EncoderKind.DIRICHLET)
    _check_table(state, table)
    if not (0 <= action_taken < state.num_actions):
        raise ValueError(f"action {action_taken} is outside [0, {state.num_actions})")
    belief = as_belief(b)

    log_density = _row_log_densities(belief.log_probs(), table.alphas[:, action_taken, :])
    new_state = state.copy()
    new_state.log_posterior[:, action_taken] = _normalize_column(state.log_posterior[:, action_taken] + log_density)
    new_state.log_joint = _normalize_column(_joint(state) + log_density)
    if action_taken not in new_state.used_actions:
        new_state.used_actions = new_state.used_actions + (action_taken,)
    return new_state


def dirichlet_fuse_initial(state: EncodedState, b: BeliefLike, table: DirichletTable) -> EncodedState:
    """
    Fuse the first view of a sequence, which no action produced.

    The belief is scored under every action's Dirichlet, so each column
    starts from the same evidence, and under their equal-weight mixture
    for the joint; `used_actions` is not extended.
    """
    _require_kind(state, EncoderKind.DIRICHLET)
    _check_table(state, table)
    belief = as_belief(b)

    log_density = _row_log_densities(belief.log_probs(), table.alphas)  # (C, H)
    new_state = state.copy()
    for a in range(state.num_actions):
        new_state.log_posterior[:, a] = _normalize_column(state.log_posterior[:, a] + log_density[:, a])
    mixture = special.logsumexp(log_density, axis=1) - np.log(state.num_actions)
    new_state.log_joint = _normalize_column(_joint(state) + mixture)
    return new_state


def fuse(state: EncodedState, b: BeliefLike, action: Optional[int],
         table: Optional[DirichletTable] = None) -> EncodedState:
    """Dispatch to the encoder of `state`; `action=None` marks the first view."""
    if state.encoder_kind == EncoderKind.NAIVE_BAYES:
        return nb_fuse(state, b)
    if table is None:
        raise ValueError("the Dirichlet encoder needs a DirichletTable")
    if action is None:
        return dirichlet_fuse_initial(state, b, table)
    return dirichlet_fuse(state, b, action, table)


def readout(state: EncodedState, mode: Union[ReadoutMode, str] = ReadoutMode.JOINT,
            used_actions: Optional[Sequence[int]] = None) -> BeliefVector:
    """
    Label belief of a state.

    Naive Bayes: the fused belief. Dirichlet, joint mode: the object
    posterior over every view of the sequence. Dirichlet, column-mean
    mode: the mean of the columns of `used_actions` (default: the actions
    used this sequence, or all columns before any action).
    """
    posterior = state.posterior()
    if state.encoder_kind == EncoderKind.NAIVE_BAYES:
        return BeliefVector.normalized(posterior[:, 0])

    if ReadoutMode(mode) == ReadoutMode.JOINT:
        joint = _joint(state)
        return BeliefVector.normalized(np.exp(joint - joint.max()))

    actions = list(state.used_actions if used_actions is None else used_actions)
    if not actions:
        actions = list(range(state.num_actions))
    return BeliefVector.normalized(posterior[:, actions].mean(axis=1))


def encode(state: EncodedState, latest_features: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    Flatten a state for the action head.

    Layout: the (C, H) posterior action-major (column of action 0 first),
    then the latest block. For Naive Bayes the fused belief is tiled over
    the H columns so both encoders present the same width C*H + F.
    """
    posterior = state.posterior()
    if state.encoder_kind == EncoderKind.NAIVE_BAYES:
        posterior = np.tile(posterior[:, :1], (1, state.num_actions))

    if latest_features is None:
        latest_features = state.latest_block
    latest = np.zeros(0) if latest_features is None else np.asarray(latest_features, dtype=float).ravel()
    return np.concatenate([posterior.T.ravel(), latest])


def sample_beliefs(alpha: Sequence[float], n: int, rng: np.random.Generator) -> List[BeliefVector]:
    """Draw `n` beliefs from Dir(alpha)."""
    a = _check_alpha(alpha)
    draws = rng.dirichlet(a, size=n)
    return [BeliefVector.normalized(row) for row in draws]
