"""
Joint Classification / Action-Value Network

A small dense network with two branches: a classifier branch
(observation features -> hidden ReLU layers -> penultimate feature layer
-> softmax over classes) and an action branch (encoded state plus the
latest feature block -> hidden ReLU layers -> one linear output per
action). Gradients are closed-form per layer and training is plain SGD
on the sum of the cross-entropy and temporal-difference costs.
"""

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from observability.logger import get_logger
from src.belief import EPS_BELIEF, BeliefLike, BeliefVector, EncodedState, as_belief, encode
from src.storage import atomic_write_text

CHECKPOINT_FORMAT = "aor-network"
CHECKPOINT_VERSION = 1
STATE_BLOCKS = ("features", "belief")

logger = get_logger("aor.net")


@dataclass
class NetworkSpec:
    """
    Layer widths of both branches.

    `state_block` picks what the action branch sees next to the fused
    posterior: the penultimate `features` of the latest observation (the
    default) or its `belief`.
    """

    input_dim: int = 8
    hidden_dims: List[int] = field(default_factory=lambda: [32])
    num_classes: int = 8
    num_actions: int = 10
    feature_dim: int = 16
    q_hidden_dims: List[int] = field(default_factory=lambda: [32])
    state_block: str = "features"
    dropout: float = 0.0

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        self.q_hidden_dims = [int(h) for h in self.q_hidden_dims]
        widths = [self.input_dim, self.num_classes, self.num_actions, self.feature_dim]
        if any(w < 1 for w in widths + self.hidden_dims + self.q_hidden_dims):
            raise ValueError("every layer width must be a positive integer")
        if self.state_block not in STATE_BLOCKS:
            raise ValueError(f"state_block must be one of {STATE_BLOCKS}, got {self.state_block!r}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def latest_dim(self) -> int:
        return self.feature_dim if self.state_block == "features" else self.num_classes

    @property
    def q_input_dim(self) -> int:
        return self.num_classes * self.num_actions + self.latest_dim

    @property
    def classifier_widths(self) -> List[int]:
        return [self.input_dim] + self.hidden_dims + [self.feature_dim, self.num_classes]

    @property
    def q_widths(self) -> List[int]:
        return [self.q_input_dim] + self.q_hidden_dims + [self.num_actions]


@dataclass(eq=False)
class NetworkParams:
    """
    Weights (shape `(fan_in, fan_out)`) and biases of both branches.

    `has_q_head` is False when the action branch was not part of a loaded
    checkpoint; its weights are then zero.
    """

    spec: NetworkSpec
    cls_weights: List[np.ndarray]
    cls_biases: List[np.ndarray]
    q_weights: List[np.ndarray]
    q_biases: List[np.ndarray]
    has_q_head: bool = True

    def __post_init__(self):
        self._check_shapes(self.cls_weights, self.cls_biases, self.spec.classifier_widths, "classifier")
        self._check_shapes(self.q_weights, self.q_biases, self.spec.q_widths, "action")

    @staticmethod
    def _check_shapes(weights, biases, widths, branch) -> None:
        if len(weights) != len(widths) - 1 or len(biases) != len(widths) - 1:
            raise ValueError(f"{branch} branch needs {len(widths) - 1} layers, got {len(weights)}")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise ValueError(
                    f"{branch} layer {i} has shapes {w.shape}/{b.shape}, "
                    f"expected {(widths[i], widths[i + 1])}/{(widths[i + 1],)}"
                )

    def arrays(self) -> List[np.ndarray]:
        return self.cls_weights + self.cls_biases + self.q_weights + self.q_biases

    def copy(self) -> 'NetworkParams':
        return NetworkParams(
            self.spec,
            [w.copy() for w in self.cls_weights],
            [b.copy() for b in self.cls_biases],
            [w.copy() for w in self.q_weights],
            [b.copy() for b in self.q_biases],
            self.has_q_head
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def equals(self, other: 'NetworkParams') -> bool:
        mine, theirs = self.arrays(), other.arrays()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(mine, theirs)
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_vector(self, vector: np.ndarray) -> 'NetworkParams':
        """Copy of these params with every entry taken, in `arrays()` order, from `vector`."""
        vector = np.asarray(vector, dtype=float)
        result = self.copy()
        offset = 0
        for array in result.arrays():
            array[...] = vector[offset:offset + array.size].reshape(array.shape)
            offset += array.size
        if offset != vector.size:
            raise ValueError(f"vector has {vector.size} entries, params have {offset}")
        return result

    def _combined(self, other: 'NetworkParams', scale: float) -> 'NetworkParams':
        result = self.copy()
        for mine, theirs in zip(result.arrays(), other.arrays()):
            mine += scale * theirs
        return result

    def to_dict(self) -> Dict[str, object]:
        data = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "spec": asdict(self.spec),
            "classifier": {
                "weights": [w.tolist() for w in self.cls_weights],
                "biases": [b.tolist() for b in self.cls_biases]
            }
        }
        if self.has_q_head:
            data["q_head"] = {
                "weights": [w.tolist() for w in self.q_weights],
                "biases": [b.tolist() for b in self.q_biases]
            }
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> 'NetworkParams':
        if data.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a network checkpoint")
        spec = NetworkSpec(**data["spec"])
        classifier = data["classifier"]
        cls_weights = [np.asarray(w, dtype=float) for w in classifier["weights"]]
        cls_biases = [np.asarray(b, dtype=float) for b in classifier["biases"]]
        q_head = data.get("q_head")
        if q_head is None:
            empty = zero_params(spec)
            return cls(spec, cls_weights, cls_biases, empty.q_weights, empty.q_biases, has_q_head=False)
        return cls(
            spec, cls_weights, cls_biases,
            [np.asarray(w, dtype=float) for w in q_head["weights"]],
            [np.asarray(b, dtype=float) for b in q_head["biases"]]
        )

    def save(self, path: str, include_q_head: bool = True) -> str:
        data = self.to_dict()
        if not include_q_head:
            data.pop("q_head", None)
        return atomic_write_text(path, json.dumps(data) + "\n")

    @classmethod
    def load(cls, path: str) -> 'NetworkParams':
        with open(path, 'r') as f:
            return cls.from_dict(json.load(f))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases; deterministic given `seed`."""
    rng = np.random.default_rng(seed)
    cw = spec.classifier_widths
    qw = spec.q_widths
    return NetworkParams(
        spec,
        [_glorot(rng, cw[i], cw[i + 1]) for i in range(len(cw) - 1)],
        [np.zeros(cw[i + 1]) for i in range(len(cw) - 1)],
        [_glorot(rng, qw[i], qw[i + 1]) for i in range(len(qw) - 1)],
        [np.zeros(qw[i + 1]) for i in range(len(qw) - 1)]
    )


def zero_params(spec: NetworkSpec) -> NetworkParams:
    cw = spec.classifier_widths
    qw = spec.q_widths
    return NetworkParams(
        spec,
        [np.zeros((cw[i], cw[i + 1])) for i in range(len(cw) - 1)],
        [np.zeros(cw[i + 1]) for i in range(len(cw) - 1)],
        [np.zeros((qw[i], qw[i + 1])) for i in range(len(qw) - 1)],
        [np.zeros(qw[i + 1]) for i in range(len(qw) - 1)]
    )


class ForwardResult(NamedTuple):
    belief: BeliefVector
    features: np.ndarray
    qvalues: np.ndarray


class Sample(NamedTuple):
    """One supervised + temporal-difference training example."""
    observation: np.ndarray
    state: EncodedState
    label: int
    action: int
    target_q: float


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _classifier_pass(params: NetworkParams, x: np.ndarray,
                     masks: Optional[List[np.ndarray]] = None) -> Tuple[List[np.ndarray], np.ndarray]:
    """Activations of every classifier layer (input first, features last) and the softmax output."""
    activations = [x]
    h = x
    num_hidden = len(params.spec.hidden_dims)
    for i in range(len(params.cls_weights) - 1):
        h = _relu(h @ params.cls_weights[i] + params.cls_biases[i])
        if masks is not None and i < num_hidden:
            h = h * masks[i]
        activations.append(h)
    logits = h @ params.cls_weights[-1] + params.cls_biases[-1]
    return activations, special.softmax(logits, axis=1)


def _q_pass(params: NetworkParams, z: np.ndarray) -> List[np.ndarray]:
    """Activations of the action branch, input first; the last entry is the linear output."""
    activations = [z]
    h = z
    for i in range(len(params.q_weights) - 1):
        h = _relu(h @ params.q_weights[i] + params.q_biases[i])
        activations.append(h)
    activations.append(h @ params.q_weights[-1] + params.q_biases[-1])
    return activations


def _check_observation(spec: NetworkSpec, observation: np.ndarray) -> np.ndarray:
    x = np.asarray(observation, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"observation has width {x.shape[-1]}, network expects {spec.input_dim}")
    return x


def _posterior_block(spec: NetworkSpec, state: EncodedState) -> np.ndarray:
    if state.num_classes != spec.num_classes or state.num_actions != spec.num_actions:
        raise ValueError(
            f"state is {state.num_classes}x{state.num_actions}, "
            f"network expects {spec.num_classes}x{spec.num_actions}"
        )
    return encode(state, np.zeros(0))


def classify(params: NetworkParams, observation: np.ndarray) -> Tuple[BeliefVector, np.ndarray]:
    """Class belief and penultimate features of one observation."""
    x = _check_observation(params.spec, observation)
    if x.shape[0] != 1:
        raise ValueError("classify takes a single observation")
    activations, probs = _classifier_pass(params, x)
    return BeliefVector(probs[0]), activations[-1][0]


def latest_block(params: NetworkParams, belief: BeliefLike, features: np.ndarray) -> np.ndarray:
    """What the action branch sees of the latest observation."""
    if params.spec.state_block == "features":
        return np.asarray(features, dtype=float)
    return as_belief(belief).probs.copy()


def action_values(params: NetworkParams, state: EncodedState, latest: np.ndarray) -> np.ndarray:
    """Q-values of every action for a fused state and the latest observation block."""
    latest = np.asarray(latest, dtype=float).ravel()
    if latest.size != params.spec.latest_dim:
        raise ValueError(f"latest block has {latest.size} entries, network expects {params.spec.latest_dim}")
    z = np.concatenate([_posterior_block(params.spec, state), latest])[None, :]
    return _q_pass(params, z)[-1][0]


def forward(params: NetworkParams, observation_features: np.ndarray, state: EncodedState) -> ForwardResult:
    """Classify an observation and score every action from `state` plus that observation."""
    belief, features = classify(params, observation_features)
    qvalues = action_values(params, state, latest_block(params, belief, features))
    return ForwardResult(belief, features, qvalues)


def cross_entropy(belief: BeliefLike, label: int) -> float:
    """-log belief[label], with the belief clamped below at EPS_BELIEF."""
    b = as_belief(belief)
    if not (0 <= label < b.num_classes):
        raise ValueError(f"label {label} is outside [0, {b.num_classes})")
    return float(-np.log(max(b.probs[label], EPS_BELIEF)))


def td_cost(predicted_q: float, target_q: float) -> float:
    return float((target_q - predicted_q) ** 2)


class _BatchPass(NamedTuple):
    x: np.ndarray
    labels: np.ndarray
    actions: np.ndarray
    targets: np.ndarray
    activations: List[np.ndarray]
    probs: np.ndarray
    q_activations: List[np.ndarray]


def _run_batch(params: NetworkParams, batch: Sequence[Sample],
               masks: Optional[List[np.ndarray]] = None) -> _BatchPass:
    if not batch:
        raise ValueError("batch must not be empty")
    spec = params.spec
    x = _check_observation(spec, np.vstack([np.asarray(s.observation, dtype=float) for s in batch]))
    posterior = np.vstack([_posterior_block(spec, s.state) for s in batch])
    labels = np.array([s.label for s in batch], dtype=int)
    actions = np.array([s.action for s in batch], dtype=int)
    targets = np.array([s.target_q for s in batch], dtype=float)
    if np.any((labels < 0) | (labels >= spec.num_classes)):
        raise ValueError("batch contains a label outside the class range")
    if np.any((actions < 0) | (actions >= spec.num_actions)):
        raise ValueError("batch contains an action outside the action range")

    activations, probs = _classifier_pass(params, x, masks)
    latest = activations[-1] if spec.state_block == "features" else probs
    q_activations = _q_pass(params, np.hstack([posterior, latest]))
    return _BatchPass(x, labels, actions, targets, activations, probs, q_activations)


def _costs(run: _BatchPass) -> Tuple[float, float]:
    rows = np.arange(run.labels.size)
    c_cl = float(np.mean(-np.log(np.maximum(run.probs[rows, run.labels], EPS_BELIEF))))
    predicted = run.q_activations[-1][rows, run.actions]
    c_rl = float(np.mean((run.targets - predicted) ** 2))
    return c_cl, c_rl


def batch_costs(params: NetworkParams, batch: Sequence[Sample]) -> Tuple[float, float]:
    """Batch-mean (C_CL, C_RL) without dropout."""
    return _costs(_run_batch(params, batch))


def temporal_differences(params: NetworkParams, batch: Sequence[Sample]) -> np.ndarray:
    """target_q - Q(state, action) for every sample."""
    run = _run_batch(params, batch)
    return run.targets - run.q_activations[-1][np.arange(run.labels.size), run.actions]


def _backward(params: NetworkParams, run: _BatchPass, terms: Sequence[str],
              masks: Optional[List[np.ndarray]] = None) -> NetworkParams:
    spec = params.spec
    n = run.labels.size
    rows = np.arange(n)

    grad_logits = np.zeros_like(run.probs)
    if "cl" in terms:
        grad_logits = run.probs.copy()
        grad_logits[rows, run.labels] -= 1.0
        # the clamped cost is flat below EPS_BELIEF
        grad_logits[run.probs[rows, run.labels] < EPS_BELIEF] = 0.0
        grad_logits /= n

    q_out = run.q_activations[-1]
    grad_q = np.zeros_like(q_out)
    if "rl" in terms:
        grad_q[rows, run.actions] = -2.0 * (run.targets - q_out[rows, run.actions]) / n

    # action branch
    q_grad_w: List[np.ndarray] = [None] * len(params.q_weights)
    q_grad_b: List[np.ndarray] = [None] * len(params.q_biases)
    grad = grad_q
    for i in reversed(range(len(params.q_weights))):
        q_grad_w[i] = run.q_activations[i].T @ grad
        q_grad_b[i] = grad.sum(axis=0)
        grad = grad @ params.q_weights[i].T
        if i > 0:
            grad = grad * (run.q_activations[i] > 0)
    grad_latest = grad[:, spec.num_classes * spec.num_actions:]

    grad_features = None
    if spec.state_block == "features":
        grad_features = grad_latest
    else:
        p = run.probs
        grad_logits = grad_logits + p * (grad_latest - np.sum(p * grad_latest, axis=1, keepdims=True))

    # classifier branch
    num_layers = len(params.cls_weights)
    num_hidden = len(spec.hidden_dims)
    cls_grad_w: List[np.ndarray] = [None] * num_layers
    cls_grad_b: List[np.ndarray] = [None] * num_layers
    cls_grad_w[-1] = run.activations[-1].T @ grad_logits
    cls_grad_b[-1] = grad_logits.sum(axis=0)
    grad_h = grad_logits @ params.cls_weights[-1].T
    if grad_features is not None:
        grad_h = grad_h + grad_features
    for i in reversed(range(num_layers - 1)):
        grad_z = grad_h * (run.activations[i + 1] > 0)
        if masks is not None and i < num_hidden:
            grad_z = grad_z * masks[i]
        cls_grad_w[i] = run.activations[i].T @ grad_z
        cls_grad_b[i] = grad_z.sum(axis=0)
        grad_h = grad_z @ params.cls_weights[i].T

    return NetworkParams(spec, cls_grad_w, cls_grad_b, q_grad_w, q_grad_b)


def gradients(params: NetworkParams, batch: Sequence[Sample],
              terms: Sequence[str] = ("cl", "rl")) -> NetworkParams:
    """
    Analytic gradient of the selected batch-mean cost terms.

    `terms` picks `cl` (cross-entropy), `rl` (TD) or both. The fused
    posterior of each state is a constant; the TD error reaches the
    classifier only through the latest observation block, and only the
    output of the taken action receives it.
    """
    unknown = set(terms) - {"cl", "rl"}
    if unknown:
        raise ValueError(f"unknown cost terms {sorted(unknown)}")
    return _backward(params, _run_batch(params, batch), terms)


def _dropout_masks(spec: NetworkSpec, n: int, rng: Optional[np.random.Generator]) -> Optional[List[np.ndarray]]:
    if spec.dropout == 0.0 or rng is None:
        return None
    keep = 1.0 - spec.dropout
    return [(rng.random((n, width)) < keep) / keep for width in spec.hidden_dims]


def train_step(params: NetworkParams, batch: Sequence[Sample], lr: float,
               rng: Optional[np.random.Generator] = None) -> NetworkParams:
    """
    One SGD step on C_CL + C_RL over the batch mean.

    With `spec.dropout > 0` and an `rng`, inverted dropout masks the
    classifier hidden layers for this step. Raises FloatingPointError and
    leaves `params` untouched when a gradient or an updated entry is not
    finite.
    """
    if lr < 0 or not np.isfinite(lr):
        raise ValueError(f"learning rate must be a non-negative finite number, got {lr!r}")
    batch = list(batch)
    if not batch:
        raise ValueError("batch must not be empty")
    if lr == 0:
        return params.copy()

    masks = _dropout_masks(params.spec, len(batch), rng)
    grads = _backward(params, _run_batch(params, batch, masks), ("cl", "rl"), masks)
    if not grads.is_finite():
        logger.error("non-finite gradient, step aborted", batch_size=len(batch), lr=lr)
        raise FloatingPointError("non-finite gradient in train_step")

    updated = params._combined(grads, -lr)
    if not updated.is_finite():
        logger.error("non-finite parameters after update, step aborted", batch_size=len(batch), lr=lr)
        raise FloatingPointError("train_step produced non-finite parameters")
    return updated
