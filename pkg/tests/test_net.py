"""
Tests for the joint classification / action-value network.
"""

import math
import os
import sys
import tempfile
from dataclasses import replace

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.belief import BeliefVector, DirichletTable, EncodedState, dirichlet_fuse
from src.net import (
    NetworkParams, NetworkSpec, Sample, batch_costs, classify, cross_entropy, forward, gradients, init_params,
    td_cost, train_step, zero_params
)


def toy_spec(**overrides):
    values = dict(input_dim=5, hidden_dims=[6], num_classes=4, num_actions=2, feature_dim=3, q_hidden_dims=[4])
    values.update(overrides)
    return NetworkSpec(**values)


def random_state(rng, spec):
    table = DirichletTable(rng.uniform(0.5, 3.0, size=(spec.num_classes, spec.num_actions, spec.num_classes)))
    state = EncodedState.initial("dirichlet", spec.num_classes, spec.num_actions)
    for _ in range(2):
        b = BeliefVector.normalized(rng.dirichlet(np.ones(spec.num_classes)))
        state = dirichlet_fuse(state, b, int(rng.integers(spec.num_actions)), table)
    return state


def random_batch(rng, spec, n=6):
    return [
        Sample(
            observation=rng.normal(size=spec.input_dim),
            state=random_state(rng, spec),
            label=int(rng.integers(spec.num_classes)),
            action=int(rng.integers(spec.num_actions)),
            target_q=float(rng.normal())
        )
        for _ in range(n)
    ]


def numeric_gradient(params, cost, h=1e-6):
    base = params.to_vector()
    grad = np.zeros_like(base)
    for i in range(base.size):
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (cost(params.with_vector(up)) - cost(params.with_vector(down))) / (2 * h)
    return grad


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def with_random_biases(params, rng, scale=0.1):
    """Non-zero biases keep ReLU pre-activations off the kink at zero."""
    return replace(
        params,
        cls_biases=[rng.normal(scale=scale, size=b.shape) for b in params.cls_biases],
        q_biases=[rng.normal(scale=scale, size=b.shape) for b in params.q_biases]
    )


class TestNetworkSpec:
    """Tests for NetworkSpec."""

    def test_widths(self):
        """Test derived layer widths."""
        spec = toy_spec()
        assert spec.q_input_dim == 4 * 2 + 3
        assert spec.classifier_widths == [5, 6, 3, 4]
        assert spec.q_widths == [11, 4, 2]

    def test_belief_block_width(self):
        """Test the Q input width with a belief block."""
        assert toy_spec(state_block="belief").q_input_dim == 4 * 2 + 4

    def test_invalid(self):
        """Test invalid specs are rejected."""
        with pytest.raises(ValueError):
            toy_spec(hidden_dims=[0])
        with pytest.raises(ValueError):
            toy_spec(state_block="image")
        with pytest.raises(ValueError):
            toy_spec(dropout=1.0)


class TestForward:
    """Tests for classify and forward."""

    def test_zero_params(self):
        """Test a zero network outputs a uniform belief."""
        spec = toy_spec()
        result = forward(zero_params(spec), np.ones(5), EncodedState.initial("dirichlet", 4, 2))
        assert np.allclose(result.belief.probs, 0.25)
        assert np.array_equal(result.qvalues, np.zeros(2))

    def test_belief_on_simplex(self):
        """Test beliefs lie on the simplex."""
        rng = np.random.default_rng(0)
        spec = toy_spec()
        params = init_params(spec, 1)
        for _ in range(20):
            belief, _ = classify(params, rng.normal(scale=10.0, size=5))
            assert abs(belief.probs.sum() - 1.0) <= 1e-9

    def test_deterministic(self):
        """Test the forward pass is deterministic."""
        rng = np.random.default_rng(0)
        spec = toy_spec()
        params = init_params(spec, 3)
        obs = rng.normal(size=5)
        state = random_state(rng, spec)
        first = forward(params, obs, state)
        second = forward(params, obs, state)
        assert np.array_equal(first.belief.probs, second.belief.probs)
        assert np.array_equal(first.features, second.features)
        assert np.array_equal(first.qvalues, second.qvalues)

    def test_softmax_shift_invariance(self):
        """Test shifting the logits leaves the belief unchanged."""
        spec = toy_spec()
        params = init_params(spec, 2)
        shifted = params.copy()
        shifted.cls_biases[-1] += 7.5
        obs = np.linspace(-1, 1, 5)
        assert np.allclose(classify(params, obs)[0].probs, classify(shifted, obs)[0].probs, atol=1e-9)

    def test_dimension_mismatch(self):
        """Test a wrong input length is rejected."""
        spec = toy_spec()
        params = init_params(spec, 0)
        with pytest.raises(ValueError):
            forward(params, np.ones(4), EncodedState.initial("dirichlet", 4, 2))
        with pytest.raises(ValueError):
            forward(params, np.ones(5), EncodedState.initial("dirichlet", 3, 2))

    def test_init_is_seeded(self):
        """Test initialization depends only on the seed."""
        spec = toy_spec()
        assert init_params(spec, 5).equals(init_params(spec, 5))
        assert not init_params(spec, 5).equals(init_params(spec, 6))
        assert all(np.all(b == 0) for b in init_params(spec, 5).cls_biases)


class TestCosts:
    """Tests for cross_entropy and td_cost."""

    def test_cross_entropy(self):
        """Test cross entropy values."""
        assert cross_entropy([0.0, 1.0, 0.0], 1) == pytest.approx(0.0, abs=1e-7)
        assert cross_entropy(BeliefVector.uniform(136), 5) == pytest.approx(4.912655, abs=1e-6)
        assert cross_entropy([0.25, 0.75], 0) == pytest.approx(1.386294, abs=1e-6)

    def test_cross_entropy_clamped(self):
        """Test cross entropy clamps zero probabilities."""
        assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-8))

    def test_td_cost(self):
        """Test the squared TD cost."""
        assert td_cost(0.3, 0.3) == 0.0
        assert td_cost(0.5, 1.45) == pytest.approx(0.9025)
        assert td_cost(0.0, 1.0) == td_cost(1.0, 0.0) == 1.0

    def test_batch_costs_match_single_sample(self):
        """Test batch costs match per-sample costs."""
        rng = np.random.default_rng(4)
        spec = toy_spec()
        params = init_params(spec, 0)
        sample = random_batch(rng, spec, n=1)[0]
        result = forward(params, sample.observation, sample.state)
        c_cl, c_rl = batch_costs(params, [sample])
        assert c_cl == pytest.approx(cross_entropy(result.belief, sample.label), rel=1e-12)
        assert c_rl == pytest.approx(td_cost(result.qvalues[sample.action], sample.target_q), rel=1e-12)


class TestGradients:
    """Finite-difference checks of the analytic gradients."""

    @pytest.mark.parametrize("state_block", ["features", "belief"])
    def test_each_term_matches_finite_differences(self, state_block):
        """Test each cost term against finite differences."""
        rng = np.random.default_rng(10)
        spec = toy_spec(state_block=state_block)
        params = with_random_biases(init_params(spec, 7), rng)
        batch = random_batch(rng, spec)

        checks = [
            (("cl",), lambda p: batch_costs(p, batch)[0]),
            (("rl",), lambda p: batch_costs(p, batch)[1]),
            (("cl", "rl"), lambda p: sum(batch_costs(p, batch))),
        ]
        for terms, cost in checks:
            analytic = gradients(params, batch, terms).to_vector()
            assert relative_error(analytic, numeric_gradient(params, cost)) < 1e-4

    def test_random_small_specs(self):
        """Test gradients on random small networks."""
        rng = np.random.default_rng(21)
        for trial in range(5):
            spec = NetworkSpec(
                input_dim=int(rng.integers(2, 9)),
                hidden_dims=[int(rng.integers(2, 9))],
                num_classes=int(rng.integers(2, 5)),
                num_actions=int(rng.integers(1, 4)),
                feature_dim=int(rng.integers(2, 9)),
                q_hidden_dims=[int(rng.integers(2, 9))]
            )
            params = with_random_biases(init_params(spec, trial), rng)
            batch = random_batch(rng, spec, n=4)
            analytic = gradients(params, batch).to_vector()
            numeric = numeric_gradient(params, lambda p: sum(batch_costs(p, batch)))
            assert relative_error(analytic, numeric) < 1e-4

    def test_untaken_action_gets_no_q_gradient(self):
        """Test untaken actions get no Q gradient."""
        rng = np.random.default_rng(1)
        spec = toy_spec(num_actions=3)
        params = init_params(spec, 0)
        sample = random_batch(rng, spec, n=1)[0]._replace(action=1)
        grads = gradients(params, [sample], ("rl",))
        assert np.all(grads.q_weights[-1][:, [0, 2]] == 0)
        assert np.all(grads.q_biases[-1][[0, 2]] == 0)
        assert np.any(grads.q_weights[-1][:, 1] != 0)

    def test_cross_entropy_leaves_q_branch_alone(self):
        """Test cross entropy does not touch the Q branch."""
        rng = np.random.default_rng(2)
        spec = toy_spec()
        grads = gradients(init_params(spec, 0), random_batch(rng, spec), ("cl",))
        assert all(np.all(w == 0) for w in grads.q_weights + grads.q_biases)

    def test_unknown_term(self):
        """Test an unknown cost term is rejected."""
        rng = np.random.default_rng(2)
        spec = toy_spec()
        with pytest.raises(ValueError):
            gradients(init_params(spec, 0), random_batch(rng, spec), ("l2",))


class TestTrainStep:
    """Tests for train_step."""

    def test_zero_lr(self):
        """Test a zero learning rate leaves the weights unchanged."""
        rng = np.random.default_rng(0)
        spec = toy_spec()
        params = init_params(spec, 0)
        assert train_step(params, random_batch(rng, spec), 0.0).equals(params)

    def test_empty_batch(self):
        """Test an empty batch is rejected."""
        spec = toy_spec()
        with pytest.raises(ValueError):
            train_step(init_params(spec, 0), [], 0.1)

    def test_separable_set_is_learned(self):
        """Test a separable set is learned."""
        rng = np.random.default_rng(0)
        spec = NetworkSpec(input_dim=3, hidden_dims=[16], num_classes=3, num_actions=2, feature_dim=8,
                           q_hidden_dims=[8])
        params = init_params(spec, 0)
        state = EncodedState.initial("dirichlet", 3, 2)
        batch = []
        for i in range(30):
            label = i % 3
            obs = 3.0 * np.eye(3)[label] + rng.normal(scale=0.1, size=3)
            batch.append(Sample(obs, state, label, i % 2, 0.0))
        for _ in range(200):
            params = train_step(params, batch, 0.5)
        assert batch_costs(params, batch)[0] < 0.1

    def test_updates_stay_finite(self):
        """Test updates stay finite."""
        rng = np.random.default_rng(8)
        spec = toy_spec()
        params = init_params(spec, 8)
        for _ in range(50):
            params = train_step(params, random_batch(rng, spec), 0.1)
            assert params.is_finite()

    def test_non_finite_gradient_aborts(self):
        """Test a non-finite gradient aborts the step."""
        rng = np.random.default_rng(0)
        spec = toy_spec()
        params = init_params(spec, 0)
        params.cls_weights[0][0, 0] = np.inf
        before = params.to_vector()
        with pytest.raises(FloatingPointError):
            train_step(params, random_batch(rng, spec), 0.1)
        assert np.array_equal(params.to_vector(), before)

    def test_dropout_is_seeded(self):
        """Test dropout masks follow the generator."""
        rng = np.random.default_rng(3)
        spec = toy_spec(dropout=0.5)
        params = init_params(spec, 0)
        batch = random_batch(rng, spec)
        first = train_step(params, batch, 0.1, np.random.default_rng(9))
        second = train_step(params, batch, 0.1, np.random.default_rng(9))
        assert first.equals(second)
        assert not first.equals(train_step(params, batch, 0.1))


class TestCheckpoint:
    """Tests for NetworkParams save/load."""

    def test_round_trip_exact(self):
        """Test checkpoints restore the exact weights."""
        spec = toy_spec(hidden_dims=[6, 5])
        params = init_params(spec, 12)
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, "checkpoint.json")
            params.save(path)
            loaded = NetworkParams.load(path)
        assert loaded.equals(params)
        assert loaded.spec == spec
        assert loaded.has_q_head

    def test_without_q_head(self):
        """Test checkpoints without a Q head."""
        spec = toy_spec()
        params = init_params(spec, 1)
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, "classifier.json")
            params.save(path, include_q_head=False)
            loaded = NetworkParams.load(path)
        assert not loaded.has_q_head
        assert all(np.all(w == 0) for w in loaded.q_weights)
        assert np.array_equal(loaded.cls_weights[0], params.cls_weights[0])

    def test_rejects_other_documents(self):
        """Test other documents are rejected."""
        with pytest.raises(ValueError):
            NetworkParams.from_dict({"format": "something-else"})


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
