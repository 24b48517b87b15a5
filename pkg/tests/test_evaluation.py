"""
Tests for accuracy tables, variant comparison and policy statistics.
"""

import json
import os
import sys
import tempfile
from dataclasses import replace

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from observability.metrics import MetricsCollector
from observability.tracer import Tracer
from src import env
from src.agent import LEARNED, RANDOM, TrainConfig, train
from src.belief import DirichletTable
from src.evaluation import (
    AccuracyRow, AccuracyTable, ComparisonReport, EvalConfig, RunSpec, acceptance_checks, compare, compare_rows,
    evaluate, grid_run_specs, nll_curve, nll_trend, smooth, transition_stats
)
from src.net import NetworkSpec, init_params, zero_params

NUM_CLASSES = 3
NUM_BINS = 16


def one_hot_tracks(split="test"):
    """Every view of object o is e_o."""
    eye = np.eye(NUM_CLASSES)
    tracks = {(o, t): {p: eye[o].copy() for p in range(NUM_BINS)} for o in range(NUM_CLASSES) for t in range(2)}
    return env.TrackDataset(NUM_CLASSES, NUM_BINS, NUM_CLASSES, tracks, split)


def hand_model():
    """A classifier that reads the one-hot view and a table keyed on the true object."""
    actions = env.ActionSet.standard(NUM_BINS)
    spec = NetworkSpec(input_dim=NUM_CLASSES, hidden_dims=[NUM_CLASSES], num_classes=NUM_CLASSES,
                       num_actions=actions.num_actions, feature_dim=NUM_CLASSES, q_hidden_dims=[4])
    params = zero_params(spec)
    params.cls_weights[0][:] = np.eye(NUM_CLASSES)
    params.cls_weights[1][:] = np.eye(NUM_CLASSES)
    params.cls_weights[2][:] = 20.0 * np.eye(NUM_CLASSES)
    alphas = np.ones((NUM_CLASSES, actions.num_actions, NUM_CLASSES))
    for o in range(NUM_CLASSES):
        alphas[o, :, o] += 5.0
    return params, DirichletTable(alphas), actions


def noisy_world():
    config = env.SyntheticConfig(num_classes=NUM_CLASSES, num_bins=NUM_BINS, feature_dim=4, num_tracks=2,
                                 ambiguity_profile="half", noise_sigma=0.8)
    _, test_set = env.split_by_track(env.gen_synthetic(config, 3), [0])
    actions = env.ActionSet.standard(NUM_BINS)
    spec = NetworkSpec(input_dim=4, hidden_dims=[6], num_classes=NUM_CLASSES, num_actions=actions.num_actions,
                       feature_dim=5, q_hidden_dims=[6])
    params = init_params(spec, 1)
    table = DirichletTable(np.random.default_rng(0).uniform(0.5, 3.0, size=(NUM_CLASSES, 10, NUM_CLASSES)))
    return params, table, test_set, actions


def half_ambiguous_world():
    """Two objects whose views are identical below bin 8 and show the object from bin 8 on."""
    actions = env.ActionSet.standard(NUM_BINS)
    eye = np.eye(2)
    tracks = {(o, t): {p: (np.ones(2) if p < NUM_BINS // 2 else eye[o]).copy() for p in range(NUM_BINS)}
              for o in range(2) for t in range(2)}
    dataset = env.TrackDataset(2, NUM_BINS, 2, tracks, "test")
    spec = NetworkSpec(input_dim=2, hidden_dims=[2], num_classes=2, num_actions=actions.num_actions,
                       feature_dim=2, q_hidden_dims=[4])
    params = zero_params(spec)
    params.cls_weights[0][:] = eye
    params.cls_weights[1][:] = eye
    params.cls_weights[2][:] = 2.0 * eye
    alphas = np.full((2, actions.num_actions, 2), 1.5)
    alphas[0, :, 0] = alphas[1, :, 1] = 3.0
    return params, DirichletTable(alphas), dataset, actions


def grid_table(dn_learned_scores, seeds=10):
    """Six-row table over `seeds` seeds; DN/learned takes its per-seed score from the list."""
    flat = {
        "naive_bayes/random": 0.40, "naive_bayes/learned": 0.45, "dirichlet/random": 0.42,
        "dirichlet/learned": 0.46, "dirichlet+norepeat/random": 0.44
    }
    rows = [AccuracyRow(name, [[0.40] + [score] * 5 for _ in range(seeds)], 10) for name, score in flat.items()]
    rows[2] = AccuracyRow("dirichlet/random", [[0.42] + [0.42] * 5 for _ in range(seeds)], 10)
    rows.append(AccuracyRow("dirichlet+norepeat/learned", [[0.40] + [s] * 5 for s in dn_learned_scores], 10))
    return AccuracyTable(rows, 10, list(range(seeds)))


class TestEvaluate:
    """Tests for evaluate."""

    def setup_method(self):
        MetricsCollector.reset_instance()
        Tracer.reset_instance()
        self.eval_config = EvalConfig(episodes_per_track=2, seeds=[0, 1, 2])

    @pytest.mark.parametrize("encoder", ["dirichlet", "naive_bayes"])
    @pytest.mark.parametrize("policy", [LEARNED, RANDOM])
    def test_separable_is_always_right(self, encoder, policy):
        """Test separable views are always classified right."""
        params, table, actions = hand_model()
        config = TrainConfig(encoder_kind=encoder)
        result = evaluate(params, table, one_hot_tracks(), policy, config, self.eval_config, actions=actions)
        row = result.rows[0]
        assert row.accuracy == pytest.approx([1.0] * (config.moves_per_sequence + 1))
        assert row.stderr == pytest.approx([0.0] * (config.moves_per_sequence + 1))
        assert result.num_episodes == 6 * 2
        assert row.name == f"{config.variant}/{policy}"

    def test_first_frame_is_policy_independent(self):
        """Test the first frame does not depend on the policy."""
        params, table, test_set, actions = noisy_world()
        config = TrainConfig()
        learned = evaluate(params, table, test_set, LEARNED, config, self.eval_config, actions=actions).rows[0]
        random = evaluate(params, table, test_set, RANDOM, config, self.eval_config, actions=actions).rows[0]
        assert abs(learned.accuracy[0] - random.accuracy[0]) <= 1e-12
        assert all(0.0 <= a <= 1.0 for a in learned.accuracy + random.accuracy)

    def test_threads_do_not_change_results(self):
        """Test threads do not change the results."""
        params, table, test_set, actions = noisy_world()
        config = TrainConfig()
        serial = evaluate(params, table, test_set, RANDOM, config, self.eval_config, 1, actions)
        parallel = evaluate(params, table, test_set, RANDOM, config, self.eval_config, 3, actions)
        assert serial.rows[0].per_seed == parallel.rows[0].per_seed

    def test_episodes_counted(self):
        """Test evaluation metrics are recorded."""
        params, table, actions = hand_model()
        evaluate(params, table, one_hot_tracks(), LEARNED, TrainConfig(), self.eval_config, actions=actions)
        assert MetricsCollector().counter("eval.episodes").get() == 3 * 6 * 2
        assert MetricsCollector().histogram("eval.final_accuracy").get_count() == 3

    def test_rejects_training_split(self):
        """Test evaluating on the training split is rejected."""
        params, table, actions = hand_model()
        with pytest.raises(ValueError):
            evaluate(params, table, one_hot_tracks("train"), LEARNED, TrainConfig(), self.eval_config,
                     actions=actions)

    def test_rejects_empty_test_set(self):
        """Test an empty test set is rejected."""
        params, table, actions = hand_model()
        empty = env.TrackDataset(NUM_CLASSES, NUM_BINS, NUM_CLASSES, {}, "test")
        with pytest.raises(ValueError):
            evaluate(params, table, empty, LEARNED, TrainConfig(), self.eval_config, actions=actions)

    def test_invalid_eval_config(self):
        """Test invalid evaluation settings are rejected."""
        with pytest.raises(ValueError):
            EvalConfig(seeds=[])
        with pytest.raises(ValueError):
            EvalConfig(policies=["sequential"])


class TestFusionOnAmbiguousViews:
    """Joint Dirichlet readout on views that are only sometimes informative."""

    def setup_method(self):
        MetricsCollector.reset_instance()
        Tracer.reset_instance()

    def test_accuracy_never_drops_with_more_views(self):
        """Random masked moves only add evidence, so per-seed accuracy is non-decreasing."""
        params, table, dataset, actions = half_ambiguous_world()
        config = TrainConfig(mask_repeats=True)
        row = evaluate(params, table, dataset, RANDOM, config, EvalConfig(episodes_per_track=8, seeds=[0, 1, 2]),
                       actions=actions).rows[0]
        for per_seed in row.per_seed:
            assert all(b >= a for a, b in zip(per_seed, per_seed[1:]))
        assert row.accuracy[-1] > row.accuracy[0]

    def test_first_view_ties_resolve_to_lowest_class(self):
        """An ambiguous first view leaves both objects tied; object 0 wins the tie."""
        params, table, dataset, actions = half_ambiguous_world()
        config = TrainConfig(mask_repeats=True)
        row = evaluate(params, table, dataset, RANDOM, config,
                       EvalConfig(episodes_per_track=1, seeds=[0], initial_poses=[0]), actions=actions).rows[0]
        assert row.accuracy[0] == pytest.approx(0.5)


class TestVariantOrdering:
    """Reduced-scale variant ordering on the paired benchmark."""

    def setup_method(self):
        MetricsCollector.reset_instance()
        Tracer.reset_instance()

    def test_masked_dirichlet_learned_policy_holds_its_own(self):
        """Over three seeds DN/learned ends within a loose margin of DN/random and NB/learned."""
        synthetic = env.SyntheticConfig(num_classes=4, num_bins=32, feature_dim=4, num_tracks=4,
                                        ambiguity_profile="paired", noise_sigma=0.3)
        train_set, test_set = env.split_by_track(env.gen_synthetic(synthetic, 0), [0, 1])
        actions = env.ActionSet.standard(32)
        spec = NetworkSpec(input_dim=4, hidden_dims=[16], num_classes=4, num_actions=actions.num_actions,
                           feature_dim=8, q_hidden_dims=[16])
        config = TrainConfig(num_iterations=400, minibatch_size=32, lr_decay_points=[200, 300], log_every=400)

        def trainer(encoder, mask_repeats, seed):
            run = replace(config, encoder_kind=encoder.value, mask_repeats=mask_repeats, seed=seed)
            result = train(train_set, run, spec, actions)
            return result.params, result.table

        specs = [RunSpec("naive_bayes", False, LEARNED), RunSpec("dirichlet", True, RANDOM),
                 RunSpec("dirichlet", True, LEARNED)]
        report = compare(specs, test_set, trainer, config, EvalConfig(episodes_per_track=4, seeds=[0, 1, 2]),
                         actions=actions)
        nb_learned, dn_random, dn_learned = (report.table.row(s.name) for s in specs)
        assert dn_learned.accuracy[-1] >= dn_random.accuracy[-1] - 0.15
        assert dn_learned.accuracy[-1] >= nb_learned.accuracy[-1] - 0.15
        assert dn_random.accuracy[-1] >= dn_random.accuracy[0] - 0.03


class TestAcceptanceChecks:
    """Tests for acceptance_checks."""

    def setup_method(self):
        self.trends = [{"first_10pct": 1.0, "last_10pct": 0.5, "decreased": True}] * 20
        self.concentrations = {"naive_bayes": [0.6] * 10, "dirichlet+norepeat": [0.3] * 10}

    def test_all_pass(self):
        """A grid where DN/learned leads in eight seeds passes every check."""
        table = grid_table([0.5] * 8 + [0.3] * 2)
        checks = acceptance_checks(table, self.trends, self.concentrations)
        assert [c.name for c in checks] == [
            "dirichlet_nll_decreases", "single_image_dirichlet_vs_naive_bayes",
            "dirichlet+norepeat/learned >= dirichlet+norepeat/random",
            "dirichlet+norepeat/learned >= naive_bayes/learned",
            "learned_beats_random_at_step_2", "naive_bayes_policy_more_concentrated"
        ]
        assert all(c.passed for c in checks)

    def test_ordering_needs_seven_of_ten_seeds(self):
        """Six winning seeds out of ten fail both ordering checks; ties count in favor."""
        checks = {c.name: c for c in acceptance_checks(grid_table([0.5] * 6 + [0.3] * 4), self.trends,
                                                       self.concentrations)}
        assert not checks["dirichlet+norepeat/learned >= naive_bayes/learned"].passed
        assert "6/10" in checks["dirichlet+norepeat/learned >= naive_bayes/learned"].detail
        tied = {c.name: c for c in acceptance_checks(grid_table([0.44] * 7 + [0.3] * 3), self.trends,
                                                     self.concentrations)}
        assert tied["dirichlet+norepeat/learned >= dirichlet+norepeat/random"].passed

    def test_failing_trend_and_concentration(self):
        """One rising NLL curve or a more concentrated masked policy fails its check."""
        trends = self.trends[:-1] + [{"first_10pct": 0.5, "last_10pct": 1.0, "decreased": False}]
        concentrations = {"naive_bayes": [0.2] * 10, "dirichlet+norepeat": [0.3] * 10}
        checks = {c.name: c for c in acceptance_checks(grid_table([0.5] * 10), trends, concentrations)}
        assert not checks["dirichlet_nll_decreases"].passed
        assert not checks["naive_bayes_policy_more_concentrated"].passed


class TestTransitionStats:
    """Tests for transition_stats."""

    def setup_method(self):
        MetricsCollector.reset_instance()
        Tracer.reset_instance()

    def test_totals_equal_episode_count(self):
        """Test transition totals equal the episode count."""
        params, table, test_set, actions = noisy_world()
        stats = transition_stats(params, table, test_set, TrainConfig(), EvalConfig(episodes_per_track=3,
                                                                                    seeds=[0, 1]), actions=actions)
        assert stats.num_steps == 4
        assert stats.num_episodes == len(test_set.tracks) * 3 * 2
        assert stats.totals() == [stats.num_episodes] * 4

    def test_single_episode(self):
        """Test the statistics of a single episode."""
        params, table, actions = hand_model()
        dataset = env.TrackDataset(NUM_CLASSES, NUM_BINS, NUM_CLASSES,
                                   {(0, 0): one_hot_tracks().tracks[(0, 0)]}, "test")
        stats = transition_stats(params, table, dataset, TrainConfig(), EvalConfig(episodes_per_track=1, seeds=[0]),
                                 actions=actions)
        assert stats.totals() == [1, 1, 1, 1]

    def test_constant_policy_is_fully_concentrated(self):
        """Test a constant policy is fully concentrated."""
        params, table, actions = hand_model()
        stats = transition_stats(params, table, one_hot_tracks(), TrainConfig(),
                                 EvalConfig(episodes_per_track=2, seeds=[0]), actions=actions)
        assert stats.concentration() == pytest.approx(1.0)
        assert np.all(stats.counts[:, 0, 0] == stats.num_episodes)

    def test_exports(self):
        """Test CSV and DOT exports."""
        params, table, actions = hand_model()
        stats = transition_stats(params, table, one_hot_tracks(), TrainConfig(),
                                 EvalConfig(episodes_per_track=1, seeds=[0]), actions=actions)
        csv_lines = stats.to_csv().strip().split("\n")
        assert csv_lines[0] == "step,from_action,to_action,from_label,to_label,count"
        assert csv_lines[1] == "1,0,0,-pi/4,-pi/4,6"
        assert len(csv_lines) == 5
        dot = stats.to_dot("policy_test")
        assert dot.startswith('digraph "policy_test" {')
        assert '"m1_a0" -> "m2_a0"' in dot
        assert dot.rstrip().endswith("}")
        assert json.loads(json.dumps(stats.to_dict()))["num_episodes"] == 6


class TestCompare:
    """Tests for compare and the comparison report."""

    def setup_method(self):
        MetricsCollector.reset_instance()
        Tracer.reset_instance()
        self.calls = []

    def trainer(self, encoder, mask_repeats, seed):
        self.calls.append((encoder, mask_repeats, seed))
        params, table, _ = hand_model()
        return params, table

    def test_self_comparison_has_zero_deltas(self):
        """Test comparing a run with itself."""
        _, _, actions = hand_model()
        spec = RunSpec("dirichlet", False, LEARNED)
        report = compare([spec, spec], one_hot_tracks(), self.trainer, TrainConfig(),
                         EvalConfig(episodes_per_track=1, seeds=[0, 1]), actions=actions)
        assert len(report.pairs) == 1
        pair = report.pairs[0]
        assert pair.delta == [0.0] * 6
        assert (pair.wins, pair.ties, pair.losses) == (0, 2, 0)
        assert len(self.calls) == 2

    def test_six_variant_grid(self):
        """Test the six-row grid."""
        _, _, actions = hand_model()
        report = compare(grid_run_specs(), one_hot_tracks(), self.trainer, TrainConfig(),
                         EvalConfig(episodes_per_track=1, seeds=[0, 1]), actions=actions)
        assert report.table.names == [
            "naive_bayes/random", "naive_bayes/learned",
            "dirichlet/random", "dirichlet/learned",
            "dirichlet+norepeat/random", "dirichlet+norepeat/learned"
        ]
        assert len(report.pairs) == 15
        assert len(self.calls) == 3 * 2

    def test_needs_two_specs(self):
        """Test a single run spec is rejected."""
        with pytest.raises(ValueError):
            compare([RunSpec("dirichlet", False, LEARNED)], one_hot_tracks(), self.trainer, TrainConfig(),
                    EvalConfig())

    def test_report_round_trip(self):
        """Test saving and loading a report."""
        _, _, actions = hand_model()
        report = compare(grid_run_specs([LEARNED]), one_hot_tracks(), self.trainer, TrainConfig(),
                         EvalConfig(episodes_per_track=1, seeds=[0]), actions=actions)
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, "report.json")
            report.save(path)
            loaded = ComparisonReport.load(path)
        assert loaded.to_dict() == report.to_dict()
        assert "| dirichlet/learned |" in report.to_markdown()


class TestAccuracyRows:
    """Tests for AccuracyRow, AccuracyTable and compare_rows."""

    def test_wins_use_per_seed_scores(self):
        """Test wins count per-seed scores."""
        a = AccuracyRow("a", [[0.5, 0.5, 0.5], [0.5, 0.6, 0.6], [0.5, 0.9, 0.9]], 10)
        b = AccuracyRow("b", [[0.5, 0.7, 0.7], [0.5, 0.6, 0.6], [0.5, 0.5, 0.5]], 10)
        pair = compare_rows(a, b)
        assert (pair.wins, pair.ties, pair.losses) == (1, 1, 1)
        assert pair.delta == pytest.approx([0.0, -0.2 / 3, -0.2 / 3])

    def test_stderr(self):
        """Test the standard error."""
        row = AccuracyRow("a", [[0.5, 1.0]], 25)
        assert row.stderr == pytest.approx([0.1, 0.0])

    def test_csv(self):
        """Test CSV exports."""
        table = AccuracyTable([AccuracyRow("a", [[0.5, 1.0], [1.0, 1.0]], 4)], 4, [0, 1])
        assert table.to_csv().split("\n")[1] == "a,0,0.75,{}".format(repr(table.rows[0].stderr[0]))
        per_seed = table.per_seed_csv().strip().split("\n")
        assert per_seed[0] == "run,seed,observed_moves,accuracy"
        assert len(per_seed) == 5

    def test_merge_requires_same_seeds(self):
        """Test merging tables needs the same seeds."""
        a = AccuracyTable([AccuracyRow("a", [[1.0]], 1)], 1, [0])
        b = AccuracyTable([AccuracyRow("b", [[1.0]], 1)], 1, [1])
        with pytest.raises(ValueError):
            a.merged(b)
        assert a.merged(a).names == ["a", "a"]


class TestNllCurve:
    """Tests for the Dirichlet NLL curve helpers."""

    def test_smooth(self):
        """Test moving-average smoothing."""
        assert smooth([1.0, 2.0, 3.0, 4.0], 2).tolist() == pytest.approx([1.0, 1.5, 2.5, 3.5])
        assert smooth([], 5).size == 0

    def test_curve_and_trend(self):
        """Test the NLL curve and trend."""
        log = [{"iteration": i, "dirichlet_nll": 10.0 - 0.1 * i} for i in range(1, 21)]
        curve = nll_curve(log, window=3)
        assert curve[0] == (1, pytest.approx(9.9), pytest.approx(9.9))
        assert curve[2][2] == pytest.approx(9.8)
        trend = nll_trend(log)
        assert trend["decreased"]
        assert trend["first_10pct"] == pytest.approx(9.85)
        assert trend["last_10pct"] == pytest.approx(8.05)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
