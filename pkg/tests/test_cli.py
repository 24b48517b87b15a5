"""
Tests for the command line and run configuration.
"""

import json
import os
import sys
import tempfile

import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src import cli
from src.agent import TrainingAbortedError
from src.config import RunConfig, apply_overrides, known_keys, resolve_config
from src.net import NetworkParams

SMALL = [
    "--env.num_classes", "3", "--env.num_bins", "16", "--env.feature_dim", "4", "--env.num_tracks", "2",
    "--env.train_tracks", "0",
    "--network.hidden_dims", "8", "--network.feature_dim", "6", "--network.q_hidden_dims", "8",
    "--train.num_iterations", "10", "--train.moves_per_sequence", "3", "--train.minibatch_size", "8",
    "--eval.episodes_per_track", "1", "--eval.seeds", "0", "1",
    "--quiet"
]


def run(command, out, *extra):
    return cli.main([command, "--out", out, *SMALL, *extra])


def read_bytes(path):
    with open(path, 'rb') as f:
        return f.read()


def read_lines(path):
    with open(path, 'r') as f:
        return [line for line in f.read().split("\n") if line]


class TestGenData:
    """Tests for the gen-data command."""

    def test_writes_every_record(self):
        """Test gen-data writes every record."""
        with tempfile.TemporaryDirectory() as tmpdir:
            assert run("gen-data", tmpdir) == cli.EXIT_OK
            lines = read_lines(os.path.join(tmpdir, "tracks.csv"))
        assert lines[0] == "3,16,4"
        assert len(lines) - 1 == 3 * 2 * 16

    def test_same_seed_same_bytes(self):
        """Test the same seed writes the same bytes."""
        with tempfile.TemporaryDirectory() as tmpdir:
            a, b, c = (os.path.join(tmpdir, name) for name in ("a", "b", "c"))
            assert run("gen-data", a, "--seed", "7") == 0
            assert run("gen-data", b, "--seed", "7") == 0
            assert run("gen-data", c, "--seed", "8") == 0
            first = read_bytes(os.path.join(a, "tracks.csv"))
            assert first == read_bytes(os.path.join(b, "tracks.csv"))
            assert first != read_bytes(os.path.join(c, "tracks.csv"))

    def test_unwritable_path(self):
        """Test an unwritable path fails cleanly."""
        with tempfile.TemporaryDirectory() as tmpdir:
            blocker = os.path.join(tmpdir, "blocker")
            with open(blocker, 'w') as f:
                f.write("not a directory")
            target = os.path.join(blocker, "tracks.csv")
            assert run("gen-data", os.path.join(tmpdir, "out"), "--paths.data", target) == cli.EXIT_FAILURE
            assert not os.path.exists(target)
            assert not any(name.startswith(".tmp-") for name in os.listdir(tmpdir))

    def test_echoes_config_and_run_report(self):
        """Test the resolved config and run report are written."""
        with tempfile.TemporaryDirectory() as tmpdir:
            assert run("gen-data", tmpdir, "--seed", "3") == 0
            with open(os.path.join(tmpdir, "config.json")) as f:
                echoed = json.load(f)
            assert echoed["seed"] == 3
            assert echoed["env"]["num_bins"] == 16
            assert os.path.exists(os.path.join(tmpdir, "observability", "run_data.json"))
            assert os.path.exists(os.path.join(tmpdir, "observability", "report.html"))


class TestTrain:
    """Tests for the train command."""

    def test_outputs(self):
        """Test train writes its outputs."""
        with tempfile.TemporaryDirectory() as tmpdir:
            assert run("train", tmpdir) == cli.EXIT_OK
            records = [json.loads(line) for line in read_lines(os.path.join(tmpdir, "training_log.jsonl"))]
            assert len(records) == 10
            assert set(records[0]) == {"iteration", "c_cl", "c_rl", "dirichlet_nll", "epsilon", "lr"}
            params = NetworkParams.load(os.path.join(tmpdir, "checkpoint.json"))
            assert params.spec.num_classes == 3
            assert params.spec.num_actions == 10
            assert os.path.exists(os.path.join(tmpdir, "dirichlet_table.json"))
            assert len(read_lines(os.path.join(tmpdir, "nll_curve.csv"))) == 11

    def test_rerun_gives_identical_checkpoint(self):
        """Test a rerun gives an identical checkpoint."""
        with tempfile.TemporaryDirectory() as tmpdir:
            a, b = os.path.join(tmpdir, "a"), os.path.join(tmpdir, "b")
            assert run("train", a) == 0
            assert run("train", b) == 0
            for name in ("checkpoint.json", "dirichlet_table.json", "training_log.jsonl"):
                assert read_bytes(os.path.join(a, name)) == read_bytes(os.path.join(b, name))

    def test_trains_from_track_file(self):
        """Test training from a track file."""
        with tempfile.TemporaryDirectory() as tmpdir:
            data = os.path.join(tmpdir, "tracks.csv")
            assert run("gen-data", tmpdir, "--paths.data", data) == 0
            assert run("train", os.path.join(tmpdir, "run"), "--paths.data", data) == 0

    def test_abort_keeps_partial_log(self, monkeypatch):
        """Test an aborted run keeps its partial log."""
        partial = [{"iteration": 1, "c_cl": 1.0, "c_rl": 0.5, "dirichlet_nll": -0.7, "epsilon": 0.9, "lr": 0.1}]

        def aborting_train(*args, **kwargs):
            raise TrainingAbortedError("non-finite cost at iteration 2", 2, partial)

        monkeypatch.setattr(cli, "train", aborting_train)
        with tempfile.TemporaryDirectory() as tmpdir:
            assert run("train", tmpdir) == cli.EXIT_FAILURE
            assert [json.loads(line) for line in read_lines(os.path.join(tmpdir, "training_log.jsonl"))] == partial
            assert not os.path.exists(os.path.join(tmpdir, "checkpoint.json"))


class TestEval:
    """Tests for the eval and export-policy commands."""

    def test_eval_after_train(self):
        """Test eval after train."""
        with tempfile.TemporaryDirectory() as tmpdir:
            assert run("train", tmpdir) == 0
            assert run("eval", tmpdir) == 0
            with open(os.path.join(tmpdir, "report.json")) as f:
                report = json.load(f)
            names = [row["name"] for row in report["table"]["rows"]]
            assert names == ["dirichlet/random", "dirichlet/learned"]
            assert report["table"]["seeds"] == [0, 1]
            first = read_bytes(os.path.join(tmpdir, "accuracy.csv"))
            assert run("eval", tmpdir) == 0
            assert read_bytes(os.path.join(tmpdir, "accuracy.csv")) == first
            assert os.path.exists(os.path.join(tmpdir, "report.md"))
            assert os.path.exists(os.path.join(tmpdir, "accuracy_per_seed.csv"))

    def test_missing_checkpoint(self):
        """Test a missing checkpoint fails."""
        with tempfile.TemporaryDirectory() as tmpdir:
            assert run("eval", tmpdir) == cli.EXIT_FAILURE
            assert not os.path.exists(os.path.join(tmpdir, "report.json"))

    def test_random_policy_without_action_head(self):
        """Test the random policy without an action head."""
        with tempfile.TemporaryDirectory() as tmpdir:
            assert run("train", tmpdir) == 0
            classifier = os.path.join(tmpdir, "classifier.json")
            NetworkParams.load(os.path.join(tmpdir, "checkpoint.json")).save(classifier, include_q_head=False)
            out = os.path.join(tmpdir, "eval")
            table = os.path.join(tmpdir, "dirichlet_table.json")
            common = ["--paths.checkpoint", classifier, "--paths.table", table]
            assert run("eval", out, *common, "--eval.policies", "random") == 0
            assert run("eval", out, *common, "--eval.policies", "learned") == cli.EXIT_FAILURE

    def test_grid(self):
        """Test the six-row grid evaluation."""
        with tempfile.TemporaryDirectory() as tmpdir:
            assert run("eval", tmpdir, "--eval.grid", "true", "--train.num_iterations", "4") == 0
            with open(os.path.join(tmpdir, "report.json")) as f:
                report = json.load(f)
            assert len(report["table"]["rows"]) == 6
            assert len(report["pairs"]) == 15

    def test_export_policy(self):
        """Test exporting the policy."""
        with tempfile.TemporaryDirectory() as tmpdir:
            assert run("train", tmpdir) == 0
            assert run("export-policy", tmpdir) == 0
            for split in ("train", "test"):
                assert os.path.exists(os.path.join(tmpdir, f"policy_{split}.csv"))
                with open(os.path.join(tmpdir, f"policy_{split}.dot")) as f:
                    assert f.read().startswith("digraph")
            with open(os.path.join(tmpdir, "policy_stats.json")) as f:
                stats = json.load(f)
            for split in ("train", "test"):
                episodes = stats[split]["num_episodes"]
                # 3 objects x 1 track x 1 episode x 2 seeds per split
                assert episodes == 6
                for matrix in stats[split]["counts"]:
                    assert sum(map(sum, matrix)) == episodes


class TestConfig:
    """Tests for configuration precedence."""

    def parse(self, *argv):
        return cli.build_parser().parse_args(["train", *argv])

    def test_defaults(self):
        """Test default settings."""
        config = resolve_config(self.parse(), environ={})
        assert config.train.num_iterations == 4000
        assert config.train.lr_decay_points == [400, 800, 1200, 1500]
        assert config.output_dir == "runs/latest"
        assert config.train.seed == config.seed == 0

    def test_precedence(self):
        """Test flags override environment and file."""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, "config.json")
            with open(path, 'w') as f:
                json.dump({"train": {"num_iterations": 7, "gamma": 0.8}, "paths.output": "from-file",
                           "seed": 4}, f)

            config = resolve_config(self.parse("--config", path), environ={})
            assert (config.train.num_iterations, config.train.gamma, config.output_dir) == (7, 0.8, "from-file")
            assert config.train.seed == 4

            config = resolve_config(self.parse("--config", path), environ={"AOR_OUTPUT": "from-env"})
            assert config.output_dir == "from-env"

            config = resolve_config(self.parse("--config", path, "--train.num_iterations", "5", "--out", "flag"),
                                    environ={"AOR_OUTPUT": "from-env"})
            assert (config.train.num_iterations, config.train.gamma, config.output_dir) == (5, 0.8, "flag")

    def test_list_and_bool_flags(self):
        """Test list and boolean flags."""
        config = resolve_config(self.parse("--train.lr_decay_points", "10", "20", "--train.mask_repeats", "yes",
                                           "--env.ambiguity_profile", "half"), environ={})
        assert config.train.lr_decay_points == [10, 20]
        assert config.train.mask_repeats is True
        assert config.env.ambiguity_profile == "half"

    def test_unknown_key_in_file(self):
        """Test an unknown key in the config file is rejected."""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, "config.json")
            with open(path, 'w') as f:
                json.dump({"train": {"num_iteratons": 7}}, f)
            assert cli.main(["train", "--config", path, "--out", tmpdir]) == cli.EXIT_USAGE

    def test_invalid_value_is_usage_error(self):
        """Test an invalid value is a usage error."""
        with tempfile.TemporaryDirectory() as tmpdir:
            assert cli.main(["train", "--train.gamma", "1.5", "--out", tmpdir]) == cli.EXIT_USAGE

    def test_unknown_flag(self):
        """Test an unknown flag exits with usage status."""
        with pytest.raises(SystemExit) as info:
            cli.main(["train", "--train.nope", "1"])
        assert info.value.code == 2

    def test_overrides(self):
        """Test dotted overrides."""
        config = apply_overrides(RunConfig(), {"train.num_iterations": 3, "threads": 2})
        assert config.train.num_iterations == 3
        assert config.threads == 2
        with pytest.raises(ValueError):
            apply_overrides(RunConfig(), {"train.seed": 3})
        assert "train.seed" not in known_keys()
        assert "seed" in known_keys()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
