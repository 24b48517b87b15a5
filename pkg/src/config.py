"""
Run Configuration

Every command reads one RunConfig assembled from, in increasing
precedence: field defaults, a JSON config file (nested sections or flat
dotted keys), the AOR_OUTPUT environment variable and command-line
flags. The resolved config is echoed as `config.json` in the output
directory.
"""

import argparse
import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Union

from src import env
from src.agent import TrainConfig
from src.evaluation import EvalConfig
from src.net import NetworkSpec
from src.storage import write_json

OUTPUT_ENV_VAR = "AOR_OUTPUT"
CONFIG_FILENAME = "config.json"

# Fields owned by the top level rather than their section.
_TOP_LEVEL_OWNED = {("train", "seed")}


@dataclass
class EnvConfig:
    """Synthetic data, action geometry and the train/test track split."""
    num_classes: int = 8
    num_bins: int = env.DEFAULT_NUM_BINS
    feature_dim: int = 8
    num_tracks: int = 6
    ambiguity_profile: Union[str, List[Dict[str, Any]]] = "paired"
    noise_sigma: float = 0.3
    prototype_scale: float = 1.0
    pose_scale: float = 0.5
    boundary: str = env.BoundaryMode.CLAMP.value
    train_tracks: List[int] = field(default_factory=lambda: [0, 1, 2])

    def __post_init__(self):
        self.boundary = env.BoundaryMode(self.boundary).value
        self.train_tracks = [int(t) for t in self.train_tracks]

    def synthetic(self) -> env.SyntheticConfig:
        return env.SyntheticConfig(
            num_classes=self.num_classes,
            num_bins=self.num_bins,
            feature_dim=self.feature_dim,
            num_tracks=self.num_tracks,
            ambiguity_profile=self.ambiguity_profile,
            noise_sigma=self.noise_sigma,
            prototype_scale=self.prototype_scale,
            pose_scale=self.pose_scale
        )

    def action_set(self, num_bins: Optional[int] = None) -> env.ActionSet:
        return env.ActionSet.standard(num_bins or self.num_bins, self.boundary)


@dataclass
class NetworkConfig:
    """Layer widths; input, class and action widths come from the data and action set."""
    hidden_dims: List[int] = field(default_factory=lambda: [32])
    feature_dim: int = 16
    q_hidden_dims: List[int] = field(default_factory=lambda: [32])
    state_block: str = "features"
    dropout: float = 0.0

    def spec(self, input_dim: int, num_classes: int, num_actions: int) -> NetworkSpec:
        return NetworkSpec(
            input_dim=input_dim,
            hidden_dims=list(self.hidden_dims),
            num_classes=num_classes,
            num_actions=num_actions,
            feature_dim=self.feature_dim,
            q_hidden_dims=list(self.q_hidden_dims),
            state_block=self.state_block,
            dropout=self.dropout
        )


@dataclass
class PathsConfig:
    """
    Inputs and outputs.

    `data` is a single track file split by `env.train_tracks`;
    `train_data`/`test_data` name pre-split files. With none of them set,
    commands generate synthetic tracks from the `env` section and the seed.
    """
    data: str = ""
    train_data: str = ""
    test_data: str = ""
    checkpoint: str = ""
    table: str = ""
    output: str = "runs/latest"


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        self.train.seed = self.seed

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["train"].pop("seed", None)
        return data

    @property
    def output_dir(self) -> str:
        return self.paths.output

    def output_path(self, name: str) -> str:
        return os.path.join(self.paths.output, name)

    def checkpoint_path(self) -> str:
        return self.paths.checkpoint or self.output_path("checkpoint.json")

    def table_path(self) -> str:
        return self.paths.table or self.output_path("dirichlet_table.json")


SECTIONS = {
    "env": EnvConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}
TOP_LEVEL = ("seed", "threads")


def _flatten(data: Dict[str, Any]) -> Dict[str, Any]:
    """Nested sections become dotted keys; dotted keys pass through."""
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        if key in SECTIONS and isinstance(value, dict):
            for inner, inner_value in value.items():
                flat[f"{key}.{inner}"] = inner_value
        else:
            flat[key] = value
    return flat


def known_keys() -> List[str]:
    keys = list(TOP_LEVEL)
    for section, cls in SECTIONS.items():
        keys += [f"{section}.{f.name}" for f in fields(cls) if (section, f.name) not in _TOP_LEVEL_OWNED]
    return keys


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    Return a new config with dotted-key `overrides` applied and validated.

    Unknown keys are an error.
    """
    flat = _flatten(overrides)
    allowed = set(known_keys())
    unknown = sorted(k for k in flat if k not in allowed)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")

    data = config.to_dict()
    for key, value in flat.items():
        if "." in key:
            section, name = key.split(".", 1)
            data[section][name] = value
        else:
            data[key] = value
    return config_from_dict(data)


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    sections = {name: cls(**data.get(name, {})) for name, cls in SECTIONS.items()}
    return RunConfig(**sections, **{k: data[k] for k in TOP_LEVEL if k in data})


def load_config_file(path: str) -> Dict[str, Any]:
    with open(path, 'r') as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return data


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_profile(text: str) -> Union[str, List[Dict[str, Any]]]:
    return json.loads(text) if text.lstrip().startswith("[") else text


def _add_field_argument(parser: argparse.ArgumentParser, dest: str, hint: Any, default: Any) -> None:
    flag = f"--{dest}"
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    kwargs: Dict[str, Any] = {"dest": dest, "default": argparse.SUPPRESS, "help": f"(default: {default})"}
    if hint is bool:
        kwargs.update(type=_parse_bool, metavar="BOOL")
    elif hint in (int, float, str):
        kwargs.update(type=hint)
    elif origin is list and args and args[0] in (int, float, str):
        kwargs.update(type=args[0], nargs="*")
    elif origin is Union:
        kwargs.update(type=_parse_profile)
    else:
        kwargs.update(type=json.loads)
    parser.add_argument(flag, **kwargs)


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    """Universal flags plus one `--section.field` flag per config field."""
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Run seed (default: 0)")
    parser.add_argument("--out", dest="paths.output", default=argparse.SUPPRESS,
                        help="Output directory (default: $AOR_OUTPUT or runs/latest)")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="Evaluation worker cap (default: 1)")

    defaults = RunConfig()
    for section, cls in SECTIONS.items():
        group = parser.add_argument_group(f"{section} settings")
        hints = typing.get_type_hints(cls)
        section_defaults = getattr(defaults, section)
        for f in fields(cls):
            dest = f"{section}.{f.name}"
            if (section, f.name) in _TOP_LEVEL_OWNED or dest == "paths.output":
                continue
            _add_field_argument(group, dest, hints[f.name], getattr(section_defaults, f.name))


def resolve_config(args: argparse.Namespace, environ: Optional[Dict[str, str]] = None) -> RunConfig:
    """Defaults, then the config file, then AOR_OUTPUT, then flags."""
    environ = os.environ if environ is None else environ
    config = RunConfig()

    config_path = getattr(args, "config", None)
    if config_path:
        config = apply_overrides(config, load_config_file(config_path))

    if environ.get(OUTPUT_ENV_VAR):
        config = apply_overrides(config, {"paths.output": environ[OUTPUT_ENV_VAR]})

    allowed = set(known_keys())
    flags = {k: v for k, v in vars(args).items() if k in allowed}
    if flags:
        config = apply_overrides(config, flags)
    return config


def save_config(config: RunConfig, directory: Optional[str] = None) -> str:
    return write_json(os.path.join(directory or config.output_dir, CONFIG_FILENAME), config.to_dict())
