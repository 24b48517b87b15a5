"""
Rotating-Gripper Environment

Discretized joint poses, relative-rotation actions, pose-indexed
observation tracks (synthetic or loaded from a track file) and the
correct-label reward.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from src.belief import BeliefLike, as_belief
from src.storage import atomic_write_text

DEFAULT_NUM_BINS = 128
ROTATION_MAGNITUDES = (math.pi / 4, math.pi / 8, math.pi / 16, math.pi / 32, math.pi / 64)

TrackKey = Tuple[int, int]


class BoundaryMode(str, Enum):
    """What happens when a rotation would leave the joint range."""
    CLAMP = "clamp"
    WRAP = "wrap"


def bin_width(num_bins: int) -> float:
    return 2 * math.pi / num_bins


def pose_to_radians(pose_bin: int, num_bins: int) -> float:
    """Joint angle of a pose bin; bin 0 sits at -pi."""
    return pose_bin * bin_width(num_bins) - math.pi


def radians_to_pose(angle: float, num_bins: int) -> int:
    return int(np.clip(round((angle + math.pi) / bin_width(num_bins)), 0, num_bins - 1))


@dataclass(frozen=True)
class ActionSet:
    """
    Relative rotations of the gripper, as signed pose-bin offsets.

    The standard set has ten actions: the five magnitudes pi/4 ... pi/64 in
    both directions, ordered from -pi/4 up to +pi/4.
    """

    offsets_bins: Tuple[int, ...]
    num_bins: int = DEFAULT_NUM_BINS
    boundary: BoundaryMode = BoundaryMode.CLAMP

    def __post_init__(self):
        offsets = tuple(int(o) for o in self.offsets_bins)
        if not offsets:
            raise ValueError("an action set needs at least one action")
        if self.num_bins < 2:
            raise ValueError("num_bins must be at least 2")
        if sorted(offsets) != sorted(-o for o in offsets) or 0 in offsets:
            raise ValueError(f"offsets must come in non-zero +/- pairs, got {offsets}")
        object.__setattr__(self, "offsets_bins", offsets)
        object.__setattr__(self, "boundary", BoundaryMode(self.boundary))

    @classmethod
    def standard(cls, num_bins: int = DEFAULT_NUM_BINS,
                 boundary: Union[BoundaryMode, str] = BoundaryMode.CLAMP) -> 'ActionSet':
        """
        The ten rotations mapped onto `num_bins` bins.

        At 128 bins every rotation is an exact integer offset
        (16, 8, 4, 2, 1); coarser grids round and never go below one bin.
        """
        width = bin_width(num_bins)
        magnitudes = [max(1, int(round(m / width))) for m in ROTATION_MAGNITUDES]
        offsets = [-m for m in magnitudes] + [m for m in reversed(magnitudes)]
        return cls(tuple(offsets), num_bins, BoundaryMode(boundary))

    @property
    def num_actions(self) -> int:
        return len(self.offsets_bins)

    @property
    def magnitudes_radians(self) -> Tuple[float, ...]:
        return tuple(o * bin_width(self.num_bins) for o in self.offsets_bins)

    def apply(self, pose_bin: int, action: int) -> int:
        """Pose reached by `action` from `pose_bin`."""
        if not (0 <= action < self.num_actions):
            raise ValueError(f"action {action} is outside [0, {self.num_actions})")
        target = pose_bin + self.offsets_bins[action]
        if self.boundary == BoundaryMode.WRAP:
            return target % self.num_bins
        return min(max(target, 0), self.num_bins - 1)

    def opposite(self, action: int) -> int:
        return self.offsets_bins.index(-self.offsets_bins[action])

    def label(self, action: int) -> str:
        """Readable rotation, e.g. '+pi/16'."""
        radians = self.magnitudes_radians[action]
        sign = "+" if radians > 0 else "-"
        return f"{sign}pi/{round(math.pi / abs(radians))}"


class TrackFormatError(ValueError):
    """A malformed track file; `line` is 1-based, 0 when not tied to a line."""

    def __init__(self, reason: str, line: int = 0):
        self.reason = reason
        self.line = line
        super().__init__(f"line {line}: {reason}" if line else reason)


@dataclass(eq=False)
class TrackDataset:
    """
    Pose-indexed observation tracks.

    `tracks[(object, track)]` maps a pose bin to the feature vector seen
    at that pose; the label of a track is its object id.
    """

    num_classes: int
    num_bins: int
    feature_dim: int
    tracks: Dict[TrackKey, Dict[int, np.ndarray]]
    split: str = "all"

    def __post_init__(self):
        if self.num_classes < 1 or self.num_bins < 1 or self.feature_dim < 1:
            raise ValueError("num_classes, num_bins and feature_dim must be positive")
        for (obj, track), poses in self.tracks.items():
            if not (0 <= obj < self.num_classes):
                raise ValueError(f"unknown class id {obj}")
            if not poses:
                raise ValueError(f"track ({obj}, {track}) has no observations")
            for pose, features in poses.items():
                if not (0 <= pose < self.num_bins):
                    raise ValueError(f"pose bin {pose} is outside [0, {self.num_bins})")
                if np.shape(features) != (self.feature_dim,):
                    raise ValueError(
                        f"track ({obj}, {track}) pose {pose} has {np.size(features)} features, "
                        f"expected {self.feature_dim}"
                    )

    @property
    def labels(self) -> Dict[TrackKey, int]:
        return {key: key[0] for key in self.tracks}

    def track_keys(self) -> List[TrackKey]:
        return sorted(self.tracks)

    def poses(self, key: TrackKey) -> List[int]:
        return sorted(self.tracks[key])

    @property
    def num_observations(self) -> int:
        return sum(len(p) for p in self.tracks.values())

    def observation(self, obj: int, track: int, pose_bin: int) -> np.ndarray:
        try:
            return self.tracks[(obj, track)][pose_bin]
        except KeyError:
            raise ValueError(f"no observation for object {obj}, track {track}, pose {pose_bin}") from None

    def nearest_pose(self, key: TrackKey, pose_bin: int) -> int:
        """Closest recorded pose of a track; ties go to the lower bin."""
        poses = self.tracks[key]
        if pose_bin in poses:
            return pose_bin
        return min(poses, key=lambda p: (abs(p - pose_bin), p))

    def subset(self, keys: Iterable[TrackKey], split: str) -> 'TrackDataset':
        return TrackDataset(self.num_classes, self.num_bins, self.feature_dim,
                            {k: self.tracks[k] for k in keys}, split)

    def equals(self, other: 'TrackDataset') -> bool:
        if (self.num_classes, self.num_bins, self.feature_dim) != \
                (other.num_classes, other.num_bins, other.feature_dim):
            return False
        if set(self.tracks) != set(other.tracks):
            return False
        for key, poses in self.tracks.items():
            other_poses = other.tracks[key]
            if set(poses) != set(other_poses):
                return False
            if any(not np.array_equal(poses[p], other_poses[p]) for p in poses):
                return False
        return True


def split_by_track(dataset: TrackDataset, train_tracks: Sequence[int]) -> Tuple[TrackDataset, TrackDataset]:
    """Split into (train, test) by track id, e.g. tracks 0-2 for training and 3-5 for testing."""
    train_ids = set(train_tracks)
    train_keys = [k for k in dataset.track_keys() if k[1] in train_ids]
    test_keys = [k for k in dataset.track_keys() if k[1] not in train_ids]
    return dataset.subset(train_keys, "train"), dataset.subset(test_keys, "test")


@dataclass(frozen=True)
class AmbiguityRegion:
    """Classes whose prototypes coincide on pose bins [start, stop)."""
    classes: Tuple[int, ...]
    start: int
    stop: int


@dataclass
class SyntheticConfig:
    """
    Parameters of the synthetic track generator.

    `ambiguity_profile` is a preset name (`none`, `half`, `paired`) or a
    list of regions `{"classes": [...], "start": int, "stop": int}`.
    """

    num_classes: int = 8
    num_bins: int = DEFAULT_NUM_BINS
    feature_dim: int = 8
    num_tracks: int = 6
    ambiguity_profile: Union[str, List[Dict[str, object]]] = "paired"
    noise_sigma: float = 0.3
    prototype_scale: float = 1.0
    pose_scale: float = 0.5


def resolve_ambiguity_profile(profile: Union[str, Sequence[Dict[str, object]]],
                              num_classes: int, num_bins: int) -> List[AmbiguityRegion]:
    """Expand a preset name or validate an explicit region list."""
    if isinstance(profile, str):
        if profile == "none":
            return []
        if profile == "half":
            return [AmbiguityRegion((0, 1), 0, num_bins // 2)]
        if profile == "paired":
            regions = []
            num_pairs = num_classes // 2
            window = max(1, num_bins // 4)
            for p in range(num_pairs):
                start = (p * num_bins) // num_pairs
                stop = min(start + window, num_bins)
                pair = (2 * p, 2 * p + 1)
                if start > 0:
                    regions.append(AmbiguityRegion(pair, 0, start))
                if stop < num_bins:
                    regions.append(AmbiguityRegion(pair, stop, num_bins))
            return regions
        raise ValueError(f"unknown ambiguity profile {profile!r}")

    regions = []
    for item in profile:
        classes = tuple(int(c) for c in item["classes"])
        start, stop = int(item["start"]), int(item["stop"])
        if len(classes) < 2 or any(not (0 <= c < num_classes) for c in classes):
            raise ValueError(f"ambiguity region needs two or more valid classes, got {classes}")
        if not (0 <= start < stop <= num_bins):
            raise ValueError(f"ambiguity region [{start}, {stop}) is outside [0, {num_bins})")
        regions.append(AmbiguityRegion(classes, start, stop))
    return regions


def _validate_synthetic(config: SyntheticConfig) -> None:
    if config.num_classes < 2:
        raise ValueError("synthetic data needs at least 2 classes")
    if config.num_bins < 8:
        raise ValueError("synthetic data needs at least 8 pose bins")
    if config.feature_dim < 1 or config.num_tracks < 1:
        raise ValueError("feature_dim and num_tracks must be positive")
    if config.noise_sigma < 0 or config.prototype_scale <= 0 or config.pose_scale < 0:
        raise ValueError("noise_sigma and pose_scale must be non-negative, prototype_scale positive")


def synthetic_prototypes(config: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Class/pose prototypes of shape (C, K, F).

    Each prototype is a class centre plus a smooth pose component shared
    by all classes; inside an ambiguity region the listed classes share
    the mean of their centres.
    """
    c, k, f = config.num_classes, config.num_bins, config.feature_dim
    centres = rng.normal(0.0, config.prototype_scale, size=(c, f))
    directions = rng.normal(0.0, config.pose_scale, size=(2, f))
    angles = 2 * np.pi * np.arange(k) / k
    pose_part = np.outer(np.cos(angles), directions[0]) + np.outer(np.sin(angles), directions[1])

    prototypes = centres[:, None, :] + pose_part[None, :, :]
    for region in resolve_ambiguity_profile(config.ambiguity_profile, c, k):
        shared = centres[list(region.classes)].mean(axis=0)
        for cls in region.classes:
            prototypes[cls, region.start:region.stop] = shared + pose_part[region.start:region.stop]
    return prototypes


def gen_synthetic(config: SyntheticConfig, seed: int) -> TrackDataset:
    """Generate noisy tracks around the prototypes; deterministic given `seed`."""
    _validate_synthetic(config)
    rng = np.random.default_rng(seed)
    prototypes = synthetic_prototypes(config, rng)

    tracks: Dict[TrackKey, Dict[int, np.ndarray]] = {}
    for obj in range(config.num_classes):
        for track in range(config.num_tracks):
            noise = rng.normal(0.0, 1.0, size=(config.num_bins, config.feature_dim))
            features = prototypes[obj] + config.noise_sigma * noise
            tracks[(obj, track)] = {pose: features[pose].copy() for pose in range(config.num_bins)}
    return TrackDataset(config.num_classes, config.num_bins, config.feature_dim, tracks)


def format_tracks(dataset: TrackDataset) -> str:
    """Track file text: header `C,K,feature_dim`, then `object,track,pose,f_1,...,f_d` records."""
    lines = [f"{dataset.num_classes},{dataset.num_bins},{dataset.feature_dim}"]
    for obj, track in dataset.track_keys():
        poses = dataset.tracks[(obj, track)]
        for pose in sorted(poses):
            values = ",".join(repr(float(v)) for v in poses[pose])
            lines.append(f"{obj},{track},{pose},{values}")
    return "\n".join(lines) + "\n"


def save_tracks(dataset: TrackDataset, path: str) -> str:
    return atomic_write_text(path, format_tracks(dataset))


def _parse_int(text: str, what: str, line: int) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise TrackFormatError(f"{what} {text.strip()!r} is not an integer", line) from None


def load_tracks(path: str, split: str = "all") -> TrackDataset:
    """Parse and validate a track file."""
    with open(path, 'r') as f:
        raw_lines = f.read().splitlines()

    numbered = [(i + 1, text) for i, text in enumerate(raw_lines) if text.strip()]
    if not numbered:
        raise TrackFormatError("no records")

    header_line, header = numbered[0]
    header_fields = header.split(",")
    if len(header_fields) != 3:
        raise TrackFormatError("header must be 'C,K,feature_dim'", header_line)
    num_classes = _parse_int(header_fields[0], "C", header_line)
    num_bins = _parse_int(header_fields[1], "K", header_line)
    feature_dim = _parse_int(header_fields[2], "feature_dim", header_line)
    if num_classes < 1 or num_bins < 1 or feature_dim < 1:
        raise TrackFormatError("header values must be positive", header_line)

    records = numbered[1:]
    if not records:
        raise TrackFormatError("no records")

    tracks: Dict[TrackKey, Dict[int, np.ndarray]] = {}
    for line, text in records:
        fields = text.split(",")
        if len(fields) != 3 + feature_dim:
            raise TrackFormatError(
                f"expected {feature_dim} features, found {len(fields) - 3}", line
            )
        obj = _parse_int(fields[0], "object_id", line)
        track = _parse_int(fields[1], "track_id", line)
        pose = _parse_int(fields[2], "pose_bin", line)
        if not (0 <= obj < num_classes):
            raise TrackFormatError(f"unknown class id {obj}", line)
        if not (0 <= pose < num_bins):
            raise TrackFormatError(f"pose bin {pose} is outside [0, {num_bins})", line)
        try:
            features = np.array([float(v) for v in fields[3:]])
        except ValueError:
            raise TrackFormatError("feature values must be real numbers", line) from None
        if not np.all(np.isfinite(features)):
            raise TrackFormatError("feature values must be finite", line)
        poses = tracks.setdefault((obj, track), {})
        if pose in poses:
            raise TrackFormatError(f"duplicate record for object {obj}, track {track}, pose {pose}", line)
        poses[pose] = features

    return TrackDataset(num_classes, num_bins, feature_dim, tracks, split)


@dataclass
class EpisodeState:
    """Position of one interaction sequence."""
    object: int
    track: int
    pose_bin: int
    visited_bins: Set[int] = field(default_factory=set)
    step: int = 0

    @property
    def key(self) -> TrackKey:
        return (self.object, self.track)

    def copy(self) -> 'EpisodeState':
        return EpisodeState(self.object, self.track, self.pose_bin, set(self.visited_bins), self.step)


def reset(dataset: TrackDataset, obj: int, track: int, initial_pose_bin: int) -> Tuple[EpisodeState, np.ndarray]:
    """Start a sequence at `initial_pose_bin` and return its first observation."""
    if (obj, track) not in dataset.tracks:
        raise ValueError(f"dataset has no track ({obj}, {track})")
    features = dataset.observation(obj, track, initial_pose_bin)
    state = EpisodeState(obj, track, initial_pose_bin, {initial_pose_bin}, 0)
    return state, features


def step(state: EpisodeState, action: int, actions: ActionSet,
         dataset: TrackDataset) -> Tuple[EpisodeState, np.ndarray]:
    """
    Rotate by `action` and observe.

    Tracks with gaps snap the reached pose to the nearest recorded bin.
    """
    target = actions.apply(state.pose_bin, action)
    pose = dataset.nearest_pose(state.key, target)
    new_state = EpisodeState(state.object, state.track, pose, state.visited_bins | {pose}, state.step + 1)
    return new_state, dataset.observation(state.object, state.track, pose)


def reward(belief: BeliefLike, true_label: int) -> float:
    """+1 when the belief's argmax (lowest index on ties) is the true label, else -1."""
    return 1.0 if as_belief(belief).argmax() == true_label else -1.0


def sample_initial_pose(dataset: TrackDataset, key: TrackKey, rng: np.random.Generator,
                        fixed_poses: Optional[Sequence[int]] = None, index: int = 0) -> int:
    """
    Initial pose of an episode.

    Uniform over the track's recorded bins, or the `index`-th entry of
    `fixed_poses` (cycled) snapped to the nearest recorded bin.
    """
    if fixed_poses:
        return dataset.nearest_pose(key, int(fixed_poses[index % len(fixed_poses)]))
    poses = dataset.poses(key)
    return poses[int(rng.integers(len(poses)))]
