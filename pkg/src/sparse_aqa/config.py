import sys
from typing import Any, Mapping, NamedTuple, Optional

import numpy as np
import numpy.typing as npt

from .exceptions import ConfigurationError
from .tensor import Tensor


if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


Array = npt.NDArray[np.float64]

# OpenPose BODY_25 joint order.
JOINT_NAMES: list[str] = [
    "Nose",
    "Neck",
    "RShoulder",
    "RElbow",
    "RWrist",
    "LShoulder",
    "LElbow",
    "LWrist",
    "MidHip",
    "RHip",
    "RKnee",
    "RAnkle",
    "LHip",
    "LKnee",
    "LAnkle",
    "REye",
    "LEye",
    "REar",
    "LEar",
    "LBigToe",
    "LSmallToe",
    "LHeel",
    "RBigToe",
    "RSmallToe",
    "RHeel",
]

BODY25_EDGES: list[tuple[int, int]] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (1, 5),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (10, 11),
    (8, 12),
    (12, 13),
    (13, 14),
    (0, 15),
    (15, 17),
    (0, 16),
    (16, 18),
    (14, 19),
    (19, 20),
    (14, 21),
    (11, 22),
    (22, 23),
    (11, 24),
]

NUM_JOINTS: int = 25
NUM_CLIPS: int = 7
# Time steps per clip of generated appearance features.
APPEARANCE_STEPS: int = 4
KEYPOINT_VALUES: int = 3 * NUM_JOINTS

NECK: int = 1
MIDHIP: int = 8

# A frame needs at least this many joints with confidence > 0 to be kept;
# frames below NUM_JOINTS are repaired by K-hop interpolation.
MIN_VALID_JOINTS: int = 20
MAX_MISSING_JOINTS: int = NUM_JOINTS - MIN_VALID_JOINTS
INTERPOLATED_CONFIDENCE: float = 0.5

GENDERS: list[str] = ["female", "male"]
YEAR_RANGE: tuple[int, int] = (2008, 2021)

MODES: list[str] = [
    "vfd",
    "nla_emb",
    "nla_cat",
    "dnla_mu_emb",
    "dnla_mu_cat",
    "dnla_delta_emb",
]
STREAMS: list[str] = ["joint", "appearance"]

SEQUENCE_MAGIC: bytes = b"AQASEQ01"
FEATURE_MAGIC: bytes = b"AQAFEA01"
CHECKPOINT_MAGIC: bytes = b"AQACKP01"

METRICS_COLUMNS: list[str] = [
    "epoch",
    "train_loss",
    "train_spearman",
    "val_spearman",
    "train_gender_accuracy",
]
EVAL_KEYS: list[str] = ["gender_accuracy", "mae", "n_samples", "spearman"]
REPORT_COLUMNS: list[str] = [
    "sample_id",
    "status",
    "frames",
    "kept",
    "interpolated",
    "discarded",
    "no_skeleton",
    "multi_person",
]


class RawFrame(NamedTuple):
    """One pose detection: 25 rows of (x, y, confidence) in pixels.

    Undetected joints are encoded as (0, 0, 0).
    """

    joints: Array
    frame_index: int = 0


class SkeletonSequence(NamedTuple):
    frames: tuple[RawFrame, ...]
    sample_id: str = ""
    # One entry per frame, True when the frame has missing joints to repair.
    flagged: tuple[bool, ...] = ()


class FilterReport(NamedTuple):
    kept: int = 0
    flagged: int = 0
    discarded: int = 0
    no_skeleton: int = 0
    multi_person: int = 0
    repaired: int = 0
    demoted: int = 0


class AdjacencyGraph(NamedTuple):
    edges: list[tuple[int, int]]
    adjacency: Array
    a_norm: Array
    # Unweighted shortest-path length between every pair of joints.
    hops: Array


class SampleLabel(NamedTuple):
    total_score: float
    gender: str
    event: str = ""
    year: int = YEAR_RANGE[0]
    difficulty: Optional[float] = None
    sample_id: str = ""


class ClipBatch(NamedTuple):
    clips: Tensor
    label: Optional[SampleLabel] = None
    sample_id: str = ""


class FeatureLayout(NamedTuple):
    clips: int
    frames: int
    joints: int

    @property
    def positions(self) -> int:
        return self.clips * self.frames * self.joints


class FeatureMatrix(NamedTuple):
    """Features of one sample, rows ordered clip-major, then time, then joint."""

    features: Tensor
    layout: FeatureLayout


class ChannelPlan(NamedTuple):
    in_channels: int = 2
    spatial: int = 32
    temporal1: int = 32
    temporal2: int = 64
    kernel: int = 9


class VfdConfig(NamedTuple):
    kernel: int = 4
    stride: int = 2
    out_len: int = 8

    @property
    def grid(self) -> int:
        """Number of adaptive bins the position axis is pooled onto first."""
        return self.kernel + (self.out_len - 1) * self.stride


class LossWeights(NamedTuple):
    w: float = 1.0
    gender_weight: float = 0.1
    class_loss_enabled: bool = True


class SynthSpec(NamedTuple):
    n_samples: int = 16
    clip_len: int = 16
    # 0 means 8 clips worth of frames.
    n_frames: int = 0
    noise: float = 0.01
    energy_scale: float = 1.5
    gender_threshold: float = 0.5
    missing_rate: float = 0.05
    appearance_dim: int = 0
    seed: int = 0


class RunConfig(NamedTuple):
    seed: int
    mode: str = "dnla_delta_emb"
    stream: str = "joint"
    clip_len: int = 16
    use_confidence: bool = False
    channels: tuple[int, ...] = (32, 32, 64)
    temporal_kernel: int = 9
    vfd_kernel: int = 4
    vfd_stride: int = 2
    vfd_out_len: int = 8
    quantile: float = 0.25
    hidden: tuple[int, ...] = (64, 32)
    loss_w: float = 1.0
    gender_weight: float = 0.1
    class_loss: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 4
    val_fraction: float = 0.2
    data_dir: Optional[str] = None
    labels: Optional[str] = None
    features_dir: Optional[str] = None
    output_dir: Optional[str] = None
    workers: int = 1
    interpolate: bool = True
    gradcheck_samples: int = 6

    @property
    def channel_plan(self) -> ChannelPlan:
        return ChannelPlan(
            in_channels=3 if self.use_confidence else 2,
            spatial=self.channels[0],
            temporal1=self.channels[1],
            temporal2=self.channels[2],
            kernel=self.temporal_kernel,
        )

    @property
    def vfd(self) -> VfdConfig:
        return VfdConfig(self.vfd_kernel, self.vfd_stride, self.vfd_out_len)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_w, self.gender_weight, self.class_loss)


class AdamState(NamedTuple):
    step: int
    m: dict[str, Array]
    v: dict[str, Array]


class Checkpoint(NamedTuple):
    params: dict[str, Array]
    adam: AdamState
    config: RunConfig
    epoch: int
    # Min and max training score, used to denormalize predictions.
    score_range: tuple[float, float]


_PATH_FIELDS: set[str] = {"data_dir", "labels", "features_dir", "output_dir"}


def _coerce(name: str, value: Any, default: Any) -> Any:
    if name in _PATH_FIELDS:
        if value is None or isinstance(value, str):
            return value
    elif isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, tuple):
        if isinstance(value, (list, tuple)) and all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            return tuple(value)

    raise ConfigurationError(f"invalid value {value!r} for config key '{name}'")


def run_config_from_mapping(mapping: Mapping[str, Any]) -> RunConfig:
    """Build a validated `RunConfig` from a flat mapping.

    Args:
        mapping: key-value pairs named after `RunConfig` fields.

    Returns:
        The run configuration.

    Raises:
        ConfigurationError: on unknown keys, wrong value types, a missing seed
            or values outside their allowed range.
    """
    unknown = sorted(set(mapping) - set(RunConfig._fields))
    if len(unknown) > 0:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")

    if "seed" not in mapping:
        raise ConfigurationError("config key 'seed' is mandatory")

    seed = mapping["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {seed!r}")

    defaults = RunConfig(seed=0)._asdict()
    values = {
        name: _coerce(name, mapping[name], defaults[name])
        for name in mapping
        if name != "seed"
    }
    cfg = RunConfig(seed=seed, **values)
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    if cfg.mode not in MODES:
        raise ConfigurationError(
            f"unknown mode '{cfg.mode}', expected one of {', '.join(MODES)}"
        )
    if cfg.stream not in STREAMS:
        raise ConfigurationError(f"unknown stream '{cfg.stream}'")
    if len(cfg.channels) != 3 or min(cfg.channels) < 1:
        raise ConfigurationError("channels must list three positive sizes")
    if len(cfg.hidden) != 2 or min(cfg.hidden) < 1:
        raise ConfigurationError("hidden must list two positive sizes")
    if cfg.clip_len < 2:
        raise ConfigurationError("clip_len must be at least 2")
    if cfg.temporal_kernel < 1 or cfg.temporal_kernel % 2 == 0:
        raise ConfigurationError("temporal_kernel must be a positive odd number")
    if not 1 <= cfg.vfd_stride < cfg.vfd_kernel:
        raise ConfigurationError("vfd_stride must satisfy 1 <= stride < kernel")
    if cfg.vfd_out_len < 1:
        raise ConfigurationError("vfd_out_len must be positive")
    if not 0.0 <= cfg.quantile < 1.0:
        raise ConfigurationError("quantile must lie in [0, 1)")
    if cfg.loss_w < 0 or cfg.gender_weight < 0:
        raise ConfigurationError("loss weights must be non-negative")
    if cfg.batch_size < 1 or cfg.epochs < 0 or cfg.workers < 1:
        raise ConfigurationError("batch_size, workers must be positive, epochs >= 0")
    if not 0.0 <= cfg.val_fraction < 1.0:
        raise ConfigurationError("val_fraction must lie in [0, 1)")
    if cfg.gradcheck_samples < 1:
        raise ConfigurationError("gradcheck_samples must be positive")


def load_run_config(path: str) -> RunConfig:
    """Read a flat TOML run configuration.

    Args:
        path: path of the config document.

    Returns:
        The validated run configuration.
    """
    return run_config_from_mapping(_read_toml(path))


def load_synth_spec(path: Optional[str]) -> SynthSpec:
    if path is None:
        return SynthSpec()

    mapping = _read_toml(path)
    unknown = sorted(set(mapping) - set(SynthSpec._fields))
    if len(unknown) > 0:
        raise ConfigurationError(f"unknown synth keys: {', '.join(unknown)}")

    defaults = SynthSpec()._asdict()
    return SynthSpec(
        **{name: _coerce(name, value, defaults[name]) for name, value in mapping.items()}
    )


def _read_toml(path: str) -> dict[str, Any]:
    with open(path, "rb") as f:
        try:
            mapping = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"{path}: {e}") from e

    nested = [key for key, value in mapping.items() if isinstance(value, dict)]
    if len(nested) > 0:
        raise ConfigurationError(f"{path}: config must be flat, found tables {nested}")

    return mapping
