"""Assembly of the full scoring network.

A sample is either a `ClipBatch` of skeleton clips (joint stream) or a
precomputed appearance `FeatureMatrix` (appearance stream). Parameters live in
nested NamedTuples; `flatten_params` names every tensor with a dotted path so
the optimizer, the checkpoint and the gradient audit can address it.
"""

from typing import Any, Callable, NamedTuple, Optional, Union

import numpy as np

from .attention import AttentionParams, MaskTape, distill, init_attention_params
from .config import (
    APPEARANCE_STEPS,
    NUM_CLIPS,
    NUM_JOINTS,
    AdjacencyGraph,
    Array,
    ClipBatch,
    FeatureLayout,
    FeatureMatrix,
    RunConfig,
    SampleLabel,
)
from .exceptions import CheckpointError, ConfigurationError
from .heads import MlpParams, Prediction, init_mlp_params, mlp_forward, total_loss
from .jfe import JfeParams, init_jfe_params, jfe_forward
from .tensor import Tensor


Sample = Union[ClipBatch, FeatureMatrix]


class ModelParams(NamedTuple):
    jfe: Optional[JfeParams]
    attention: AttentionParams
    mlp: MlpParams


def feature_channels(cfg: RunConfig, appearance_channels: Optional[int] = None) -> int:
    if cfg.stream == "joint":
        return cfg.channels[2]
    if appearance_channels is None:
        raise ConfigurationError("the appearance stream needs the feature width")
    return appearance_channels


def init_model_params(
    cfg: RunConfig, rng: np.random.Generator, appearance_channels: Optional[int] = None
) -> ModelParams:
    """Draw initial parameters for the configured stream and mode."""
    channels = feature_channels(cfg, appearance_channels)
    jfe = init_jfe_params(rng, cfg.channel_plan) if cfg.stream == "joint" else None
    attention = init_attention_params(rng, cfg.mode, channels, cfg.quantile)
    mlp = init_mlp_params(rng, channels * (cfg.vfd_out_len + 1), cfg.hidden)
    return ModelParams(jfe, attention, mlp)


def _walk(node: Any, prefix: str, out: dict[str, Tensor]) -> None:
    if isinstance(node, Tensor):
        out[prefix] = node
    elif isinstance(node, tuple) and hasattr(node, "_fields"):
        for field in node._fields:
            child = getattr(node, field)
            if child is not None:
                _walk(child, f"{prefix}.{field}" if prefix else field, out)


def flatten_params(params: ModelParams) -> dict[str, Tensor]:
    """Every parameter tensor keyed by its dotted path, in field order."""
    out: dict[str, Tensor] = {}
    _walk(params, "", out)
    return out


def _rebuild(node: Any, prefix: str, leaf: Callable[[str], Tensor]) -> Any:
    if isinstance(node, Tensor):
        return leaf(prefix)
    if isinstance(node, tuple) and hasattr(node, "_fields"):
        values = {}
        for field in node._fields:
            child = getattr(node, field)
            path = f"{prefix}.{field}" if prefix else field
            values[field] = (
                None if child is None else _rebuild(child, path, leaf)
            )
        return node._replace(**values)
    return node


def rebuild_params(
    template: ModelParams, arrays: dict[str, Array], requires_grad: bool = True
) -> ModelParams:
    """Replace every tensor of `template` by the array stored under its path.

    Raises:
        CheckpointError: if names or shapes differ from the template.
    """
    expected = {name: t.shape for name, t in flatten_params(template).items()}
    found = {name: tuple(arr.shape) for name, arr in arrays.items()}
    if expected != found:
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        reshaped = sorted(
            name for name in set(expected) & set(found) if expected[name] != found[name]
        )
        raise CheckpointError(
            f"parameter layout mismatch: missing {missing}, unexpected {extra}, "
            f"shape changes {reshaped}"
        )

    rebuilt: ModelParams = _rebuild(
        template, "", lambda path: Tensor(arrays[path], requires_grad=requires_grad)
    )
    return rebuilt


def assign_params(template: ModelParams, tensors: dict[str, Tensor]) -> ModelParams:
    """Place the given tensors, unchanged, at their paths in `template`."""
    assigned: ModelParams = _rebuild(template, "", lambda path: tensors[path])
    return assigned


def params_to_arrays(params: ModelParams) -> dict[str, Array]:
    return {name: t.numpy() for name, t in flatten_params(params).items()}


def freeze(params: ModelParams) -> ModelParams:
    """Copy of `params` that records no computation graph."""
    return rebuild_params(params, params_to_arrays(params), requires_grad=False)


def encode(
    params: ModelParams, sample: Sample, graph: Optional[AdjacencyGraph] = None
) -> FeatureMatrix:
    if isinstance(sample, ClipBatch):
        if params.jfe is None:
            raise ConfigurationError("skeleton clips need joint encoder parameters")
        return jfe_forward(sample, params.jfe, graph)
    return sample


def forward_sample(
    params: ModelParams,
    sample: Sample,
    cfg: RunConfig,
    graph: Optional[AdjacencyGraph] = None,
    tape: Optional[MaskTape] = None,
) -> Prediction:
    features = encode(params, sample, graph)
    sparse = distill(features, cfg.mode, params.attention, cfg.vfd, tape)
    return mlp_forward(sparse, params.mlp)


def sample_loss(
    params: ModelParams,
    sample: Sample,
    label: SampleLabel,
    cfg: RunConfig,
    graph: Optional[AdjacencyGraph] = None,
    tape: Optional[MaskTape] = None,
) -> Tensor:
    pred = forward_sample(params, sample, cfg, graph, tape)
    return total_loss(pred, label, cfg.loss_weights)


def random_sample(
    cfg: RunConfig,
    rng: np.random.Generator,
    clip_len: int,
    appearance_channels: Optional[int] = None,
) -> Sample:
    """Gaussian input of the configured stream, for audits and smoke tests."""
    if cfg.stream == "joint":
        shape = (NUM_CLIPS, clip_len, NUM_JOINTS, cfg.channel_plan.in_channels)
        return ClipBatch(Tensor(rng.normal(size=shape)))

    channels = feature_channels(cfg, appearance_channels)
    layout = FeatureLayout(NUM_CLIPS, APPEARANCE_STEPS, 1)
    data = rng.normal(size=(layout.positions, channels))
    return FeatureMatrix(Tensor(data), layout)
