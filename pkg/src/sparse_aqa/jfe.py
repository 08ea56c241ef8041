"""Joint feature encoder.

A single spatial graph convolution over the BODY_25 skeleton followed by two
separable temporal convolutions, the second one with stride 2. The encoder
also has a file-backed counterpart for precomputed appearance features.
"""

import math
from typing import NamedTuple, Optional

import numpy as np

from .config import (
    NUM_CLIPS,
    NUM_JOINTS,
    AdjacencyGraph,
    ChannelPlan,
    ClipBatch,
    FeatureLayout,
    FeatureMatrix,
)
from .exceptions import DimensionError, FormatError
from .loader import read_features
from .skeleton import build_adjacency
from .tensor import (
    Tensor,
    add,
    depthwise_conv1d,
    matmul,
    mul,
    pointwise_conv,
    relu,
    reshape,
)
from .utils import _glorot, _uniform


class GcnParams(NamedTuple):
    weight: Tensor
    # Scalar self-loop gate added to the normalized adjacency, starts at 0.
    gate: Tensor


class SepTemporalParams(NamedTuple):
    depthwise: Tensor
    pointwise: Tensor


class JfeParams(NamedTuple):
    spatial: GcnParams
    temporal1: SepTemporalParams
    temporal2: SepTemporalParams


def init_jfe_params(rng: np.random.Generator, plan: ChannelPlan) -> JfeParams:
    bound = 1.0 / math.sqrt(plan.kernel)
    return JfeParams(
        spatial=GcnParams(
            weight=_glorot(rng, plan.in_channels, plan.spatial),
            gate=Tensor(0.0, requires_grad=True),
        ),
        temporal1=SepTemporalParams(
            depthwise=_uniform(rng, (plan.spatial, plan.kernel), bound),
            pointwise=_glorot(rng, plan.spatial, plan.temporal1),
        ),
        temporal2=SepTemporalParams(
            depthwise=_uniform(rng, (plan.temporal1, plan.kernel), bound),
            pointwise=_glorot(rng, plan.temporal1, plan.temporal2),
        ),
    )


def spatial_graph_conv(x: Tensor, graph: AdjacencyGraph, p: GcnParams) -> Tensor:
    """Propagate joint features along the skeleton, frame by frame.

    Computes relu((A_norm + g * I) X W) where A_norm is the normalized joint
    adjacency and g the learnable gate.

    Args:
        x: features of shape (..., 25, C_in); leading axes are frames (and clips).
        graph: joint graph supplying A_norm.
        p: weight (C_in, C_out) and gate.

    Returns:
        Tensor of shape (..., 25, C_out).

    Raises:
        DimensionError: if the joint or channel axes do not match.
    """
    joints = graph.a_norm.shape[0]
    if x.ndim < 2 or x.shape[-2] != joints:
        raise DimensionError(f"expected (..., {joints}, C) features, got {x.shape}")
    if x.shape[-1] != p.weight.shape[0]:
        raise DimensionError(
            f"input has {x.shape[-1]} channels, weight expects {p.weight.shape[0]}"
        )

    adjacency = add(Tensor(graph.a_norm), mul(p.gate, Tensor(np.eye(joints))))
    return relu(matmul(adjacency, pointwise_conv(x, p.weight)))


def separable_temporal_conv(x: Tensor, p: SepTemporalParams, stride: int = 1) -> Tensor:
    """Depthwise convolution along time, pointwise channel mixing, then relu.

    Args:
        x: features of shape (..., T, 25, C).
        p: depthwise kernel (C, k) with k odd and pointwise weight (C, C_out).
        stride: temporal stride of the depthwise stage.

    Returns:
        Tensor of shape (..., T', 25, C_out), T' = floor((T - 1) / stride) + 1.

    Raises:
        ConfigurationError: if k is even or longer than T.
    """
    h = depthwise_conv1d(x, p.depthwise, stride, axis=-3)
    return relu(pointwise_conv(h, p.pointwise))


def jfe_forward(
    batch: ClipBatch, params: JfeParams, graph: Optional[AdjacencyGraph] = None
) -> FeatureMatrix:
    """Encode the 7 clips of a sample into one feature matrix.

    All clips share the parameters and go through the encoder together; the
    output rows are ordered clip-major, then time, then joint.
    """
    clips = batch.clips
    if clips.ndim != 4 or clips.shape[0] != NUM_CLIPS or clips.shape[2] != NUM_JOINTS:
        raise DimensionError(
            f"expected a ({NUM_CLIPS}, T, {NUM_JOINTS}, C) clip batch, got {clips.shape}"
        )
    if graph is None:
        graph = build_adjacency()

    h = spatial_graph_conv(clips, graph, params.spatial)
    h = separable_temporal_conv(h, params.temporal1, stride=1)
    h = separable_temporal_conv(h, params.temporal2, stride=2)

    layout = FeatureLayout(h.shape[0], h.shape[1], h.shape[2])
    return FeatureMatrix(reshape(h, (layout.positions, h.shape[3])), layout)


def load_appearance_features(path: str, expected: FeatureLayout) -> FeatureMatrix:
    """Read precomputed per-clip appearance features.

    Args:
        path: `.feat` container holding (clips, steps, channels) values.
        expected: required clip and step counts; `joints` must be 1.

    Returns:
        The clip features concatenated along time, one row per (clip, step).

    Raises:
        FormatError: if the stored layout differs from `expected`.
        OSError: if the file cannot be read.
    """
    data = read_features(path)
    if data.shape[:2] != (expected.clips, expected.frames) or expected.joints != 1:
        raise FormatError(
            f"{path}: holds {data.shape[0]} clips x {data.shape[1]} steps, "
            f"expected {expected.clips} x {expected.frames}"
        )

    features = Tensor(data.reshape(expected.clips * expected.frames, data.shape[2]))
    return FeatureMatrix(features, FeatureLayout(expected.clips, expected.frames, 1))
