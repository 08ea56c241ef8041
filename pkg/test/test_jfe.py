import os
from pathlib import Path

import numpy as np
import pytest

from sparse_aqa import jfe
from sparse_aqa.config import (
    AdjacencyGraph,
    ChannelPlan,
    ClipBatch,
    FeatureLayout,
)
from sparse_aqa.exceptions import ConfigurationError, DimensionError, FormatError
from sparse_aqa.loader import write_features
from sparse_aqa.tensor import Tensor


def _identity_graph(graph: AdjacencyGraph) -> AdjacencyGraph:
    return graph._replace(a_norm=np.eye(25))


def test_spatial_conv_identity_propagation(graph: AdjacencyGraph, rng: np.random.Generator) -> None:
    x = rng.normal(size=(3, 25, 4))
    p = jfe.GcnParams(weight=Tensor(np.eye(4)), gate=Tensor(0.0))
    out = jfe.spatial_graph_conv(Tensor(x), _identity_graph(graph), p)
    np.testing.assert_array_equal(out.data, np.maximum(x, 0.0))


def test_spatial_conv_zero_input(graph: AdjacencyGraph, rng: np.random.Generator) -> None:
    p = jfe.GcnParams(weight=Tensor(rng.normal(size=(2, 5))), gate=Tensor(0.3))
    out = jfe.spatial_graph_conv(Tensor(np.zeros((4, 25, 2))), graph, p)
    assert out.shape == (4, 25, 5)
    assert np.all(out.data == 0.0)


def test_spatial_conv_dense_oracle(graph: AdjacencyGraph, rng: np.random.Generator) -> None:
    x = rng.normal(size=(2, 3, 25, 2))
    w = rng.normal(size=(2, 6))
    gate = 0.4
    out = jfe.spatial_graph_conv(Tensor(x), graph, jfe.GcnParams(Tensor(w), Tensor(gate)))

    propagation = graph.a_norm + gate * np.eye(25)
    expected = np.zeros((2, 3, 25, 6))
    for c in range(2):
        for t in range(3):
            expected[c, t] = np.maximum(propagation @ (x[c, t] @ w), 0.0)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_spatial_conv_shape_errors(graph: AdjacencyGraph) -> None:
    p = jfe.GcnParams(Tensor(np.ones((2, 3))), Tensor(0.0))
    with pytest.raises(DimensionError):
        jfe.spatial_graph_conv(Tensor(np.ones((4, 24, 2))), graph, p)
    with pytest.raises(DimensionError):
        jfe.spatial_graph_conv(Tensor(np.ones((4, 25, 3))), graph, p)


def test_temporal_conv_identity_kernels(rng: np.random.Generator) -> None:
    x = rng.normal(size=(6, 25, 3))
    delta = np.zeros((3, 5))
    delta[:, 2] = 1.0
    p = jfe.SepTemporalParams(Tensor(delta), Tensor(np.eye(3)))
    np.testing.assert_array_equal(jfe.separable_temporal_conv(Tensor(x), p).data, np.maximum(x, 0.0))


def test_temporal_conv_averaging_kernel_keeps_interior() -> None:
    x = np.ones((7, 25, 2))
    p = jfe.SepTemporalParams(Tensor(np.full((2, 3), 1.0 / 3)), Tensor(np.eye(2)))
    out = jfe.separable_temporal_conv(Tensor(x), p).data
    np.testing.assert_allclose(out[1:-1], 1.0, atol=1e-15)
    np.testing.assert_allclose(out[[0, -1]], 2.0 / 3, atol=1e-15)


def test_temporal_conv_sliding_window_oracle(rng: np.random.Generator) -> None:
    x = rng.normal(size=(2, 9, 25, 3))
    depthwise = rng.normal(size=(3, 3))
    pointwise = rng.normal(size=(3, 4))
    out = jfe.separable_temporal_conv(
        Tensor(x), jfe.SepTemporalParams(Tensor(depthwise), Tensor(pointwise)), stride=2
    ).data

    padded = np.concatenate([np.zeros((2, 1, 25, 3)), x, np.zeros((2, 1, 25, 3))], axis=1)
    expected = np.zeros((2, 5, 25, 4))
    for t in range(5):
        window = padded[:, 2 * t : 2 * t + 3]
        h = np.einsum("cwjd,dw->cjd", window, depthwise)
        expected[:, t] = np.maximum(h @ pointwise, 0.0)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_temporal_conv_kernel_longer_than_clip() -> None:
    p = jfe.SepTemporalParams(Tensor(np.ones((2, 9))), Tensor(np.eye(2)))
    with pytest.raises(ConfigurationError):
        jfe.separable_temporal_conv(Tensor(np.ones((4, 25, 2))), p)


def test_jfe_forward_shapes(graph: AdjacencyGraph, rng: np.random.Generator) -> None:
    params = jfe.init_jfe_params(rng, ChannelPlan())
    batch = ClipBatch(Tensor(rng.normal(size=(7, 16, 25, 2))))
    out = jfe.jfe_forward(batch, params, graph)
    assert out.features.shape == (1400, 64)
    assert out.layout == FeatureLayout(7, 8, 25)


def test_jfe_forward_zero_input(rng: np.random.Generator) -> None:
    params = jfe.init_jfe_params(rng, ChannelPlan(spatial=4, temporal1=4, temporal2=6, kernel=3))
    out = jfe.jfe_forward(ClipBatch(Tensor(np.zeros((7, 8, 25, 2)))), params)
    assert np.all(out.features.data == 0.0)


def test_jfe_forward_is_deterministic(graph: AdjacencyGraph) -> None:
    plan = ChannelPlan(spatial=4, temporal1=4, temporal2=6, kernel=3)
    x = np.random.Generator(np.random.PCG64(5)).normal(size=(7, 8, 25, 2))
    runs = [
        jfe.jfe_forward(
            ClipBatch(Tensor(x)), jfe.init_jfe_params(np.random.Generator(np.random.PCG64(9)), plan), graph
        )
        for _ in range(2)
    ]
    assert runs[0].features.data.tobytes() == runs[1].features.data.tobytes()


def test_jfe_forward_rejects_clip_count(rng: np.random.Generator) -> None:
    params = jfe.init_jfe_params(rng, ChannelPlan(kernel=3))
    with pytest.raises(DimensionError):
        jfe.jfe_forward(ClipBatch(Tensor(np.zeros((6, 8, 25, 2)))), params)


def test_load_appearance_features(tmp_path: Path, rng: np.random.Generator) -> None:
    data = rng.normal(size=(7, 4, 64)).astype(np.float32)
    path = os.path.join(tmp_path, "s.feat")
    write_features(path, data)

    out = jfe.load_appearance_features(path, FeatureLayout(7, 4, 1))
    assert out.features.shape == (28, 64)
    assert out.layout == FeatureLayout(7, 4, 1)
    np.testing.assert_array_equal(out.features.data, data.reshape(28, 64))


def test_load_appearance_features_errors(tmp_path: Path) -> None:
    path = os.path.join(tmp_path, "s.feat")
    write_features(path, np.ones((6, 4, 8)))
    with pytest.raises(FormatError):
        jfe.load_appearance_features(path, FeatureLayout(7, 4, 1))
    with pytest.raises(OSError):
        jfe.load_appearance_features(os.path.join(tmp_path, "missing.feat"), FeatureLayout(7, 4, 1))
