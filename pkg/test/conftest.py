import os
from typing import Callable

import numpy as np
import pytest

from sparse_aqa.config import AdjacencyGraph, RawFrame, RunConfig, SynthSpec
from sparse_aqa.main import cmd_preprocess, cmd_synth
from sparse_aqa.skeleton import build_adjacency
from sparse_aqa.synth import BASE_POSE
from sparse_aqa.tensor import Tensor, backward


@pytest.fixture(scope="function")
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture(scope="session")
def graph() -> AdjacencyGraph:
    return build_adjacency()


@pytest.fixture(scope="function")
def full_frame() -> RawFrame:
    """A standing pose with every joint detected."""
    joints = np.zeros((25, 3))
    joints[:, :2] = BASE_POSE + np.array([640.0, 360.0])
    joints[:, 2] = np.linspace(0.6, 0.95, 25)
    return RawFrame(joints, 0)


@pytest.fixture(scope="function")
def small_config() -> RunConfig:
    return RunConfig(
        seed=7,
        clip_len=8,
        channels=(4, 4, 6),
        temporal_kernel=3,
        vfd_out_len=4,
        hidden=(8, 4),
        gradcheck_samples=3,
    )


@pytest.fixture(scope="function")
def numeric_grad() -> Callable[[Callable[[Tensor], Tensor], np.ndarray], np.ndarray]:
    """Central finite differences of a scalar function of one tensor."""

    def _grad(fn: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
        grad = np.zeros_like(x)
        for i in range(x.size):
            plus = x.copy()
            plus.reshape(-1)[i] += h
            minus = x.copy()
            minus.reshape(-1)[i] -= h
            grad.reshape(-1)[i] = (fn(Tensor(plus)).item() - fn(Tensor(minus)).item()) / (2 * h)
        return grad

    return _grad


@pytest.fixture(scope="function")
def analytic_grad() -> Callable[[Callable[[Tensor], Tensor], np.ndarray], np.ndarray]:
    def _grad(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
        t = Tensor(x, requires_grad=True)
        return backward(fn(t), [t])[0]

    return _grad


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory: pytest.TempPathFactory) -> str:
    """A small synthetic corpus, preprocessed into `<root>/clean`."""
    root = str(tmp_path_factory.mktemp("corpus"))
    spec = SynthSpec(n_samples=10, clip_len=8, noise=0.01, missing_rate=0.1, appearance_dim=6, seed=3)
    cmd_synth(spec, root)
    cmd_preprocess(
        os.path.join(root, "poses"),
        os.path.join(root, "labels.csv"),
        os.path.join(root, "clean"),
    )
    return root
