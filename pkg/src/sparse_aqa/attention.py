"""Feature distillation: non-local attention blocks and the sparse mapping.

Every mode turns a feature matrix of any length N into a vector of fixed
length C * (out_len + 1). The attention modes first refine the features with a
non-local block:

- `nla_*`: non-local attention over all positions, with an embedded Gaussian
  (`emb`) or a concatenation (`cat`) pairwise function.
- `dnla_mu_*`: non-local attention plus a motion branch built from masked
  frame-to-frame differences of the g-embedding.
- `dnla_delta_emb`: attention factored into a head across the joints of each
  frame and a head across the frames of each joint.
"""

from typing import NamedTuple, Optional

import numpy as np

from .config import MODES, Array, FeatureLayout, FeatureMatrix, VfdConfig
from .exceptions import ConfigurationError, DimensionError
from .tensor import (
    Tensor,
    add,
    concat,
    global_max_pool,
    matmul,
    mean,
    mul,
    overlap_avg_pool,
    permute,
    quantile_mask,
    relu,
    reshape,
    softmax,
    temporal_difference,
)
from .utils import _glorot, _zeros


PAIRWISE_FUNCTIONS: list[str] = ["embedded_gaussian", "concat"]


class NlaParams(NamedTuple):
    theta: Tensor
    phi: Tensor
    g: Tensor
    out: Tensor
    pairwise: str = "embedded_gaussian"
    # (2 * C_e, 1) weights of the concatenation pairwise function.
    w_cat: Optional[Tensor] = None


class MotionBranchParams(NamedTuple):
    q: float
    weight: Tensor


class DeltaHeads(NamedTuple):
    spatial: NlaParams
    temporal: NlaParams


class AttentionParams(NamedTuple):
    nla: Optional[NlaParams] = None
    motion: Optional[MotionBranchParams] = None
    heads: Optional[DeltaHeads] = None


class MaskTape:
    """Records the quantile masks of a forward pass and replays them.

    The first pass after construction records; after `rewind` the same masks
    are returned in the same order, so repeated evaluations of a perturbed
    model keep the masking of the reference evaluation.
    """

    def __init__(self) -> None:
        self.masks: list[Tensor] = []
        self._cursor = 0

    def rewind(self) -> None:
        self._cursor = 0

    def mask(self, x: Tensor, q: float) -> Tensor:
        if self._cursor < len(self.masks):
            m = self.masks[self._cursor]
            if m.shape != x.shape:
                raise DimensionError(f"recorded mask {m.shape} does not fit {x.shape}")
        else:
            m = quantile_mask(x, q)
            self.masks.append(m)
        self._cursor += 1
        return m


def mode_pairwise(mode: str) -> str:
    if mode not in MODES:
        raise ConfigurationError(
            f"unknown mode '{mode}', expected one of {', '.join(MODES)}"
        )
    return "concat" if mode.endswith("_cat") else "embedded_gaussian"


def init_nla_params(rng: np.random.Generator, channels: int, pairwise: str) -> NlaParams:
    if pairwise not in PAIRWISE_FUNCTIONS:
        raise ConfigurationError(f"unknown pairwise function '{pairwise}'")
    embed = embedding_width(channels)
    return NlaParams(
        theta=_glorot(rng, channels, embed),
        phi=_glorot(rng, channels, embed),
        g=_glorot(rng, channels, embed),
        out=_zeros((embed, channels)),
        pairwise=pairwise,
        w_cat=_glorot(rng, 2 * embed, 1) if pairwise == "concat" else None,
    )


def init_attention_params(
    rng: np.random.Generator, mode: str, channels: int, q: float = 0.25
) -> AttentionParams:
    pairwise = mode_pairwise(mode)
    if mode == "vfd":
        return AttentionParams()
    if mode == "dnla_delta_emb":
        return AttentionParams(
            heads=DeltaHeads(
                spatial=init_nla_params(rng, channels, pairwise),
                temporal=init_nla_params(rng, channels, pairwise),
            )
        )

    nla = init_nla_params(rng, channels, pairwise)
    if mode.startswith("dnla_mu"):
        embed = nla.g.shape[1]
        motion = MotionBranchParams(q, _glorot(rng, embed, embed))
        return AttentionParams(nla=nla, motion=motion)
    return AttentionParams(nla=nla)


def _selector(embed: int, offset: int) -> Tensor:
    """Constant (C_e, 2 C_e) matrix picking one half of the concatenation weights."""
    s = np.zeros((embed, 2 * embed))
    s[np.arange(embed), offset + np.arange(embed)] = 1.0
    return Tensor(s)


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return permute(x, axes)


def nla_attention(x: Tensor, p: NlaParams) -> Tensor:
    """Pairwise attention weights of a non-local block.

    Args:
        x: features of shape (..., N, C).
        p: block parameters.

    Returns:
        Weights of shape (..., N, N); row i holds f(x_i, x_j) / C(x).
    """
    if x.ndim < 2 or x.shape[-1] != p.theta.shape[0]:
        raise DimensionError(
            f"features {x.shape} do not match embedding {p.theta.shape}"
        )

    theta = matmul(x, p.theta)
    phi = matmul(x, p.phi)
    if p.pairwise == "embedded_gaussian":
        return softmax(matmul(theta, _swap_last(phi)), axis=-1)

    if p.w_cat is None:
        raise ConfigurationError("the concatenation pairwise function needs w_cat")
    embed = p.theta.shape[1]
    w_theta = matmul(_selector(embed, 0), p.w_cat)
    w_phi = matmul(_selector(embed, embed), p.w_cat)
    # f(x_i, x_j) = relu(w_theta . theta_i + w_phi . phi_j), normalized by N.
    pair = add(matmul(theta, w_theta), _swap_last(matmul(phi, w_phi)))
    return mul(relu(pair), Tensor(1.0 / x.shape[-2]))


def _nla_delta(x: Tensor, p: NlaParams) -> Tensor:
    """W_out projection of the attended g-embedding, without the residual."""
    y = matmul(nla_attention(x, p), matmul(x, p.g))
    return matmul(y, p.out)


def nla_block(x: Tensor, p: NlaParams) -> Tensor:
    return add(_nla_delta(x, p), x)


def nla_forward(x: FeatureMatrix, p: NlaParams) -> FeatureMatrix:
    """Non-local attention over all positions with a residual connection.

    Returns:
        z = W_out * y + x with y_i = sum_j f(x_i, x_j) g(x_j) / C(x).
    """
    return x._replace(features=nla_block(x.features, p))


def _as_grid(x: FeatureMatrix, channels: int) -> Tensor:
    layout = x.layout
    if x.features.shape[0] != layout.positions:
        raise DimensionError(
            f"{x.features.shape[0]} positions do not fit layout {tuple(layout)}"
        )
    return reshape(x.features, (layout.clips, layout.frames, layout.joints, channels))


def dnla_mu_forward(
    x: FeatureMatrix,
    p: NlaParams,
    m: MotionBranchParams,
    layout: Optional[FeatureLayout] = None,
    tape: Optional[MaskTape] = None,
) -> FeatureMatrix:
    """Non-local attention with a masked-motion branch fused by addition.

    The g-embedding is differenced between consecutive frames of each clip,
    values below the q-quantile are switched off, the rest is encoded by a
    relu layer and averaged over time. The resulting per (clip, joint) vector
    is projected by W_out and added to every frame of the non-local output.

    Raises:
        DegenerateSequenceError: if the layout has a single frame.
    """
    if layout is not None:
        x = x._replace(layout=layout)
    channels = x.features.shape[1]
    main = _as_grid(nla_forward(x, p), channels)

    embed = p.g.shape[1]
    g = _as_grid(FeatureMatrix(matmul(x.features, p.g), x.layout), embed)
    motion = temporal_difference(g, axis=1)
    mask = tape.mask(motion, m.q) if tape is not None else quantile_mask(motion, m.q)
    branch = relu(matmul(mul(motion, mask), m.weight))
    pooled = matmul(mean(branch, axis=1, keepdims=True), p.out)

    fused = add(main, pooled)
    return x._replace(features=reshape(fused, x.features.shape))


def dnla_delta_forward(
    x: FeatureMatrix, h: DeltaHeads, layout: Optional[FeatureLayout] = None
) -> FeatureMatrix:
    """Attention factored into a spatial head and a temporal head.

    The spatial head attends across the joints of each frame, the temporal
    head across the frames of each joint within a clip. Both deltas are added
    to the input.
    """
    if layout is not None:
        x = x._replace(layout=layout)
    channels = x.features.shape[1]
    grid = _as_grid(x, channels)

    spatial = _nla_delta(grid, h.spatial)
    by_joint = permute(grid, (0, 2, 1, 3))
    temporal = permute(_nla_delta(by_joint, h.temporal), (0, 2, 1, 3))

    out = add(add(grid, spatial), temporal)
    return x._replace(features=reshape(out, x.features.shape))


def _adaptive_pool_matrix(n: int, bins: int) -> Array:
    """Averaging matrix mapping n positions onto `bins` possibly overlapping bins."""
    pool = np.zeros((bins, n))
    for i in range(bins):
        start = (i * n) // bins
        end = -((-(i + 1) * n) // bins)
        pool[i, start:end] = 1.0 / (end - start)
    return pool


def vfd_forward(x: FeatureMatrix, cfg: VfdConfig) -> Tensor:
    """Vanilla feature distillation.

    Positions are average-pooled onto a fixed grid, pooled again by
    overlapping windows down to `cfg.out_len` rows, and a global max row is
    appended.

    Args:
        x: feature matrix of N positions and C channels.
        cfg: pooling kernel, stride and output length.

    Returns:
        A vector of C * (out_len + 1) values, row-major over the pooled rows
        followed by the max row.

    Raises:
        ConfigurationError: if N is shorter than the pooling kernel.
    """
    features = x.features
    if features.ndim != 2:
        raise DimensionError(f"expected a feature matrix, got {features.shape}")
    n, channels = features.shape
    if n < cfg.kernel:
        raise ConfigurationError(
            f"{n} positions are fewer than the pooling kernel {cfg.kernel}"
        )

    grid = cfg.grid
    adapted = features
    if n != grid:
        adapted = matmul(Tensor(_adaptive_pool_matrix(n, grid)), features)
    pooled = overlap_avg_pool(adapted, cfg.kernel, cfg.stride)
    peak = reshape(global_max_pool(features), (1, channels))

    out = concat([pooled, peak], axis=0)
    return reshape(out, (channels * (cfg.out_len + 1),))


def distill(
    x: FeatureMatrix,
    mode: str,
    params: AttentionParams,
    cfg: VfdConfig,
    tape: Optional[MaskTape] = None,
) -> Tensor:
    """Map a feature matrix to the sparse feature vector of the given mode.

    Raises:
        ConfigurationError: on an unknown mode or parameters of another mode.
    """
    mode_pairwise(mode)

    if mode == "vfd":
        return vfd_forward(x, cfg)
    if mode == "dnla_delta_emb":
        if params.heads is None:
            raise ConfigurationError(f"mode '{mode}' needs attention heads")
        return vfd_forward(dnla_delta_forward(x, params.heads), cfg)

    if params.nla is None:
        raise ConfigurationError(f"mode '{mode}' needs non-local parameters")
    if mode.startswith("dnla_mu"):
        if params.motion is None:
            raise ConfigurationError(f"mode '{mode}' needs motion branch parameters")
        refined = dnla_mu_forward(x, params.nla, params.motion, tape=tape)
        return vfd_forward(refined, cfg)
    return vfd_forward(nla_forward(x, params.nla), cfg)


def sparse_length(channels: int, cfg: VfdConfig) -> int:
    return channels * (cfg.out_len + 1)


def embedding_width(channels: int) -> int:
    return max(1, channels // 2)

