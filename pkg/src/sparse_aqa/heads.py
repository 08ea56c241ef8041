import math
from typing import NamedTuple, Sequence

import numpy as np
import numpy.typing as npt
from scipy.stats import rankdata

from .config import GENDERS, AdamState, Array, LossWeights, SampleLabel
from .exceptions import DimensionError, UndefinedCorrelationError
from .tensor import (
    Tensor,
    add,
    log_softmax,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    sub,
    sum,
)
from .utils import _glorot, _zeros


class MlpParams(NamedTuple):
    trunk1_w: Tensor
    trunk1_b: Tensor
    trunk2_w: Tensor
    trunk2_b: Tensor
    score_w: Tensor
    score_b: Tensor
    # The gender head reads the sparse feature vector directly.
    gender_w: Tensor
    gender_b: Tensor


class Prediction(NamedTuple):
    # Shape (1,), inside (0, 1).
    score_norm: Tensor
    # Shape (2,), logits of GENDERS in order.
    gender_logits: Tensor


def init_mlp_params(
    rng: np.random.Generator, in_features: int, hidden: Sequence[int]
) -> MlpParams:
    h1, h2 = hidden
    return MlpParams(
        trunk1_w=_glorot(rng, in_features, h1),
        trunk1_b=_zeros((h1,)),
        trunk2_w=_glorot(rng, h1, h2),
        trunk2_b=_zeros((h2,)),
        score_w=_glorot(rng, h2, 1),
        score_b=_zeros((1,)),
        gender_w=_glorot(rng, in_features, len(GENDERS)),
        gender_b=_zeros((len(GENDERS),)),
    )


def mlp_forward(feat: Tensor, p: MlpParams) -> Prediction:
    """Map a sparse feature vector to a normalized score and gender logits.

    Args:
        feat: vector of the length the trunk was built for.
        p: MLP parameters.

    Returns:
        The sigmoid-bounded score and the two gender logits.

    Raises:
        DimensionError: if the vector length does not match the trunk.
    """
    if feat.ndim != 1 or feat.shape[0] != p.trunk1_w.shape[0]:
        raise DimensionError(
            f"feature vector {feat.shape} does not match MLP input {p.trunk1_w.shape[0]}"
        )

    x = reshape(feat, (1, feat.shape[0]))
    h = relu(add(matmul(x, p.trunk1_w), p.trunk1_b))
    h = relu(add(matmul(h, p.trunk2_w), p.trunk2_b))
    score = sigmoid(add(matmul(h, p.score_w), p.score_b))
    gender = add(matmul(x, p.gender_w), p.gender_b)

    return Prediction(reshape(score, (1,)), reshape(gender, (len(GENDERS),)))


def gender_index(gender: str) -> int:
    return GENDERS.index(gender)


def total_loss(pred: Prediction, label: SampleLabel, lw: LossWeights) -> Tensor:
    """Training loss of one sample.

    L = |e| + w * e^2 with e = score_norm - label score, plus lambda_g times the
    cross-entropy of the gender logits when the class loss is enabled.

    Args:
        pred: network output.
        label: label whose `total_score` is already normalized to [0, 1].
        lw: loss weights.

    Returns:
        A scalar tensor.
    """
    e = sub(pred.score_norm, Tensor(label.total_score))
    loss = add(add(relu(e), relu(-e)), mul(Tensor(lw.w), mul(e, e)))

    if lw.class_loss_enabled and lw.gender_weight > 0:
        target = np.zeros(len(GENDERS))
        target[gender_index(label.gender)] = 1.0
        log_prob = log_softmax(pred.gender_logits)
        cross_entropy = -sum(mul(log_prob, Tensor(target)))
        loss = add(loss, mul(Tensor(lw.gender_weight), cross_entropy))

    return sum(loss)


def spearman(preds: npt.ArrayLike, targets: npt.ArrayLike) -> float:
    """Spearman rank correlation, tied values sharing their average rank.

    Raises:
        UndefinedCorrelationError: with fewer than 2 values or when either side
            has zero rank variance.
    """
    x = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise DimensionError(f"spearman needs equal lengths, got {x.size} and {y.size}")
    if x.size < 2:
        raise UndefinedCorrelationError(f"spearman needs at least 2 values, got {x.size}")

    # Average ranks always have mean (n + 1) / 2.
    center = (x.size + 1) / 2
    rx = rankdata(x) - center
    ry = rankdata(y) - center

    sxx = float(np.dot(rx, rx))
    syy = float(np.dot(ry, ry))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("spearman is undefined for constant input")

    return float(np.dot(rx, ry)) / math.sqrt(sxx * syy)


def mae(preds: npt.ArrayLike, targets: npt.ArrayLike) -> float:
    x = np.asarray(preds, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    return float(np.mean(np.abs(x - y)))


def gender_accuracy(predicted: Sequence[str], actual: Sequence[str]) -> float:
    if len(predicted) != len(actual) or len(actual) == 0:
        raise DimensionError("gender accuracy needs two non-empty lists of equal length")
    hits = np.count_nonzero([p == a for p, a in zip(predicted, actual)])
    return float(hits) / len(actual)


def predicted_gender(pred: Prediction) -> str:
    # argmax picks the first gender on ties
    return GENDERS[int(np.argmax(pred.gender_logits.data))]


def init_adam_state(params: dict[str, Array]) -> AdamState:
    return AdamState(
        step=0,
        m={name: np.zeros_like(arr) for name, arr in params.items()},
        v={name: np.zeros_like(arr) for name, arr in params.items()},
    )


def adam_step(
    params: dict[str, Array],
    grads: dict[str, Array],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, Array], AdamState]:
    """One Adam update with bias-corrected moments.

    Inputs are left untouched; new dictionaries are returned.

    Raises:
        DimensionError: if the names or shapes of params, grads and moments differ.
    """
    if set(params) != set(grads) or set(params) != set(state.m) or set(params) != set(
        state.v
    ):
        raise DimensionError("params, grads and optimizer state name different tensors")

    step = state.step + 1
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step

    new_params: dict[str, Array] = {}
    new_m: dict[str, Array] = {}
    new_v: dict[str, Array] = {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape or state.m[name].shape != value.shape:
            raise DimensionError(
                f"{name}: parameter {value.shape}, gradient {g.shape}, "
                f"moment {state.m[name].shape}"
            )
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v

    return new_params, AdamState(step, new_m, new_v)
