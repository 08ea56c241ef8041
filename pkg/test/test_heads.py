from typing import Callable

import numpy as np
import pytest

from sparse_aqa import heads
from sparse_aqa.config import LossWeights, SampleLabel
from sparse_aqa.exceptions import DimensionError, UndefinedCorrelationError
from sparse_aqa.heads import MlpParams, Prediction
from sparse_aqa.tensor import Tensor, backward


def _prediction(score: float, logits: tuple[float, float] = (0.0, 0.0)) -> Prediction:
    return Prediction(Tensor([score]), Tensor(list(logits)))


def _random_mlp(rng: np.random.Generator, n: int = 6) -> MlpParams:
    shapes = [(n, 5), (5,), (5, 3), (3,), (3, 1), (1,), (n, 2), (2,)]
    return MlpParams(*(Tensor(rng.normal(size=s)) for s in shapes))


def test_mlp_zero_params() -> None:
    shapes = [(6, 5), (5,), (5, 3), (3,), (3, 1), (1,), (6, 2), (2,)]
    p = MlpParams(*(Tensor(np.zeros(s)) for s in shapes))
    pred = heads.mlp_forward(Tensor(np.ones(6)), p)
    assert pred.score_norm.data.tolist() == [0.5]
    assert pred.gender_logits.data.tolist() == [0.0, 0.0]


def test_mlp_bias_path_only(rng: np.random.Generator) -> None:
    p = _random_mlp(rng)
    pred = heads.mlp_forward(Tensor(np.zeros(6)), p)
    h1 = np.maximum(p.trunk1_b.data, 0.0)
    h2 = np.maximum(h1 @ p.trunk2_w.data + p.trunk2_b.data, 0.0)
    expected = 1.0 / (1.0 + np.exp(-(h2 @ p.score_w.data + p.score_b.data)))
    np.testing.assert_allclose(pred.score_norm.data, expected, atol=1e-12)
    np.testing.assert_array_equal(pred.gender_logits.data, p.gender_b.data)


def test_mlp_affine_chain_oracle(rng: np.random.Generator) -> None:
    p = _random_mlp(rng)
    x = rng.normal(size=6)
    pred = heads.mlp_forward(Tensor(x), p)

    h1 = np.maximum(x @ p.trunk1_w.data + p.trunk1_b.data, 0.0)
    h2 = np.maximum(h1 @ p.trunk2_w.data + p.trunk2_b.data, 0.0)
    score = 1.0 / (1.0 + np.exp(-(h2 @ p.score_w.data + p.score_b.data)))
    np.testing.assert_allclose(pred.score_norm.data, score, atol=1e-12)
    np.testing.assert_allclose(pred.gender_logits.data, x @ p.gender_w.data + p.gender_b.data, atol=1e-12)


def test_mlp_length_mismatch(rng: np.random.Generator) -> None:
    with pytest.raises(DimensionError):
        heads.mlp_forward(Tensor(np.ones(7)), _random_mlp(rng))


def test_init_mlp_params(rng: np.random.Generator) -> None:
    p = heads.init_mlp_params(rng, 18, (8, 4))
    assert p.trunk1_w.shape == (18, 8)
    assert p.score_w.shape == (4, 1)
    assert p.gender_w.shape == (18, 2)
    assert all(t.requires_grad for t in p)


@pytest.mark.parametrize(
    "score,label,lw,expected",
    [
        (1.0, 0.0, LossWeights(0.0, 0.1, False), 1.0),
        (0.0, 2.0, LossWeights(0.5, 0.1, False), 4.0),
        (0.75, 0.25, LossWeights(1.0, 0.0, True), 0.75),
    ],
    ids=["e=1 w=0", "e=2 w=0.5", "zero class weight"],
)
def test_total_loss_examples(score: float, label: float, lw: LossWeights, expected: float) -> None:
    loss = heads.total_loss(_prediction(score), SampleLabel(label, "female"), lw)
    assert loss.shape == ()
    assert loss.item() == pytest.approx(expected, abs=1e-15)


def test_total_loss_perfect_prediction() -> None:
    loss = heads.total_loss(_prediction(0.4, (10.0, -10.0)), SampleLabel(0.4, "female"), LossWeights())
    assert 0.0 <= loss.item() < 1e-4


def test_total_loss_cross_entropy() -> None:
    pred = _prediction(0.5, (1.0, 2.0))
    loss = heads.total_loss(pred, SampleLabel(0.5, "female"), LossWeights(1.0, 0.5, True))
    expected = 0.5 * (np.log(np.exp(1.0) + np.exp(2.0)) - 1.0)
    assert loss.item() == pytest.approx(expected, abs=1e-12)


def test_total_loss_gradients(
    numeric_grad: Callable[..., np.ndarray], analytic_grad: Callable[..., np.ndarray]
) -> None:
    label = SampleLabel(0.3, "male")
    logits = Tensor([0.2, -0.4])

    def fn(score: Tensor) -> Tensor:
        return heads.total_loss(Prediction(score, logits), label, LossWeights(0.7, 0.1, True))

    x = np.array([0.55])
    np.testing.assert_allclose(analytic_grad(fn, x), numeric_grad(fn, x), rtol=1e-4)


def test_total_loss_is_non_negative(rng: np.random.Generator) -> None:
    for _ in range(50):
        pred = _prediction(float(rng.uniform()), tuple(rng.normal(size=2)))
        label = SampleLabel(float(rng.uniform()), str(rng.choice(["female", "male"])))
        assert heads.total_loss(pred, label, LossWeights()).item() >= 0.0


@pytest.mark.parametrize(
    "preds,targets,expected",
    [
        ([1.0, 2.0, 3.0], [2.0, 1.0, 3.0], 0.5),
        ([0.1, 0.5, 0.2, 0.9], [1.0, 25.0, 4.0, 81.0], 1.0),
        ([1.0, 2.0, 3.0, 4.0], [4.0, 3.0, 2.0, 1.0], -1.0),
    ],
    ids=["one swap", "monotone", "reversed"],
)
def test_spearman_examples(preds: list[float], targets: list[float], expected: float) -> None:
    assert heads.spearman(preds, targets) == pytest.approx(expected, abs=1e-15)


def test_spearman_pearson_of_average_ranks(rng: np.random.Generator) -> None:
    for i in range(100):
        x = rng.integers(0, 5, size=12).astype(float)
        y = rng.integers(0, 8, size=12).astype(float) if i % 2 else rng.normal(size=12)
        if np.all(x == x[0]) or np.all(y == y[0]):
            continue

        def ranks(v: np.ndarray) -> np.ndarray:
            # average rank of every tie group, 1-based
            return np.array([np.sum(v < a) + (np.sum(v == a) + 1) / 2 for a in v])

        expected = np.corrcoef(ranks(x), ranks(y))[0, 1]
        assert heads.spearman(x, y) == pytest.approx(expected, abs=1e-12)


def test_spearman_invariant_under_increasing_maps(rng: np.random.Generator) -> None:
    x = rng.normal(size=30)
    y = x + rng.normal(size=30)
    rho = heads.spearman(x, y)
    assert heads.spearman(np.exp(x), y) == rho
    assert heads.spearman(x, 3.0 * y + 7.0) == rho
    assert heads.spearman(x, x) == 1.0
    assert heads.spearman(x, -x) == -1.0


@pytest.mark.parametrize(
    "preds,targets",
    [([1.0], [2.0]), ([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]), ([1.0, 2.0], [5.0, 5.0])],
    ids=["single value", "constant predictions", "constant targets"],
)
def test_spearman_undefined(preds: list[float], targets: list[float]) -> None:
    with pytest.raises(UndefinedCorrelationError):
        heads.spearman(preds, targets)


def test_spearman_length_mismatch() -> None:
    with pytest.raises(DimensionError):
        heads.spearman([1.0, 2.0], [1.0, 2.0, 3.0])


def test_mae_and_gender_accuracy() -> None:
    assert heads.mae([1.0, 2.0], [2.0, 4.0]) == 1.5
    assert heads.gender_accuracy(["male", "male"], ["male", "male"]) == 1.0
    assert heads.gender_accuracy(["male", "female"], ["male", "male"]) == 0.5
    assert heads.predicted_gender(_prediction(0.5, (0.0, 0.0))) == "female"
    assert heads.predicted_gender(_prediction(0.5, (0.0, 1.0))) == "male"


def test_adam_first_step_moves_by_lr() -> None:
    params = {"w": np.array(1.0)}
    state = heads.init_adam_state(params)
    new, state = heads.adam_step(params, {"w": np.array(1.0)}, state)
    assert state.step == 1
    assert params["w"] - new["w"] == pytest.approx(1e-3, rel=1e-6)
    assert params["w"] == 1.0


def test_adam_zero_gradient_decays_moments() -> None:
    params = {"w": np.array([0.5, -0.5])}
    state = heads.init_adam_state(params)._replace(
        step=3, m={"w": np.array([0.2, 0.2])}, v={"w": np.array([0.1, 0.1])}
    )
    new, state = heads.adam_step(params, {"w": np.zeros(2)}, state, lr=0.0)
    np.testing.assert_array_equal(new["w"], params["w"])
    np.testing.assert_allclose(state.m["w"], 0.18)
    np.testing.assert_allclose(state.v["w"], 0.0999)


def test_adam_constant_gradient_decreases_parameter() -> None:
    params = {"w": np.array([2.0])}
    state = heads.init_adam_state(params)
    values = []
    for _ in range(20):
        params, state = heads.adam_step(params, {"w": np.array([0.3])}, state, lr=0.01)
        values.append(float(params["w"][0]))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_shape_mismatch() -> None:
    params = {"w": np.zeros(3)}
    state = heads.init_adam_state(params)
    with pytest.raises(DimensionError):
        heads.adam_step(params, {"w": np.zeros(2)}, state)
    with pytest.raises(DimensionError):
        heads.adam_step(params, {"v": np.zeros(3)}, state)


def test_mlp_gradients_flow_to_every_tensor(rng: np.random.Generator) -> None:
    p = MlpParams(*(Tensor(t.data, requires_grad=True) for t in heads.init_mlp_params(rng, 6, (5, 3))))
    loss = heads.total_loss(heads.mlp_forward(Tensor(rng.normal(size=6)), p), SampleLabel(0.9, "male"), LossWeights())
    grads = backward(loss, list(p))
    assert all(g.shape == t.shape for g, t in zip(grads, p))
    assert np.any(grads[0] != 0.0)
    assert np.any(grads[-1] != 0.0)


@pytest.mark.parametrize(
    "logits,gender,expected",
    [((800.0, -800.0), "female", 0.0), ((800.0, -800.0), "male", 1600.0), ((-800.0, 800.0), "male", 0.0)],
    ids=["confident right", "confident wrong", "confident male"],
)
def test_total_loss_with_saturated_logits(
    logits: tuple[float, float], gender: str, expected: float
) -> None:
    score = Tensor([0.5], requires_grad=True)
    gender_logits = Tensor(list(logits), requires_grad=True)
    loss = heads.total_loss(Prediction(score, gender_logits), SampleLabel(0.5, gender), LossWeights(1.0, 1.0, True))

    assert loss.item() == pytest.approx(expected)
    grads = backward(loss, [score, gender_logits])
    assert all(np.all(np.isfinite(g)) for g in grads)
