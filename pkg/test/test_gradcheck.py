import numpy as np
import pytest

from sparse_aqa import gradcheck, main
from sparse_aqa import tensor as tn
from sparse_aqa.config import MODES, RunConfig
from sparse_aqa.exceptions import ContractError, GradcheckFailure
from sparse_aqa.tensor import Tensor


def _square_without_factor_two(x: Tensor) -> Tensor:
    # Wrong vector-Jacobian product: d(x^2)/dx is 2x.
    return tn._result(x.data * x.data, (x,), lambda g: (g * x.data,), "bad_square")


def test_audit_passes_on_correct_gradients(rng: np.random.Generator) -> None:
    def loss_fn(t: dict[str, Tensor]) -> Tensor:
        h = tn.sigmoid(tn.matmul(t["a"], t["b"]))
        return tn.sum(tn.mul(h, h))

    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
    audits = gradcheck.audit_gradients(loss_fn, params, rng, samples=5)
    assert [a.name for a in audits] == ["a", "b"]
    assert [a.checked for a in audits] == [5, 5]
    assert all(a.passed for a in audits)
    gradcheck.check_audits(audits)


def test_audit_catches_a_broken_operation(rng: np.random.Generator) -> None:
    def loss_fn(t: dict[str, Tensor]) -> Tensor:
        return tn.sum(tn.add(_square_without_factor_two(t["broken"]), tn.mul(t["fine"], t["fine"])))

    params = {"broken": rng.uniform(0.5, 1.0, size=3), "fine": rng.uniform(0.5, 1.0, size=3)}
    audits = gradcheck.audit_gradients(loss_fn, params, rng)
    by_name = {a.name: a for a in audits}
    assert not by_name["broken"].passed
    assert by_name["broken"].max_error == pytest.approx(0.5, rel=1e-4)
    assert by_name["fine"].passed
    assert by_name["fine"].checked == 3

    with pytest.raises(GradcheckFailure, match="broken") as e:
        gradcheck.check_audits(audits)
    assert e.value.exit_code == 4
    assert "FAIL" in gradcheck.format_audit_table(audits)


def test_audit_needs_a_scalar_loss(rng: np.random.Generator) -> None:
    with pytest.raises(ContractError):
        gradcheck.audit_gradients(lambda t: tn.relu(t["x"]), {"x": np.ones(3)}, rng)


def test_relative_error_floor() -> None:
    assert gradcheck.relative_error(0.0, 0.0) == 0.0
    assert gradcheck.relative_error(1e-9, 0.0) == pytest.approx(1e-3)
    assert gradcheck.relative_error(2.0, 1.0) == 0.5


@pytest.mark.parametrize("mode", MODES)
def test_gradcheck_every_mode_passes(small_config: RunConfig, mode: str) -> None:
    audits = main.cmd_gradcheck(small_config._replace(mode=mode))
    failing = [(a.name, a.max_error) for a in audits if not a.passed]
    assert failing == []
    assert any(a.name.startswith("jfe.") for a in audits)
    assert any(a.name.startswith("mlp.") for a in audits)


def test_gradcheck_groups_follow_the_mode(small_config: RunConfig) -> None:
    vfd = {a.name.split(".")[0] for a in main.cmd_gradcheck(small_config._replace(mode="vfd"))}
    assert vfd == {"jfe", "mlp"}

    names = [a.name for a in main.cmd_gradcheck(small_config._replace(mode="dnla_mu_cat"))]
    assert "attention.nla.w_cat" in names
    assert "attention.motion.weight" in names
    assert "jfe.spatial.gate" in names


def test_gradcheck_appearance_stream(small_config: RunConfig) -> None:
    audits = main.cmd_gradcheck(small_config._replace(stream="appearance", mode="dnla_delta_emb"))
    assert all(a.passed for a in audits)
    assert not any(a.name.startswith("jfe.") for a in audits)
    assert any(a.name.startswith("attention.heads.temporal.") for a in audits)


def test_gradcheck_shrinks_the_temporal_kernel() -> None:
    cfg = main.gradcheck_config(RunConfig(seed=1, temporal_kernel=9, clip_len=32))
    assert cfg.clip_len == 8
    assert cfg.temporal_kernel == 7
