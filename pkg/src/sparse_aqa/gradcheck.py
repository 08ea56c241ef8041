import logging
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .config import Array
from .exceptions import ContractError, GradcheckFailure
from .tensor import CompGraph, Tensor, backward


logger = logging.getLogger(__name__)

FD_STEP: float = 1e-5
TOLERANCE: float = 1e-4
# Floor of the relative-error denominator.
ERROR_FLOOR: float = 1e-6

LossFn = Callable[[dict[str, Tensor]], Tensor]


class GradAudit(NamedTuple):
    name: str
    max_error: float
    checked: int
    passed: bool


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ERROR_FLOOR)


def _evaluate(loss_fn: LossFn, arrays: dict[str, Array]) -> float:
    frozen = {name: Tensor(arr) for name, arr in arrays.items()}
    return loss_fn(frozen).item()


def audit_gradients(
    loss_fn: LossFn,
    params: dict[str, Array],
    rng: np.random.Generator,
    samples: int = 6,
    step: float = FD_STEP,
    tolerance: float = TOLERANCE,
) -> list[GradAudit]:
    """Compare reverse-mode gradients with central finite differences.

    Args:
        loss_fn: builds a scalar loss from named parameter tensors. It must be
            deterministic; random choices made on its first call have to be
            replayed on later calls.
        params: parameter values keyed by name.
        rng: picks the audited coordinates.
        samples: coordinates audited per tensor, all of them if the tensor is
            smaller.
        step: finite-difference step h.
        tolerance: largest accepted relative error.

    Returns:
        One row per parameter tensor, in the order of `params`.
    """
    tensors = {name: Tensor(arr, requires_grad=True) for name, arr in params.items()}
    loss = loss_fn(tensors)
    if loss.size != 1:
        raise ContractError(f"audited loss must be a scalar, got {loss.shape}")
    graph = CompGraph.trace(loss)
    grads = dict(zip(tensors, backward(loss, list(tensors.values()), graph)))

    audits: list[GradAudit] = []
    for name, value in params.items():
        count = min(samples, value.size)
        coords = rng.choice(value.size, size=count, replace=False)

        worst = 0.0
        for flat in sorted(int(c) for c in coords):
            shifted = dict(params)
            plus = value.copy()
            plus.reshape(-1)[flat] += step
            shifted[name] = plus
            loss_plus = _evaluate(loss_fn, shifted)

            minus = value.copy()
            minus.reshape(-1)[flat] -= step
            shifted[name] = minus
            loss_minus = _evaluate(loss_fn, shifted)

            numeric = (loss_plus - loss_minus) / (2 * step)
            analytic = float(grads[name].reshape(-1)[flat])
            worst = max(worst, relative_error(analytic, numeric))

        passed = bool(worst < tolerance)
        audits.append(GradAudit(name, worst, count, passed))
        logger.debug("%s: max relative error %.3e over %d entries", name, worst, count)

    return audits


def format_audit_table(audits: Sequence[GradAudit]) -> str:
    width = max([len("group")] + [len(a.name) for a in audits])
    lines = [f"{'group':<{width}}  {'max_rel_error':>13}  status"]
    for a in audits:
        status = "ok" if a.passed else "FAIL"
        lines.append(f"{a.name:<{width}}  {a.max_error:>13.3e}  {status}")
    return "\n".join(lines)


def check_audits(audits: Sequence[GradAudit]) -> None:
    """Raise if any audited tensor exceeded the tolerance.

    Raises:
        GradcheckFailure: naming the failing parameter groups.
    """
    failed = [a.name for a in audits if not a.passed]
    if len(failed) > 0:
        raise GradcheckFailure(f"gradient check failed for: {', '.join(failed)}")
