import hashlib
import math
from typing import Any

import numpy as np

from .config import Array
from .tensor import Tensor


def _is_number(value: Any) -> bool:
    """Check if a decoded JSON value is a real number.

    Args:
        value: the value to check.

    Returns:
        True for ints and floats, False for booleans and anything else.
    """
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _valid_mask(joints: Array) -> Array:
    """Joints with a positive detection confidence."""
    return np.asarray(joints[..., 2] > 0)


def _valid_count(joints: Array) -> int:
    return int(np.count_nonzero(_valid_mask(joints)))


def _is_validation(sample_id: str, val_fraction: float) -> bool:
    """Deterministic train/validation assignment from a hash of the sample id.

    Args:
        sample_id: identifier of the sample.
        val_fraction: share of the hash space assigned to validation.

    Returns:
        True if the sample belongs to the validation split.
    """
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    bucket = int.from_bytes(digest[:8], "big") / 2**64
    return bucket < val_fraction


def _format_metric(value: float) -> str:
    if math.isnan(value):
        return "nan"
    return repr(float(value))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)
