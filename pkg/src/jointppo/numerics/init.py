from __future__ import annotations

import numpy as np

from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0,
                   name: str | None = None) -> Tensor:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros(*shape: int, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(*shape: int, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)
