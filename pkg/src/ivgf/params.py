"""Named parameter tensors with deterministic initialization.

Weights draw from U(-1/sqrt(fan_in), +1/sqrt(fan_in)) on a stream derived
from ("init", name), so adding or removing a parameter never shifts any
other parameter's values. Biases start at zero, norm gains at one.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError
from .rng import RngState
from .tensor import Tensor


class ParamStore:
    """Insertion-ordered mapping of unique names to trainable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}

    def clear_grads(self):
        for p in self._params.values():
            p.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        """Copy values in by name; names and shapes must match exactly."""
        missing = [n for n in self._params if n not in arrays]
        extra = [n for n in arrays if n not in self._params]
        if missing or extra:
            raise DimensionError(
                f"parameter set mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
            )
        for name, values in arrays.items():
            p = self._params[name]
            values = np.asarray(values, dtype=np.float64)
            if values.shape != p.data.shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {values.shape} != model shape {p.data.shape}"
                )
            p.data = values.copy()


def weight(store: ParamStore, rng: RngState, name: str, shape, fan_in: int) -> Tensor:
    scale = 1.0 / math.sqrt(fan_in)
    data = rng.derive("init", name).fill_uniform(shape, -scale, scale)
    return store.add(name, Tensor(data, requires_grad=True))


def bias(store: ParamStore, name: str, width: int) -> Tensor:
    return store.add(name, Tensor(np.zeros(width), requires_grad=True))


def norm_gain(store: ParamStore, name: str, width: int) -> Tensor:
    return store.add(name, Tensor(np.ones(width), requires_grad=True))
