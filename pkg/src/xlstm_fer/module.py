"""Parameter containers and initializers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def parameter(data, dtype) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Walks attributes to find parameters and submodules.

    Attribute order is insertion order, so parameter names and their
    enumeration order are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())
