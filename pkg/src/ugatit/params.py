"""Named trainable tensors plus their optimizer policy."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .norm import SpectralState
from .tensor import Tensor


@dataclass
class ParamSpec:
    tensor: Tensor
    decay: bool = False
    clamp: tuple | None = None


class ParamStore:
    """Ordered mapping ``name -> Tensor`` with decay/clamp flags and SN buffers.

    Spectral-norm vectors are kept here too so that checkpoints and dtype
    casts see them, but they are never handed to the optimizer.
    """

    def __init__(self):
        self._specs: dict[str, ParamSpec] = {}
        self.spectral: dict[str, SpectralState] = {}

    def add(self, name: str, data: np.ndarray, decay: bool = False,
            clamp: tuple | None = None) -> Tensor:
        if name in self._specs:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(data, requires_grad=True)
        self._specs[name] = ParamSpec(t, decay, clamp)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._specs[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._specs

    def __iter__(self) -> Iterator[str]:
        return iter(self._specs)

    def __len__(self) -> int:
        return len(self._specs)

    def items(self):
        return ((k, s.tensor) for k, s in self._specs.items())

    def spec(self, name: str) -> ParamSpec:
        return self._specs[name]

    def num_elements(self) -> int:
        return sum(s.tensor.size for s in self._specs.values())

    def zero_grad(self) -> None:
        for s in self._specs.values():
            s.tensor.grad = np.zeros_like(s.tensor.data)

    def astype(self, dtype) -> None:
        """Cast every parameter and buffer in place (e.g. to float64 for gradchecks)."""
        for s in self._specs.values():
            s.tensor.data = s.tensor.data.astype(dtype)
            s.tensor.grad = None
        for k, st in self.spectral.items():
            self.spectral[k] = st.astype(dtype)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: s.tensor.data.copy() for k, s in self._specs.items()}
