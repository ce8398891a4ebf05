"""Named collection of learnable tensors and non-learnable buffers."""
from __future__ import annotations

import math
from collections.abc import Iterator

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered mapping of parameter names to leaf tensors.

    Buffers (batch-norm running statistics) live alongside parameters but are
    plain arrays that never receive gradients.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    # -- registration -------------------------------------------------------
    def add(self, name: str, value) -> Tensor:
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self._buffers[name] = arr
        return arr

    # -- access -------------------------------------------------------------
    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return self._buffers

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    # -- state --------------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        """Copy of every parameter and buffer; buffers are prefixed ``buffer:``."""
        out = {name: t.data.copy() for name, t in self._params.items()}
        out.update({f"buffer:{name}": arr.copy() for name, arr in self._buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        expected = set(self._params) | {f"buffer:{n}" for n in self._buffers}
        if strict and set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in state.items():
            if name.startswith("buffer:"):
                target = self._buffers[name[len("buffer:"):]]
                if target.shape != value.shape:
                    raise ValueError(f"shape mismatch for {name}: {target.shape} vs {value.shape}")
                target[...] = value
            else:
                t = self._params[name]
                if t.shape != value.shape:
                    raise ValueError(f"shape mismatch for {name}: {t.shape} vs {value.shape}")
                t.data = np.array(value, dtype=self.dtype)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for name, t in self._params.items():
            out.add(name, t.data)
        for name, arr in self._buffers.items():
            out.add_buffer(name, arr)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)


class Initializer:
    """Random initialisers drawing from one generator."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def conv(self, c_out: int, c_in: int, k: int) -> np.ndarray:
        std = math.sqrt(2.0 / (c_in * k * k))
        return self.rng.normal(0.0, std, size=(c_out, c_in, k, k))

    def dense(self, n_in: int, n_out: int) -> np.ndarray:
        std = math.sqrt(1.0 / n_in)
        return self.rng.normal(0.0, std, size=(n_in, n_out))

    def small(self, *shape: int, std: float = 0.02) -> np.ndarray:
        return self.rng.normal(0.0, std, size=shape)
