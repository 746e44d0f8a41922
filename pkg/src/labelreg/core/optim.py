"""Named parameter storage, initialisation and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from ..errors import ConfigError, UsageError
from .tensor import Tensor


class ParamStore:
    """Ordered mapping of parameter path -> Tensor plus a frozen-name set.

    Registration order is significant: initial values are drawn from the
    supplied generator in exactly that order.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_conv(self, prefix: str, out_c: int, in_c: int, k: int, rng: np.random.Generator,
                 bias: bool = True) -> tuple[Tensor, Tensor | None]:
        """Kaiming-uniform (fan-in, ReLU gain) weight and zero bias."""
        fan_in = in_c * k * k
        bound = np.sqrt(6.0 / fan_in)
        w = self.add(f"{prefix}.weight", rng.uniform(-bound, bound, size=(out_c, in_c, k, k)))
        b = self.add(f"{prefix}.bias", np.zeros(out_c)) if bias else None
        return w, b

    def freeze(self, names) -> None:
        names = set(names)
        unknown = names - set(self._params)
        if unknown:
            raise ConfigError(f"cannot freeze unknown parameters {sorted(unknown)}")
        self.frozen |= names

    def unfreeze(self, names) -> None:
        self.frozen -= set(names)

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._params) - set(state)
            if missing:
                raise ConfigError(f"missing parameters in state: {sorted(missing)}")
        for name, value in state.items():
            if name not in self._params:
                if strict:
                    raise ConfigError(f"unexpected parameter {name!r} in state")
                continue
            cur = self._params[name]
            if tuple(value.shape) != cur.shape:
                raise ConfigError(f"shape mismatch for parameter {name!r}: expected {cur.shape}, got {tuple(value.shape)}")
            cur.data = np.array(value, dtype=self.dtype)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place. Frozen parameters are skipped."""
    for name in params:
        if name not in params.frozen and name not in grads:
            raise UsageError(f"no gradient for trainable parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if name in params.frozen:
            continue
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
