"""Dense tensors and the reverse-mode tape that records operations on them.

Operations only record when a :class:`Tape` is active (``with Tape() as tape:``)
and at least one input requires a gradient. Outside a tape every op is a plain
numpy computation, which is what inference uses.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import UsageError

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """A numpy array plus the bookkeeping needed to take gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        if arr.ndim > 0 and min(arr.shape) <= 0:
            raise ValueError(f"tensor shape must be strictly positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Recording order is a topological order of the graph, so walking the list
    backwards visits every node after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Run reverse-mode accumulation from a scalar ``loss``.

        Returns gradients of every named leaf that requires a gradient. The
        gradient of any other recorded tensor is available via :meth:`grad`.
        """
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(node.out is loss for node in self.nodes):
            raise UsageError("loss was not produced by an operation recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        produced = {id(node.out) for node in self.nodes}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            input_grads = node.backward(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        self._grads = grads
        self._leaves = leaves
        return {t.name: grads[k] for k, t in leaves.items() if t.name is not None}

    def grad(self, tensor: Tensor) -> np.ndarray | None:
        return self._grads.get(id(tensor))


def active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def make_output(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op result, recording it when a tape is listening."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
