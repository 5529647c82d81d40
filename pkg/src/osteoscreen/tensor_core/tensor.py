"""Tensor values and the recording tape used for reverse-mode differentiation.

Operations (see :mod:`osteoscreen.tensor_core.ops`) append a node to the
innermost active :class:`Tape` whenever one of their inputs requires a
gradient. ``Tape.backward`` then walks the nodes in exact reverse recording
order, looking up each node's gradient rule in :data:`BACKWARD_RULES`.

Example::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(w, w))
    tape.backward(loss)
    w.grad  # array([2., 2., 2.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from ..errors import InputError, StateError

FLOAT32 = np.dtype(np.float32)
FLOAT64 = np.dtype(np.float64)

_local = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", FLOAT32)


class precision:
    """Context manager selecting the element type for newly built tensors.

    Training runs use float32; gradient checking uses float64::

        with precision("float64"):
            params = init_params(config, rng)
    """

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (FLOAT32, FLOAT64):
            raise InputError(f"unsupported element type {self.dtype}")

    def __enter__(self):
        self._prev = default_dtype()
        _local.dtype = self.dtype
        return self.dtype

    def __exit__(self, *exc):
        _local.dtype = self._prev
        return False


class Tensor:
    """An n-dimensional float array with an optional gradient buffer.

    ``node_id`` is the index of the tape node that produced this tensor, or
    ``None`` for leaves (inputs and parameters).
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (FLOAT32, FLOAT64) else default_dtype()
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: dict[str, Any] = field(default_factory=dict)

    @property
    def input_ids(self) -> tuple[int | None, ...]:
        return tuple(t.node_id for t in self.inputs)


# op kind -> rule(grad_output, node) returning one gradient (or None) per input
BACKWARD_RULES: dict[str, Callable[[np.ndarray, Node], tuple]] = {}


def backward_rule(op: str):
    def register(fn):
        BACKWARD_RULES[op] = fn
        return fn

    return register


def active_tape() -> "Tape | None":
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    A tape is single-use: ``backward`` may run once, after which the tape
    must be discarded (or ``reset``) before it can record again.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise StateError("tape already consumed by backward(); call reset() first")
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, **saved) -> None:
        output.node_id = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(Node(op, inputs, output, saved))

    def _produced(self, t: Tensor) -> bool:
        nid = t.node_id
        return nid is not None and nid < len(self.nodes) and self.nodes[nid].output is t

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every gradient-requiring tensor reachable from ``loss``."""
        if self.consumed:
            raise StateError("backward() already ran on this tape")
        if not self.nodes:
            raise InputError("backward() on an empty tape")
        if loss.size != 1:
            raise InputError(f"loss must be a scalar, got shape {loss.shape}")
        if not self._produced(loss):
            raise InputError("loss was not produced on this tape")
        nid = loss.node_id

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: nid + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            in_grads = BACKWARD_RULES[node.op](g, node)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise StateError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi.astype(t.dtype, copy=True) if prev is None else prev + gi
                if not self._produced(t):
                    leaves[key] = t
        for key, t in leaves.items():
            t.grad = grads[key]
        self.consumed = True


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)
