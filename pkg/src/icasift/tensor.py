"""Dense tensors and the reverse-mode autodiff tape.

The engine is deliberately small: a Tensor wraps a contiguous numpy array
(32-bit reals by default), and a Graph records operations in execution
order while it is active.  Backpropagation walks the recorded nodes once,
in reverse append order, which is a valid topological order because every
operation's inputs were recorded before it.

The default dtype is float32.  Verification code (finite-difference
gradient checks) can switch to float64 via `using_dtype`, where central
differences have enough numeric headroom to be meaningful.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError

_DEFAULT_DTYPE = np.float32


def default_dtype() -> np.dtype:
    """Current dtype for newly created tensors."""
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported tensor dtype {dt}")
    _DEFAULT_DTYPE = dt.type


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default tensor dtype (used by gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """N-dimensional value container, optionally carrying a gradient.

    `data` is always a contiguous row-major array of the default real
    dtype.  `grad`, once populated by a backward pass, has the same shape.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        array = np.asarray(data, dtype=default_dtype())
        if array.ndim and not array.flags["C_CONTIGUOUS"]:
            array = np.ascontiguousarray(array)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    """A leaf tensor that will receive gradients."""
    return Tensor(data, requires_grad=True)


class Node:
    """One recorded operation: kind, operand handles and a backward closure.

    `backward_fn` maps the gradient at the node's output to a tuple of
    gradients, one per input (None for inputs that need no gradient).
    """

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


_GRAPH_STACK: list["Graph"] = []


class Graph:
    """Append-only tape of operations, activated as a context manager.

    A graph belongs to one logical thread of execution; it is never shared
    across concurrent forward/backward passes.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _GRAPH_STACK.pop()
        assert popped is self, "graph stack corrupted"

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable[[np.ndarray], tuple]) -> None:
        output.requires_grad = True
        self.nodes.append(Node(op, inputs, output, backward_fn))


def active_graph() -> Optional[Graph]:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def record_if_needed(op: str, inputs: Sequence[Tensor], output: Tensor,
                     backward_fn: Callable[[np.ndarray], tuple]) -> None:
    """Record a node when a graph is active and any input carries gradients."""
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        graph.record(op, inputs, output, backward_fn)


def backward_pass(loss: Tensor, graph: Graph,
                  params: Iterable[Tensor] = ()) -> None:
    """Populate gradients of everything reachable from a scalar loss.

    Nodes are visited exactly once, in reverse append order.  Gradients
    accumulate, so a tensor consumed by several operations receives the sum
    of its downstream contributions.  Parameters in `params` that the loss
    never touched end up with an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward_pass needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        input_grads = node.backward_fn(out_grad)
        for tensor_in, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor_in.requires_grad:
                continue
            if tensor_in.grad is None:
                tensor_in.grad = np.zeros_like(tensor_in.data)
            tensor_in.grad += grad
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
