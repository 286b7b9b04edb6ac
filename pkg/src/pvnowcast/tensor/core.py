"""Dense tensor with reverse-mode automatic differentiation.

Every differentiable op creates a :class:`Node` stamped with a monotonically
increasing tape index. :func:`backward` collects the nodes reachable from a
scalar loss and replays them in reverse recording order, so each node runs
exactly once and gradients reaching a shared input are summed.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_tape_counter = itertools.count()
_grad_enabled = True
_default_dtype = np.float32
# Populated only inside record_branches(); used by the gradient checker to
# detect finite-difference probes that cross a ReLU/max-pool/abs kink.
_branch_log: Optional[list] = None


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


def default_dtype():
    return _default_dtype


def set_default_dtype(precision: str) -> None:
    global _default_dtype
    if precision not in DTYPES:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}")
    _default_dtype = DTYPES[precision]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for newly created tensors."""
    global _default_dtype
    old = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = old


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def record_branches():
    """Collect a signature of every piecewise branch decision made inside."""
    global _branch_log
    old = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = old


def log_branch(mask: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.asarray(mask).tobytes())


class Node:
    """One recorded operation on the tape."""

    __slots__ = ("index", "op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.index = next(_tape_counter)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _default_dtype
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: expected a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # Arithmetic sugar; the rules live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(ops.as_tensor(other, like=self), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.getitem(self, key)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)

    def backward(self) -> None:
        backward(self)


def make_output(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, recording it on the tape if any input needs grad."""
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        out.node = Node(op, inputs, backward_fn)
    return out


def _collect(loss: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append((node, t))
        stack.extend(node.inputs)
    nodes.sort(key=lambda pair: pair[0].index, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("backward on a tensor that does not require grad (detached graph)")
    if loss.node is None:
        # A bare leaf: its own gradient is one.
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    if loss.node.consumed:
        raise BackwardError("backward already ran on this graph; re-run the forward pass first")

    nodes = _collect(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node, out in nodes:
        g = grads.pop(id(out), None)
        if node.consumed:
            raise BackwardError("graph shares nodes with an already back-propagated graph")
        node.consumed = True
        if g is None:
            node.backward_fn = None
            continue
        in_grads = node.backward_fn(g)
        node.backward_fn = None
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise BackwardError(f"{node.op}: gradient shape {ig.shape} != input shape {inp.shape}")
            if inp.node is None:
                inp.grad = ig.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
