"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Every differentiable op returns a new :class:`Tensor` whose ``node`` records
the inputs and a closure mapping the output gradient to input gradients.
Node ids come from a monotone counter, so sorting reachable nodes by id is a
valid topological order for the backward sweep.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, SGD updates)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("id", "inputs", "output", "backward_fn", "op")

    def __init__(self, inputs, output, backward_fn, op):
        self.id = next(_node_ids)
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.op = op

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r})"


class Tape:
    """Optional recorder of every node created while it is active.

    Backward does not need an explicit tape (nodes hang off their outputs),
    but an active tape exposes the recorded op sequence for inspection.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """Dense array that can take part in a gradient graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        # python scalars/lists default to float32; float ndarrays keep their precision
        if dtype is None and (not isinstance(data, np.ndarray) or not np.issubdtype(arr.dtype, np.floating)):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
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

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(tuple(inputs), out, backward_fn, op)
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(out.node)
    return out


# -- elementwise and structural ops ---------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-axis bias broadcast over ``a``."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.shape != b.shape and a.shape[a.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add: cannot combine shapes {a.shape} and {b.shape}")

    def bw(g):
        gb = g
        if b.shape != g.shape:
            gb = g.reshape((-1,) + b.shape).sum(axis=0)
        return g, gb

    return _make(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shape tensors, or tensor times a scalar."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim != 0:
            raise DimensionError(f"mul: non-scalar constant of shape {c.shape}")
        return _make(a.data * c, (a,), lambda g: (g * c,), "scale")
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2 * a.data * g,), "square")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).astype(a.dtype),), "sum")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[m, k] @ b[k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to an ``n x c x h x w`` tensor."""
    if x.ndim != 4 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_channel_bias: shapes {x.shape} and {bias.shape}")
    return _make(x.data + bias.data[None, :, None, None], (x, bias),
                 lambda g: (g, g.sum(axis=(0, 2, 3))), "channel_bias")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an ``n x c x h x w`` tensor."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects n x c x h x w, got {x.shape}")
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape) / (h * w)).astype(x.dtype),

    return _make(x.data.mean(axis=(2, 3), dtype=x.dtype), (x,), bw, "gap")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (``c x h x w`` or ``n x c x h x w``) with ``kernels``.

    Raises DimensionError when channels disagree or the kernel does not fit
    the padded input.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding nonnegative")
    single = x.ndim == 3
    if single:
        out = conv2d(reshape(x, (1,) + x.shape), kernels, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks input {x.shape}, kernels {kernels.shape}")
    n, c_in, h, w = x.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise DimensionError(f"conv2d: input {x.shape} has {c_in} channels, kernels {kernels.shape} expect {kc}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kernels.shape} larger than padded input {(c_in, hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # windows: n, c, ho, wo, kh, kw
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", win, kernels.data, optimize=True).astype(x.dtype, copy=False)

    def bw(g):
        dk = np.einsum("nohw,nchwij->ocij", g, win, optimize=True).astype(kernels.dtype, copy=False)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    np.einsum("nohw,oc->nchw", g, kernels.data[:, :, i, j], optimize=True)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return dx, dk

    return _make(out, (x, kernels), bw, "conv2d")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[label]``, stabilised by row max."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects n x c logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"softmax_cross_entropy: {n} logit rows but {labels.shape[0]} labels")
    if n == 0:
        raise ContractError("softmax_cross_entropy of an empty batch is undefined")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label out of range [0, {c}): {labels[(labels < 0) | (labels >= c)][0]}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean(dtype=logits.dtype)

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / n)).astype(logits.dtype),

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_ce")


def backward(loss: Tensor) -> None:
    """Accumulate ``dloss/dt`` into ``t.grad`` for every reachable ``requires_grad`` tensor."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Node] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        nd = t.node
        if nd is None or nd.id in nodes:
            continue
        nodes[nd.id] = nd
        stack.extend(nd.inputs)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        nd = nodes[nid]
        g = grads.pop(id(nd.output), None)
        if g is None:
            continue
        _accumulate(nd.output, g)
        for inp, gi in zip(nd.inputs, nd.backward_fn(g)):
            if not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate(inp, gi)
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g
