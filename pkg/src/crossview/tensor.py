"""Reverse-mode automatic differentiation on numpy arrays.

Every operation appends its output node to an implicit tape: nodes carry a
monotonically increasing sequence number assigned at creation, and
``Tensor.backward`` replays reachable nodes in exact reverse execution order,
accumulating (never overwriting) adjoints into ``.grad``.

Conventions:
  * arrays are float64 by default; float32 is preserved if supplied,
  * gradients are plain numpy arrays with the same shape as ``.data``,
  * non-Tensor operands (python scalars, numpy arrays) are treated as
    constants and receive no gradient,
  * a single tape is not thread-safe; run one backward pass at a time.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf, expit as _expit

from .errors import ContractError, NumericError

_SEQ = itertools.count()
_GRAD_ENABLED = True

__all__ = [
    "Tensor",
    "no_grad",
    "make_rng",
    "concat",
    "gather_rows",
    "softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "logsumexp",
]


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seeded counter-based generator (Philox, 64-bit).

    Extra ``stream`` integers derive independent streams from the same seed,
    e.g. ``make_rng(seed, sample_index)`` — deterministic regardless of the
    order or thread in which streams are consumed.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the autodiff graph wrapping a numpy array."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable[[], None] | None = None
        self._seq = next(_SEQ)

    # ------------------------------------------------------------------ meta
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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    # -------------------------------------------------------------- backward
    def backward(self) -> None:
        """Backpropagate from a scalar loss through the recorded tape."""
        if self.data.shape != ():
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq, reverse=True)
        self.grad = np.ones_like(self.data)
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward()
        # Release the tape.  The backward closures capture their output node,
        # which creates reference cycles (node -> closure -> node) that plain
        # refcounting cannot free; at training scale the per-step graphs are
        # large enough that waiting for the cycle collector exhausts memory.
        # Dropping the closures and parent links here frees every interior
        # node (and its activation buffer) as soon as the loss goes out of
        # scope, while leaf gradients stay untouched.
        for node in nodes:
            node._backward = None
            node._parents = ()

    # ------------------------------------------------------------ op plumbing
    @staticmethod
    def _node(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Create an interior node; records the backward closure if any parent
        participates in differentiation and grad mode is on."""
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    # ------------------------------------------------------------ arithmetic
    def __add__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data + other.data

            def _bw():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(out.grad, other.shape))

            out = self._node(out_data, (self, other), _bw)
            return out
        const = _as_array(other)
        out_data = self.data + const

        def _bw_c():
            self._accumulate(_unbroadcast(out.grad, self.shape))

        out = self._node(out_data, (self,), _bw_c)
        return out

    __radd__ = __add__

    def __neg__(self):
        def _bw():
            self._accumulate(-out.grad)

        out = self._node(-self.data, (self,), _bw)
        return out

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self + (-other)
        return self + (-_as_array(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data * other.data

            def _bw():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(out.grad * self.data, other.shape))

            out = self._node(out_data, (self, other), _bw)
            return out
        const = _as_array(other)
        out_data = self.data * const

        def _bw_c():
            self._accumulate(_unbroadcast(out.grad * const, self.shape))

        out = self._node(out_data, (self,), _bw_c)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data / other.data

            def _bw():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad / other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(
                        _unbroadcast(-out.grad * self.data / other.data**2, other.shape)
                    )

            out = self._node(out_data, (self, other), _bw)
            return out
        return self * (1.0 / _as_array(other))

    def __rtruediv__(self, other):
        const = _as_array(other)
        out_data = const / self.data

        def _bw():
            self._accumulate(_unbroadcast(-out.grad * const / self.data**2, self.shape))

        out = self._node(out_data, (self,), _bw)
        return out

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ContractError("matmul requires operands with ndim >= 2")
        out_data = self.data @ other.data

        def _bw():
            if self.requires_grad:
                g = out.grad @ other.data.swapaxes(-1, -2)
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                g = self.data.swapaxes(-1, -2) @ out.grad
                other._accumulate(_unbroadcast(g, other.shape))

        out = self._node(out_data, (self, other), _bw)
        return out

    # ------------------------------------------------------------ shape ops
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape

        def _bw():
            self._accumulate(out.grad.reshape(old))

        out = self._node(self.data.reshape(shape), (self,), _bw)
        return out

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))

        def _bw():
            self._accumulate(out.grad.transpose(inverse))

        out = self._node(self.data.transpose(axes), (self,), _bw)
        return out

    def swapaxes(self, a: int, b: int) -> "Tensor":
        def _bw():
            self._accumulate(out.grad.swapaxes(a, b))

        out = self._node(self.data.swapaxes(a, b), (self,), _bw)
        return out

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ContractError(".T is defined for 2-D tensors only")
        return self.swapaxes(0, 1)

    def broadcast_to(self, shape: tuple[int, ...]) -> "Tensor":
        old = self.shape

        def _bw():
            self._accumulate(_unbroadcast(out.grad, old))

        out = self._node(np.broadcast_to(self.data, shape).copy(), (self,), _bw)
        return out

    def __getitem__(self, index) -> "Tensor":
        def _bw():
            g = np.zeros_like(self.data)
            g[index] += out.grad
            self._accumulate(g)

        out = self._node(self.data[index], (self,), _bw)
        return out

    # ------------------------------------------------------------ reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        axes = axis if isinstance(axis, tuple) else (axis,) if axis is not None else None

        def _bw():
            g = out.grad
            if axes is not None and not keepdims:
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g, self.shape).copy())

        out = self._node(out_data, (self,), _bw)
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    # ------------------------------------------------------------ elementwise
    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def _bw():
            self._accumulate(out.grad * out_data)

        out = self._node(out_data, (self,), _bw)
        return out

    def log(self) -> "Tensor":
        def _bw():
            self._accumulate(out.grad / self.data)

        out = self._node(np.log(self.data), (self,), _bw)
        return out

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def _bw():
            self._accumulate(out.grad * (0.5 / out_data))

        out = self._node(out_data, (self,), _bw)
        return out


# ---------------------------------------------------------------- free ops
def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(tensors)
    sizes = [t.shape[axis] for t in parts]
    out_data = np.concatenate([t.data for t in parts], axis=axis)

    def _bw():
        offset = 0
        for t, n in zip(parts, sizes):
            if t.requires_grad:
                sl = [slice(None)] * out_data.ndim
                sl[axis] = slice(offset, offset + n)
                t._accumulate(out.grad[tuple(sl)])
            offset += n

    out = Tensor._node(out_data, parts, _bw)
    return out


def gather_rows(t: Tensor, index: np.ndarray) -> Tensor:
    """Pick one element per row of a 2-D tensor: out[i] = t[i, index[i]]."""
    if t.ndim != 2:
        raise ContractError("gather_rows expects a 2-D tensor")
    idx = np.asarray(index)
    rows = np.arange(t.shape[0])
    out_data = t.data[rows, idx]

    def _bw():
        g = np.zeros_like(t.data)
        np.add.at(g, (rows, idx), out.grad)
        t._accumulate(g)

    out = Tensor._node(out_data, (t,), _bw)
    return out


def softmax(t: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis.

    The shift constant is the (detached) row max, so values like 1000 do not
    overflow; rows of the result sum to 1. Non-finite input is a hard error
    rather than silent NaN propagation.
    """
    if not np.all(np.isfinite(t.data)):
        raise NumericError("softmax received non-finite input")
    shift = t.data.max(axis=-1, keepdims=True)
    e = (t - shift).exp()
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp(t: Tensor) -> Tensor:
    """log(sum(exp(t))) over the last axis with max-shift stability."""
    shift = t.data.max(axis=-1, keepdims=True)
    return (t - shift).exp().sum(axis=-1, keepdims=True).log() + shift


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis (population variance), then scale/shift."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / (var + eps).sqrt()
    return normed * gamma + beta


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    e = _erf(x.data / np.sqrt(2.0))
    out_data = 0.5 * x.data * (1.0 + e)

    def _bw():
        pdf = np.exp(-0.5 * x.data**2) / np.sqrt(2.0 * np.pi)
        x._accumulate(out.grad * (0.5 * (1.0 + e) + x.data * pdf))

    out = Tensor._node(out_data, (x,), _bw)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out_data = _expit(x.data)

    def _bw():
        x._accumulate(out.grad * out_data * (1.0 - out_data))

    out = Tensor._node(out_data, (x,), _bw)
    return out
