"""Dense tensor with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array and, when an operation is applied to
tensors that require gradients, records its inputs and a gradient rule.
``backward()`` on a scalar loss walks the recorded graph once in reverse
topological order and accumulates gradients into every reachable tensor
with ``requires_grad`` set. Gradients sum across fan-out, which is what
makes weight-shared (Siamese) paths work without special casing.

Layout convention: channels last, ``[batch, W, H, D, channels]`` for
volumes and ``[batch, W, H, channels]`` for planar maps.

Training arrays are float32; gradient verification runs in float64.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GraphError, ShapeError


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # float32 unless the caller passes a float64 array or asks for it
        keep64 = isinstance(data, np.ndarray) and data.dtype == np.float64
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float32 and not keep64:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._prev: tuple = ()
        self._backward: Optional[Callable[[], None]] = None
        self._done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # -- gradient plumbing ---------------------------------------------------

    def accumulate_grad(self, g: np.ndarray) -> None:
        """Add ``g`` into this tensor's grad buffer (fan-out sums)."""
        if not self.requires_grad:
            return
        if self.grad is None:
            # first write copies so later += never aliases the source
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Populate grads of every tensor this scalar was computed from.

        Raises GraphError if the tensor is not scalar, was never attached
        to a graph, or backward already ran from it.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() requires a scalar, got shape {self.data.shape}")
        if not self._prev and not self.requires_grad:
            raise GraphError("backward() on a tensor detached from any graph")
        if self._done:
            raise GraphError("backward() already ran from this tensor; rebuild the graph")
        self._done = True

        # Iterative post-order DFS: children before parents in `topo`.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- minimal arithmetic used by the models -------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)


def make_op_output(data: np.ndarray, inputs: Sequence[Optional[Tensor]],
                   backward: Callable[[Tensor], None]) -> Tensor:
    """Wrap an op result, recording inputs and the gradient rule.

    ``backward`` receives the output tensor and must accumulate into the
    inputs' grads. Recording is skipped entirely when no input requires a
    gradient, which keeps inference forward passes pure and cheap.
    """
    live = tuple(t for t in inputs if t is not None)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in live))
    if out.requires_grad:
        out._prev = live
        out._backward = lambda: backward(out)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (residual joins)."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(out: Tensor) -> None:
        a.accumulate_grad(out.grad)
        b.accumulate_grad(out.grad)

    return make_op_output(a.data + b.data, (a, b), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def backward(out: Tensor) -> None:
        x.accumulate_grad(np.full_like(x.data, out.grad.reshape(-1)[0]))

    return make_op_output(np.asarray(x.data.sum(), dtype=x.dtype).reshape(()), (x,), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) against a constant array; scalar projection for checks."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum: weight shape {w.shape} != tensor shape {x.shape}")

    def backward(out: Tensor) -> None:
        x.accumulate_grad(w * out.grad.reshape(-1)[0])

    return make_op_output(np.asarray((x.data * w).sum(), dtype=x.dtype).reshape(()), (x,), backward)
