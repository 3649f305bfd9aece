"""Dense float32 tensors with reverse-mode automatic differentiation.

The computation graph is implicit: every operation stores its parent
tensors and a backward closure on its output. ``backward`` on a scalar
walks the graph once in reverse topological order, accumulating gradients
into every reachable tensor flagged ``requires_grad``. Leaves that do not
require gradients never allocate a gradient buffer; gradients still flow
*through* the operations they participate in (a frozen weight matrix in a
matmul does not block the gradient of the other operand).

Conventions:
  - everything is float32, row-major;
  - no broadcasting beyond equal leading batch dimensions in matmul;
    shape adjustments are explicit (reshape / broadcast_rows);
  - graph construction and backward are single-threaded per computation.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphError, ShapeError

_F32 = np.float32


class Tensor:
    """A dense float32 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_F32)
        if not arr.flags["C_CONTIGUOUS"]:  # 0-d stays 0-d; ascontiguousarray would promote it
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Copy of the value with no graph history and no gradient."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Wrap an op result; the closure is kept only if a parent needs grads."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _as2d_name(t: Tensor) -> str:
    return str(tuple(t.shape))


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batch dims (if any) must be equal, inner dims agree."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {_as2d_name(a)} @ {_as2d_name(b)}")
    if a.data.shape[-1] != b.data.shape[-2] or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {_as2d_name(a)} @ {_as2d_name(b)}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b._accumulate(a.data.swapaxes(-1, -2) @ g)

    return _node(out_data, (a, b), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stochastic softmax over the last dimension, max-stabilized."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            x._accumulate(y * (g - inner))

    return _node(y, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last dimension, then scale and shift."""
    n = x.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layernorm gain/bias must be length {n}, got {_as2d_name(gain)}/{_as2d_name(bias)}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _F32(eps))
    xhat = centered * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx_hat = g * gain.data
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gx_hat - m1 - xhat * m2))

    return _node(y, (x, gain, bias), backward)


def pointwise(x: Tensor, kind: str, other: Tensor | None = None, factor: float | None = None) -> Tensor:
    """Elementwise op dispatcher: relu, gelu_quick, add (needs other),
    scale (needs factor)."""
    if kind == "relu":
        return relu(x)
    if kind == "gelu_quick":
        return gelu_quick(x)
    if kind == "add":
        if other is None:
            raise ShapeError("pointwise add needs a second tensor")
        return add(x, other)
    if kind == "scale":
        if factor is None:
            raise ShapeError("pointwise scale needs a factor")
        return scale(x, factor)
    raise ShapeError(f"unknown pointwise kind {kind!r}")


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, _F32(0))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _node(y, (x,), backward)


def gelu_quick(x: Tensor) -> Tensor:
    """Sigmoid-approximated gelu: x * sigmoid(1.702 x)."""
    s = _F32(1) / (_F32(1) + np.exp(_F32(-1.702) * x.data))
    y = x.data * s

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (s + x.data * s * (_F32(1) - s) * _F32(1.702)))

    return _node(y, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {_as2d_name(a)} vs {_as2d_name(b)}")
    y = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(y, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    f = _F32(factor)
    y = x.data * f

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * f)

    return _node(y, (x,), backward)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product, shapes equal."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {_as2d_name(a)} vs {_as2d_name(b)}")
    y = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _node(y, (a, b), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]; scalar output."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, C] logits, got {_as2d_name(logits)}")
    b, c = logits.data.shape
    labels = list(labels)
    if len(labels) != b:
        raise ShapeError(f"cross_entropy got {len(labels)} labels for batch {b}")
    for lab in labels:
        if not 0 <= int(lab) < c:
            raise IndexError(f"label {lab} out of range for {c} classes")
    idx = np.asarray(labels, dtype=np.int64)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = _F32(-(logp[np.arange(b), idx]).mean())

    def backward(g):
        if logits.requires_grad:
            grad = np.exp(logp)
            grad[np.arange(b), idx] -= _F32(1)
            logits._accumulate(grad * (g / _F32(b)))

    return _node(np.asarray(loss), (logits,), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements; scalar output."""
    y = np.asarray(x.data.sum(dtype=_F32))

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, _F32(g)))

    return _node(y, (x,), backward)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows of a [n, d] tensor -> [1, d]."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows expects [n, d], got {_as2d_name(x)}")
    n = x.data.shape[0]
    y = x.data.mean(axis=0, keepdims=True)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.repeat(g / _F32(n), n, axis=0))

    return _node(y, (x,), backward)


def concat_rows(parts) -> Tensor:
    """Stack along axis 0; 1-D inputs are treated as single rows."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    arrs = [p.data if p.data.ndim == 2 else p.data.reshape(1, -1) for p in parts]
    width = arrs[0].shape[1]
    for p, a in zip(parts, arrs):
        if a.ndim != 2 or a.shape[1] != width:
            raise ShapeError(f"concat_rows width mismatch: {_as2d_name(p)} vs width {width}")
    y = np.concatenate(arrs, axis=0)
    row_counts = [a.shape[0] for a in arrs]

    def backward(g):
        at = 0
        for p, rows in zip(parts, row_counts):
            if p.requires_grad:
                p._accumulate(g[at : at + rows].reshape(p.data.shape))
            at += rows

    return _node(y, tuple(parts), backward)


def select_rows(x: Tensor, indices) -> Tensor:
    """Gather rows by index (repeats allowed) -> [len(indices), d]."""
    if x.data.ndim != 2:
        raise ShapeError(f"select_rows expects [n, d], got {_as2d_name(x)}")
    idx = np.asarray(list(indices), dtype=np.int64)
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for {n} rows")
    y = x.data[idx]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x._accumulate(gx)

    return _node(y, (x,), backward)


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a [1, d] row n times -> [n, d]."""
    if x.data.ndim != 2 or x.data.shape[0] != 1:
        raise ShapeError(f"broadcast_rows expects [1, d], got {_as2d_name(x)}")
    y = np.repeat(x.data, n, axis=0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.sum(axis=0, keepdims=True))

    return _node(y, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"cannot reshape {_as2d_name(x)} to {shape}")
    y = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return _node(y, (x,), backward)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for rank {x.data.ndim}")
    inverse = np.argsort(axes)
    y = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.transpose(inverse))

    return _node(y, (x,), backward)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row of [n, d] to unit L2 norm. Rows must be nonzero."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects [n, d], got {_as2d_name(x)}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    y = x.data / norms

    def backward(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=1, keepdims=True)
            x._accumulate((g - y * inner) / norms)

    return _node(y, (x,), backward)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list:
    """Iterative DFS postorder: parents before consumers, each node once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
