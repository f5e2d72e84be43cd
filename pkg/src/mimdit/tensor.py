"""Dense float64 tensors with reverse-mode automatic differentiation.

Tensors wrap a C-contiguous float64 numpy array and record the operation
that produced them, so a backward pass over the implied computation graph
can fill gradient slots. Everything runs in float64; desk-scale sizes make
precision cheaper than speed, and finite-difference checks need headroom.

Tensors are immutable once created except for their ``grad`` slot. Distinct
graphs may be evaluated on distinct threads; a single graph is
single-threaded.
"""

import itertools
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import (
    ContractError,
    DimensionError,
    ParameterError,
    PersistenceError,
)

_NODE_COUNTER = itertools.count()

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

LAYERNORM_EPS = 1e-5


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "backward_fn", "node_id")

    def __init__(self, values, requires_grad=False, op=None, parents=(), backward_fn=None):
        data = np.asarray(values, dtype=np.float64)
        if data.size == 0:
            raise DimensionError(f"tensor extents must all be >= 1, got shape {data.shape}")
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.node_id = next(_NODE_COUNTER)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """A leaf copy of this tensor's values, cut from the graph."""
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        head = np.array2string(self.data, precision=4, threshold=8)
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}, data={head})"

    # Operator sugar; python scalars are wrapped as constant tensors.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _result(data, parents, op, backward_fn):
    requires = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=requires,
        op=op,
        parents=parents,
        backward_fn=backward_fn if requires else None,
    )


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Graph traversal


@dataclass(frozen=True)
class GraphNode:
    op: str
    input_ids: tuple
    output: Tensor


@dataclass(frozen=True)
class ComputationGraph:
    """Reachable nodes of a graph in a topological order (inputs precede uses)."""

    nodes: list


def _topo_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def computation_graph(root):
    nodes = [
        GraphNode(op=t.op if t.op is not None else "leaf", input_ids=tuple(p.node_id for p in t.parents), output=t)
        for t in _topo_order(root)
    ]
    return ComputationGraph(nodes=nodes)


def backward(loss):
    """Fill ``grad`` for every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively across fan-out; leaves keep whatever was
    already in their slot, so callers zero grads between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ---------------------------------------------------------------------------
# Elementwise arithmetic (numpy broadcasting; gradients un-broadcast)


def _broadcast_op(a, b, op_name, forward, grad_a, grad_b):
    try:
        data = forward(a.data, b.data)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape} for {op_name}")

    def backward_fn(grad):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(grad_a(grad), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(grad_b(grad), b.shape))

    return _result(data, (a, b), op_name, backward_fn)


def add(a, b):
    return _broadcast_op(a, b, "add", lambda x, y: x + y, lambda g: g, lambda g: g)


def sub(a, b):
    return _broadcast_op(a, b, "sub", lambda x, y: x - y, lambda g: g, lambda g: -g)


def mul(a, b):
    return _broadcast_op(a, b, "mul", lambda x, y: x * y, lambda g: g * b.data, lambda g: g * a.data)


def div(a, b):
    return _broadcast_op(
        a,
        b,
        "div",
        lambda x, y: x / y,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def neg(a):
    def backward_fn(grad):
        _accumulate(a, -grad)

    return _result(-a.data, (a,), "neg", backward_fn)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul requires rank-2 tensors, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward_fn(grad):
        if a.requires_grad:
            _accumulate(a, grad @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ grad)

    return _result(data, (a, b), "matmul", backward_fn)


def _normalize_axis(axis, rank, op_name):
    if not -rank <= axis < rank:
        raise DimensionError(f"{op_name} axis {axis} out of range for rank {rank}")
    return axis % rank


def softmax(x, axis):
    axis = _normalize_axis(axis, x.data.ndim, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(grad):
        inner = (grad * out).sum(axis=axis, keepdims=True)
        _accumulate(x, out * (grad - inner))

    return _result(out, (x,), "softmax", backward_fn)


def topk(x, k):
    """Indices and values of the k largest entries of a 1-D tensor.

    Ties break toward the lowest index (stable sort on descending value);
    routing tests rely on this determinism. Not differentiable.
    """
    if x.data.ndim != 1:
        raise DimensionError(f"topk requires a rank-1 tensor, got shape {x.shape}")
    n = x.data.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"topk k={k} out of range for length {n}")
    order = np.argsort(-x.data, kind="stable")[:k]
    indices = [int(i) for i in order]
    values = [float(x.data[i]) for i in indices]
    return indices, values


def gather(x, indices):
    """Select entries of a 1-D tensor; gradient scatter-adds into the source."""
    if x.data.ndim != 1:
        raise DimensionError(f"gather requires a rank-1 tensor, got shape {x.shape}")
    idx = [int(i) for i in indices]
    n = x.data.shape[0]
    if len(idx) == 0:
        raise ParameterError("gather requires at least one index")
    for i in idx:
        if not 0 <= i < n:
            raise ParameterError(f"gather index {i} out of range for length {n}")
    idx_arr = np.asarray(idx, dtype=np.intp)
    data = x.data[idx_arr]

    def backward_fn(grad):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            np.add.at(buf, idx_arr, grad)
            _accumulate(x, buf)

    return _result(data, (x,), "gather", backward_fn)


def layernorm(x, gain, bias):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layernorm affine shapes {gain.shape}/{bias.shape} do not match last extent {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward_fn(grad):
        gxhat = grad * gain.data
        if x.requires_grad:
            term = gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, term * inv)
        lead = tuple(range(x.data.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, (grad * xhat).sum(axis=lead))
        if bias.requires_grad:
            _accumulate(bias, grad.sum(axis=lead))

    return _result(out, (x, gain, bias), "layernorm", backward_fn)


# ---------------------------------------------------------------------------
# Nonlinearities


def gelu(x):
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def backward_fn(grad):
        density = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        _accumulate(x, grad * (phi + x.data * density))

    return _result(out, (x,), "gelu", backward_fn)


def sigmoid(x):
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward_fn(grad):
        _accumulate(x, grad * out * (1.0 - out))

    return _result(out, (x,), "sigmoid", backward_fn)


def sqrt(x):
    if np.any(x.data < 0):
        raise ParameterError("sqrt requires nonnegative input")
    out = np.sqrt(x.data)

    def backward_fn(grad):
        _accumulate(x, grad * 0.5 / out)

    return _result(out, (x,), "sqrt", backward_fn)


# ---------------------------------------------------------------------------
# Reductions


def _reduction_axes(axis, rank, op_name):
    if axis is None:
        return tuple(range(rank))
    if isinstance(axis, int):
        axis = (axis,)
    axes = sorted(_normalize_axis(a, rank, op_name) for a in axis)
    if len(set(axes)) != len(axes):
        raise DimensionError(f"{op_name} axes {axis} contain duplicates")
    return tuple(axes)


def tensor_sum(x, axis=None, keepdims=False):
    axes = _reduction_axes(axis, x.data.ndim, "sum")
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(grad):
        g = grad
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _result(data, (x,), "sum", backward_fn)


def tensor_mean(x, axis=None, keepdims=False):
    axes = _reduction_axes(axis, x.data.ndim, "mean")
    count = int(np.prod([x.data.shape[a] for a in axes])) if axes else 1
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def backward_fn(grad):
        g = grad
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy() / count)

    return _result(data, (x,), "mean", backward_fn)


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s < 1 for s in shape):
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    data = x.data.reshape(shape)

    def backward_fn(grad):
        _accumulate(x, grad.reshape(x.data.shape))

    return _result(data, (x,), "reshape", backward_fn)


def transpose(x, axes=None):
    rank = x.data.ndim
    if axes is None:
        axes = tuple(reversed(range(rank)))
    else:
        axes = tuple(int(a) for a in axes)
        if sorted(axes) != list(range(rank)):
            raise DimensionError(f"transpose axes {axes} are not a permutation for rank {rank}")
    inverse = np.argsort(axes)
    data = np.ascontiguousarray(np.transpose(x.data, axes))

    def backward_fn(grad):
        _accumulate(x, np.ascontiguousarray(np.transpose(grad, inverse)))

    return _result(data, (x,), "transpose", backward_fn)


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat requires at least one tensor")
    rank = tensors[0].data.ndim
    axis = _normalize_axis(axis, rank, "concat")
    for t in tensors[1:]:
        if t.data.ndim != rank:
            raise DimensionError(f"concat rank mismatch: {tensors[0].shape} vs {t.shape}")
        for a in range(rank):
            if a != axis and t.data.shape[a] != tensors[0].data.shape[a]:
                raise DimensionError(f"concat off-axis extents differ: {tensors[0].shape} vs {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(grad):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * rank
                index[axis] = slice(int(start), int(stop))
                _accumulate(t, np.ascontiguousarray(grad[tuple(index)]))

    return _result(data, tuple(tensors), "concat", backward_fn)


def split(x, sizes, axis):
    rank = x.data.ndim
    axis = _normalize_axis(axis, rank, "split")
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes) or sum(sizes) != x.data.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not cover extent {x.data.shape[axis]}")
    offsets = np.cumsum([0] + sizes)
    parts = []
    for start, stop in zip(offsets[:-1], offsets[1:]):
        index = [slice(None)] * rank
        index[axis] = slice(int(start), int(stop))
        index = tuple(index)
        data = np.ascontiguousarray(x.data[index])

        def backward_fn(grad, index=index):
            if x.requires_grad:
                buf = np.zeros_like(x.data)
                buf[index] = grad
                _accumulate(x, buf)

        parts.append(_result(data, (x,), "split", backward_fn))
    return parts


def roll(x, shift, axis):
    data = np.roll(x.data, shift, axis=axis)

    def backward_fn(grad):
        neg_shift = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
        _accumulate(x, np.roll(grad, neg_shift, axis=axis))

    return _result(data, (x,), "roll", backward_fn)


def conv2d(x, kernel):
    """Same-size 2-D convolution of a [C,H,W] tensor with one [kh,kw] kernel.

    Zero padding; the kernel is shared across channels. Kernel extents must
    be odd so the output stays centered.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d requires a [C,H,W] tensor, got shape {x.shape}")
    if kernel.data.ndim != 2:
        raise DimensionError(f"conv2d kernel must be rank-2, got shape {kernel.shape}")
    kh, kw = kernel.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ParameterError(f"conv2d kernel extents must be odd, got {kernel.shape}")
    c, h, w = x.data.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros_like(x.data)
    for u in range(kh):
        for v in range(kw):
            out += kernel.data[u, v] * padded[:, u : u + h, v : v + w]

    def backward_fn(grad):
        if x.requires_grad:
            gpad = np.zeros_like(padded)
            for u in range(kh):
                for v in range(kw):
                    gpad[:, u : u + h, v : v + w] += kernel.data[u, v] * grad
            _accumulate(x, np.ascontiguousarray(gpad[:, ph : ph + h, pw : pw + w]))
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for u in range(kh):
                for v in range(kw):
                    gk[u, v] = (grad * padded[:, u : u + h, v : v + w]).sum()
            _accumulate(kernel, gk)

    return _result(out, (x, kernel), "conv2d", backward_fn)


# ---------------------------------------------------------------------------
# Serialization: little-endian [rank u32][extents u32 ...][data f64 ...]


def write_tensor(stream, tensor):
    shape = tensor.data.shape
    stream.write(struct.pack("<I", len(shape)))
    if shape:
        stream.write(struct.pack(f"<{len(shape)}I", *shape))
    stream.write(tensor.data.astype("<f8", copy=False).tobytes())


def _read_exact(stream, n):
    buf = stream.read(n)
    if len(buf) != n:
        raise PersistenceError(f"truncated tensor stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(stream):
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(stream, 8 * count), dtype="<f8").astype(np.float64)
    return Tensor(data.reshape(shape))
