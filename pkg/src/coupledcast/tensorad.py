"""Dense float64 tensors with reverse-mode automatic differentiation.

Only what the coupled transformer needs is provided. Every op records its
inputs and a backward rule on the output tensor; :meth:`Tensor.backward`
walks the resulting graph once in reverse topological order.

Broadcasting is deliberately absent, apart from the bias-add inside
:func:`linear`. Mismatched shapes raise :class:`ShapeError`.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "tensor", "parameter", "matmul", "add", "sub",
    "mul", "scale", "neg", "exp", "square", "concat", "split", "layer_norm",
    "softmax", "gelu", "mean", "total", "reshape", "transpose", "linear",
    "scaled_dot_product_attention", "mse_loss", "gaussian_reparam",
    "gradcheck", "save_checkpoint", "load_checkpoint", "CheckpointError",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


def _shape_error(op, *shapes):
    raise ShapeError(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """A node in the dynamic graph.

    Parameters
    ----------
    data : array_like
        Values, stored as a C-contiguous float64 array.
    requires_grad : bool
        Leaves with this flag receive ``.grad`` after :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Populate ``.grad`` on every graph node that requires it."""
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _result(data, parents, op, backward):
    need = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=need, _parents=parents if need else (), op=op)
    if need:
        out._backward = backward
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data):
    """Constant tensor (no gradient)."""
    return Tensor(data)


def parameter(data):
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        _shape_error("add", a.shape, b.shape)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        _shape_error("sub", a.shape, b.shape)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        _shape_error("mul", a.shape, b.shape)

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), "mul", backward)


def scale(a, c):
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), "scale", backward)


def neg(a):
    return scale(a, -1.0)


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)

    return _result(out, (a,), "exp", backward)


def square(a):
    def backward(g):
        _accumulate(a, 2.0 * g * a.data)

    return _result(a.data * a.data, (a,), "square", backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner
        _accumulate(a, g * d)

    return _result(out, (a,), "gelu", backward)


# -- reductions and shape ----------------------------------------------------

def mean(a, axis=None):
    """Mean over all elements (scalar result) or over one axis."""
    if axis is None:
        n = a.data.size

        def backward(g):
            _accumulate(a, np.full(a.shape, float(g.reshape(())) / n))

        return _result(np.array(a.data.mean()), (a,), "mean", backward)
    axis = axis % a.ndim
    n = a.shape[axis]

    def backward(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape) / n)

    return _result(a.data.mean(axis=axis), (a,), "mean", backward)


def total(a):
    """Sum of all elements."""
    def backward(g):
        _accumulate(a, np.full(a.shape, float(g.reshape(()))))

    return _result(np.array(a.data.sum()), (a,), "sum", backward)


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        _shape_error("reshape", a.shape, shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(out, (a,), "reshape", backward)


def transpose(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        _shape_error("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _result(np.transpose(a.data, axes), (a,), "transpose", backward)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    axis = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != axis):
            _shape_error("concat", *(u.shape for u in tensors))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * nd
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), "concat", backward)


def split(a, sizes, axis=-1):
    """Split along ``axis`` into pieces of the given sizes."""
    axis = axis % a.ndim
    if sum(sizes) != a.shape[axis]:
        _shape_error("split", a.shape, tuple(sizes))
    outs = []
    lo = 0
    for size in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(lo, lo + size)
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros(a.shape)
            full[idx] = g
            _accumulate(a, full)

        outs.append(_result(a.data[idx], (a,), "split", backward))
        lo += size
    return outs


# -- linear algebra and layers -----------------------------------------------

def matmul(a, b):
    """Batched matrix product with identical leading dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        _shape_error("matmul", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def linear(x, W, b=None):
    """``x @ W + b`` applied over the last axis of ``x``; ``W`` is (in, out)."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or (b is not None and b.shape != (W.shape[1],)):
        _shape_error("linear", x.shape, W.shape, () if b is None else b.shape)
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    if b is not None:
        out += b.data
    out = out.reshape(x.shape[:-1] + (W.shape[1],))
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accumulate(x, (g2 @ W.data.T).reshape(x.shape))
        if W.requires_grad:
            _accumulate(W, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))

    return _result(out, parents, "linear", backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        _shape_error("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)
        g2 = g.reshape(-1, d)
        if gamma.requires_grad:
            _accumulate(gamma, (g2 * xhat.reshape(-1, d)).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g2.sum(axis=0))

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", backward)


def _softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis=-1):
    out = _softmax(a.data, axis)

    def backward(g):
        _accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (a,), "softmax", backward)


def scaled_dot_product_attention(Q, K, V, heads):
    """Multi-head softmax attention on (..., tokens, width) inputs.

    The width is split evenly into ``heads`` groups; each attends
    independently and the results are concatenated back.
    """
    if not (Q.shape == K.shape == V.shape) or Q.ndim < 2 or Q.shape[-1] % heads:
        _shape_error("scaled_dot_product_attention", Q.shape, K.shape, V.shape)
    *lead, n, d = Q.shape
    dh = d // heads
    c = 1.0 / math.sqrt(dh)

    def to_heads(x):
        return np.swapaxes(x.reshape(*lead, n, heads, dh), -2, -3)

    q, k, v = to_heads(Q.data), to_heads(K.data), to_heads(V.data)
    p = _softmax((q @ np.swapaxes(k, -1, -2)) * c, -1)
    o = p @ v

    def backward(g):
        go = to_heads(g)
        dv = np.swapaxes(p, -1, -2) @ go
        dp = go @ np.swapaxes(v, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * c
        dq = ds @ k
        dk = np.swapaxes(ds, -1, -2) @ q
        for t, gh in ((Q, dq), (K, dk), (V, dv)):
            if t.requires_grad:
                _accumulate(t, np.swapaxes(gh, -2, -3).reshape(*lead, n, d))

    out = np.swapaxes(o, -2, -3).reshape(*lead, n, d)
    return _result(out, (Q, K, V), "attention", backward)


def mse_loss(pred, target):
    """Mean squared error over all elements."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        _shape_error("mse_loss", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gg = float(g.reshape(()))
        _accumulate(pred, gg * 2.0 * diff / n)
        _accumulate(target, -gg * 2.0 * diff / n)

    return _result(np.array((diff * diff).mean()), (pred, target), "mse", backward)


def gaussian_reparam(mu, log_sigma, eps):
    """``mu + exp(log_sigma) * eps`` with ``eps`` a supplied noise tensor."""
    eps = _as_tensor(eps)
    if not (mu.shape == log_sigma.shape == eps.shape):
        _shape_error("gaussian_reparam", mu.shape, log_sigma.shape, eps.shape)
    sigma = np.exp(log_sigma.data)

    def backward(g):
        _accumulate(mu, g)
        _accumulate(log_sigma, g * sigma * eps.data)
        _accumulate(eps, g * sigma)

    return _result(mu.data + sigma * eps.data, (mu, log_sigma, eps), "reparam", backward)


# -- gradient checking -------------------------------------------------------

def gradcheck(fn, inputs, step=1e-5, tol=1e-5):
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    Returns the worst ``|g_analytic - g_fd| / max(1, |g_fd|)`` over all
    elements of all inputs that require grad; raises ``AssertionError`` when
    it exceeds ``tol``.
    """
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    loss.backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn(*inputs).data.item()
            flat[i] = orig - step
            down = fn(*inputs).data.item()
            flat[i] = orig
            fd = (up - down) / (2 * step)
            err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    if worst >= tol:
        raise AssertionError(f"gradient check failed: worst relative error {worst:.3e}")
    return worst


# -- checkpoints -------------------------------------------------------------

class CheckpointError(ValueError):
    """Malformed CKPT container."""


_CKPT_MAGIC = b"CKPT"


def save_checkpoint(path, arrays):
    """Write a name -> array mapping in the CKPT container (entries in given order)."""
    chunks = [_CKPT_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Read a CKPT container back into an ordered dict of float64 arrays."""
    buf = Path(path).read_bytes()
    if buf[:4] != _CKPT_MAGIC:
        raise CheckpointError("bad magic")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError("trailing bytes")
    return out
