"""Dense tensors with reverse-mode automatic differentiation.

Define-by-run: every differentiable op records its adjoint closure on a
global tape that is rebuilt each forward pass and consumed by `backward`.
float32 is the training dtype; float64 exists so gradient checks can run
at tight tolerance. A tensor may be read from many threads, but mutation
and tape recording assume a single writer.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ContractError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Row-major n-d float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            if dtype not in _DTYPES:
                raise ContractError(f"unsupported dtype {dtype!r}; use float32 or float64")
            arr = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
        elif arr.dtype == np.float64:
            arr = np.ascontiguousarray(arr)
        else:
            arr = np.ascontiguousarray(arr, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return "float64" if self.data.dtype == np.float64 else "float32"

    def zero_grad(self):
        self.grad = None

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Execution-ordered op record; reverse traversal replays adjoints.

    Construction order is already topological (inputs precede users), so
    one reversed pass visits each node exactly once.
    """

    def __init__(self):
        self.nodes = []
        self._output_ids = set()

    def record(self, out, inputs, backward):
        self.nodes.append((out, inputs, backward))
        self._output_ids.add(id(out))

    def clear(self):
        self.nodes.clear()
        self._output_ids.clear()

    def __len__(self):
        return len(self.nodes)


_tape = Tape()
_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def reset_tape():
    _tape.clear()


def tape_size():
    return len(_tape)


def backward(loss):
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    The tape is consumed: a second call without a fresh forward pass is a
    contract error. Gradients accumulate into existing buffers, which is
    what gradient accumulation over micro-batches relies on.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if id(loss) not in _tape._output_ids:
        raise ContractError(
            "loss was not produced on the current tape "
            "(backward already consumed it, or no input required grad)"
        )
    loss.grad = np.ones_like(loss.data)
    for out, _inputs, bwd in reversed(_tape.nodes):
        if out.grad is not None:
            bwd(out.grad)
    _tape.clear()


def _as_tensor(x, ref_dtype=None):
    if isinstance(x, Tensor):
        return x
    dtype = None
    if ref_dtype is not None:
        dtype = "float64" if ref_dtype == np.float64 else "float32"
    return Tensor(x, dtype=dtype)


def _check_dtypes(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise ContractError(
            f"{op}: mixed dtypes {a.dtype} vs {b.dtype}; a computation graph must use one dtype"
        )


def _pair(a, b, op):
    """Wrap raw operands as constants, adopting the tensor operand's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_dtypes(a, b, op)
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return Tensor(a), Tensor(b)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _finish(out, inputs, bwd):
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.record(out, inputs, bwd)
    return out


def _unbroadcast(g, shape):
    """Reduce gradient `g` back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = _pair(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _finish(out, (a, b), bwd)


def sub(a, b):
    a, b = _pair(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _finish(out, (a, b), bwd)


def mul(a, b):
    a, b = _pair(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _finish(out, (a, b), bwd)


def matmul(a, b):
    """Matrix product. 2-D x 2-D, or stacked with identical leading dims."""
    a, b = _pair(a, b, "matmul")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2] or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ContractError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _finish(out, (a, b), bwd)


def softmax(x, axis=-1):
    """Exp-normalize along `axis`, stabilized by max subtraction."""
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        s = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - s))

    return _finish(out, (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ContractError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last axis ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gg = g * gain.data
            dx = inv * (
                gg
                - gg.mean(axis=-1, keepdims=True)
                - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
            )
            _accum(x, dx)

    return _finish(out, (x, gain, bias), bwd)


def gelu(x):
    """x * Phi(x), exact erf form (no tanh approximation)."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accum(x, g * (cdf + x.data * pdf))

    return _finish(out, (x,), bwd)


def cross_entropy(logits, targets, ignore_mask=None):
    """Mean negative log-probability of `targets` under row softmaxes.

    logits: (n, vocab). targets: (n,) int ids. ignore_mask, when given,
    marks rows with 0 to exclude them from the mean.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ContractError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    n, v = logits.data.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ContractError(f"cross_entropy: targets shape {targets.shape} != ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy: target id outside [0, {v})")
    if ignore_mask is None:
        active = np.ones(n, dtype=logits.data.dtype)
    else:
        active = np.asarray(ignore_mask).astype(logits.data.dtype)
        if active.shape != (n,):
            raise ContractError(f"cross_entropy: ignore_mask shape {active.shape} != ({n},)")
    n_active = active.sum()
    if n_active == 0:
        raise ContractError("cross_entropy: no active positions")

    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    ez = np.exp(z)
    lse = np.log(ez.sum(axis=1)) + m[:, 0]
    nll = lse - logits.data[np.arange(n), targets]
    out = Tensor((nll * active).sum() / n_active)

    def bwd(g):
        p = ez / ez.sum(axis=1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        p *= (active / n_active)[:, None]
        _accum(logits, g * p)

    return _finish(out, (logits,), bwd)


def embedding(table, ids):
    """Row gather: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ContractError(f"embedding table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"embedding: id outside [0, {table.data.shape[0]})")
    out = Tensor(table.data[ids])

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            _accum(table, gt)

    return _finish(out, (table,), bwd)


def inject_rows(x, rows, positions):
    """Overwrite x[b, positions[b, i], :] with rows[i, :] for every batch row b.

    Used to splice trainable virtual-token embeddings into an embedded
    sequence; gradient flows to both `rows` and the untouched part of `x`.
    Positions must be unique within each batch row.
    """
    x, rows = _pair(x, rows, "inject_rows")
    positions = np.asarray(positions)
    if x.data.ndim != 3 or rows.data.ndim != 2:
        raise ContractError(f"inject_rows expects x (b,t,d) and rows (n,d), got {x.shape}, {rows.shape}")
    b, t, d = x.data.shape
    n = rows.data.shape[0]
    if rows.data.shape[1] != d:
        raise ContractError(f"inject_rows: row width {rows.data.shape[1]} != {d}")
    if positions.shape != (b, n):
        raise ContractError(f"inject_rows: positions shape {positions.shape} != ({b}, {n})")
    if n and any(len(set(row.tolist())) != n for row in positions):
        raise ContractError("inject_rows: duplicate position within a batch row")
    bidx = np.arange(b)[:, None]
    data = x.data.copy()
    data[bidx, positions] = rows.data
    out = Tensor(data)

    def bwd(g):
        if rows.requires_grad:
            _accum(rows, g[bidx, positions].sum(axis=0))
        if x.requires_grad:
            gx = g.copy()
            gx[bidx, positions] = 0.0
            _accum(x, gx)

    return _finish(out, (x, rows), bwd)


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`."""
    x = _as_tensor(x)
    extent = x.data.shape[axis]
    if start < 0 or length < 0 or start + length > extent:
        raise ContractError(f"narrow: [{start}, {start + length}) outside axis extent {extent}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(x.data[index].copy())

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[index] = g
            _accum(x, gx)

    return _finish(out, (x,), bwd)


def reshape(x, shape):
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _finish(out, (x,), bwd)


def transpose(x, axes):
    x = _as_tensor(x)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inverse = np.argsort(axes)

    def bwd(g):
        _accum(x, g.transpose(inverse))

    return _finish(out, (x,), bwd)


def tsum(x):
    """Full reduction to a scalar."""
    x = _as_tensor(x)
    out = Tensor(x.data.sum())

    def bwd(g):
        _accum(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype))

    return _finish(out, (x,), bwd)
