"""Dense tensors with reverse-mode automatic differentiation.

Minimal define-by-run engine: every op builds a node holding its parents
and a vector-Jacobian closure; `backward()` walks the graph once in
reverse topological order, accumulates gradients into leaves, and frees
the graph. Storage is float32 by default; reductions (sums, means, matrix
products) accumulate in float64 before casting back. Passing float64
tensors end to end gives the shadow precision the gradient checks use.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import AutodiffError

TRAIN = "train"
EVAL = "eval"

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None
        self._freed = False

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._freed = False
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        else:  # constant subgraph: no need to keep history
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_coerce(other, self)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _result_dtype(*arrs: np.ndarray):
    return np.float64 if any(a.dtype == np.float64 for a in arrs) else np.float32


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; frees the graph afterwards."""
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise AutodiffError("backward already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad:
        raise AutodiffError("loss does not require grad; nothing to differentiate")

    # iterative post-order topological sort
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._freed:
            raise AutodiffError("graph reuses a node whose backward already ran")
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    for node in topo:
        if not node._parents and node.grad is not None:
            raise AutodiffError(
                "a leaf already holds a gradient; call zero_grad() before backward"
            )

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        vjp = node._vjp
        if vjp is None:
            continue
        contribs = vjp(node.grad)
        for parent, g in zip(node._parents, contribs):
            if g is not None and parent.requires_grad:
                _accumulate(parent, g)
        # free the node: drop history and interior gradient buffers
        node._vjp = None
        node._parents = ()
        node._freed = True
        if node is not loss:
            node.grad = None


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._wrap(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return Tensor._wrap(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor._wrap(out, (a, b), vjp)


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor._wrap(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; both operands at least 2-D, leading dims broadcast.

    dC/dA = dC @ B^T, dC/dB = A^T @ dC, summed over broadcast batch dims.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims mismatch: {a.shape} @ {b.shape}")
    dtype = _result_dtype(a.data, b.data)
    out = _mm64(a.data, b.data, dtype)

    def vjp(g):
        da = _unbroadcast(_mm64(g, np.swapaxes(b.data, -1, -2), dtype), a.data.shape)
        db = _unbroadcast(_mm64(np.swapaxes(a.data, -1, -2), g, dtype), b.data.shape)
        return da, db

    return Tensor._wrap(out, (a, b), vjp)


def _mm64(a: np.ndarray, b: np.ndarray, out_dtype) -> np.ndarray:
    # float64 accumulation regardless of storage dtype
    r = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    return r.astype(out_dtype, copy=False)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def vjp(g):
        return (np.transpose(g, inverse),)

    return Tensor._wrap(out, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.data.shape
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(orig),)

    return Tensor._wrap(out, (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=False),)

    return Tensor._wrap(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)]))
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = (out / count).astype(a.data.dtype)

    def vjp(g):
        if axis is None:
            gg = g
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(gg, a.data.shape) / count).astype(a.data.dtype, copy=False),)

    return Tensor._wrap(out, (a,), vjp)


def tanh_act(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return Tensor._wrap(y, (a,), vjp)


def relu_act(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0)

    def vjp(g):
        return (g * (a.data > 0),)  # derivative at exactly 0 is 0

    return Tensor._wrap(y, (a,), vjp)


def softmax_rows(logits: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    -inf entries are legal (that is how causal masks zero out scores);
    NaN anywhere in the result is a contract violation and raises.
    """
    x = logits.data
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = np.sum(e, axis=-1, keepdims=True, dtype=np.float64)
    y = (e / s).astype(x.dtype)
    if np.isnan(y).any():
        raise ValueError("softmax_rows produced NaN; input had NaN or an all--inf row")

    def vjp(g):
        dot = np.sum(g * y, axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (y * (g - dot),)

    return Tensor._wrap(y, (logits,), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray, divisor: float | None = None) -> Tensor:
    """Summed negative log-likelihood of `targets`, divided by `divisor`.

    With the default divisor (the number of rows) this is the mean loss
    per position; passing the sequence count instead gives the
    sum-over-timesteps, mean-over-sequences form. Gradient is
    (softmax - onehot) / divisor.
    """
    x = logits.data
    if x.ndim != 2:
        raise ValueError(f"cross_entropy expects [n, V] logits, got {x.shape}")
    t = np.asarray(targets)
    n, v = x.shape
    if t.shape != (n,):
        raise ValueError(f"targets shape {t.shape} does not match {n} rows")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise ValueError(f"target id out of range [0, {v})")
    div = float(divisor) if divisor is not None else float(n)

    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=-1, keepdims=True, dtype=np.float64)
    log_probs = (x - m) - np.log(s).astype(x.dtype)
    picked = log_probs[np.arange(n), t]
    loss = np.asarray(-np.sum(picked, dtype=np.float64) / div, dtype=x.dtype)

    def vjp(g):
        p = (e / s).astype(x.dtype)
        p[np.arange(n), t] -= 1.0
        return (p * (float(g) / div),)

    return Tensor._wrap(loss, (logits,), vjp)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: output shape ids.shape + (d,); gradient scatter-adds."""
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("embedding ids must be integers")
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise ValueError(f"embedding id out of range [0, {v})")
    out = table.data[idx]

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return Tensor._wrap(out, (table,), vjp)


def causal_conv1d(x: Tensor, filters: Tensor, dilation: int) -> Tensor:
    """y(t) = sum_k x(t - dilation*k) @ filters[k], zero-padded on the left.

    x is [T, c_in] or [batch, T, c_in]; filters is [K, c_in, c_out].
    Output at position t never touches inputs after t.
    """
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    if filters.ndim != 3:
        raise ValueError(f"filters must be [K, c_in, c_out], got {filters.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[-1] != filters.shape[1]:
        raise ValueError(f"input {x.shape} incompatible with filters {filters.shape}")
    k_taps = filters.shape[0]
    t_len = xd.shape[1]
    dtype = _result_dtype(x.data, filters.data)

    out = np.zeros((xd.shape[0], t_len, filters.shape[2]), dtype=np.float64)
    f64 = filters.data.astype(np.float64, copy=False)
    x64 = xd.astype(np.float64, copy=False)
    for k in range(k_taps):
        shift = dilation * k
        if shift >= t_len:
            break
        out[:, shift:, :] += x64[:, : t_len - shift, :] @ f64[k]
    out = out.astype(dtype)
    if squeeze:
        out = out[0]

    def vjp(g):
        gd = g[None] if squeeze else g
        g64 = gd.astype(np.float64, copy=False)
        dx = np.zeros_like(x64)
        df = np.zeros_like(f64)
        for k in range(k_taps):
            shift = dilation * k
            if shift >= t_len:
                break
            dx[:, : t_len - shift, :] += g64[:, shift:, :] @ f64[k].T
            df[k] = np.tensordot(x64[:, : t_len - shift, :], g64[:, shift:, :], axes=([0, 1], [0, 1]))
        dx_out = dx[0] if squeeze else dx
        return dx_out.astype(x.data.dtype), df.astype(filters.data.dtype)

    return Tensor._wrap(out, (x, filters), vjp)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True by `value`; grads flow elsewhere."""
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, np.asarray(value, dtype=x.data.dtype), x.data)

    def vjp(g):
        return (_unbroadcast(np.where(m, 0.0, g).astype(x.data.dtype, copy=False), x.data.shape),)

    return Tensor._wrap(out, (x,), vjp)


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Pick one slice along `axis`, dropping that axis."""
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        da = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        da[tuple(sl)] = g
        return (da,)

    return Tensor._wrap(out, (a,), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def vjp(g):
        slabs = np.split(g, n, axis=axis)
        return tuple(np.squeeze(s, axis=axis) for s in slabs)

    return Tensor._wrap(out, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# composite layers (differentiated through the primitives above)


def batch_norm(
    x: Tensor,
    gain: Tensor,
    shift: Tensor,
    mode: str,
    running_mean: Tensor,
    running_var: Tensor,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-dimension batch normalization over axis 0.

    Train mode normalizes by the batch mean and population variance
    (denominator n) and folds them into the running statistics; eval mode
    normalizes by the running statistics alone.
    """
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == TRAIN:
        n = x.shape[0]
        if n < 2:
            raise ValueError("batch_norm train mode needs a batch of at least 2")
        mu = tmean(x, axis=0)
        centered = x - mu
        var = tmean(centered * centered, axis=0)
        inv = pow_scalar(var + eps, -0.5)
        xn = centered * inv
        m = momentum
        running_mean.data = ((1.0 - m) * running_mean.data + m * mu.data).astype(running_mean.data.dtype)
        running_var.data = ((1.0 - m) * running_var.data + m * var.data).astype(running_var.data.dtype)
    else:
        inv_const = Tensor(1.0 / np.sqrt(running_var.data.astype(np.float64) + eps), dtype=x.data.dtype)
        mean_const = Tensor(running_mean.data, dtype=x.data.dtype)
        xn = (x - mean_const) * inv_const
    return xn * gain + shift


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then scale and shift."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    xn = centered * pow_scalar(var + eps, -0.5)
    return xn * gain + shift
