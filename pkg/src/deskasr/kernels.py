"""Dense tensor primitives with a small reverse-mode tape.

Every op takes :class:`Tensor` inputs and returns a freshly allocated
:class:`Tensor`.  When at least one input requires a gradient the output keeps
references to its parents and a closure mapping the output gradient to the
parent gradients; :func:`backward` walks that recorded graph in reverse
topological order.  Values are float32 by default.  float64 tensors are
accepted and propagated unchanged so that finite-difference checks can run in
double precision on exactly the same code.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numba
import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "Parameter",
    "Rng",
    "as_tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "linear",
    "sum_all",
    "mean_all",
    "sum_axis",
    "reshape",
    "swapaxes",
    "concat",
    "take_rows",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "abs_",
    "softmax",
    "log_softmax",
    "layer_norm",
    "cross_entropy",
    "conv1d",
    "transposed_conv1d",
    "depthwise_conv1d",
    "conv_out_len",
    "transposed_conv_out_len",
    "attention",
    "multi_head_attention",
    "lstm_step",
    "lstm",
    "zero_grads",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


# --------------------------------------------------------------------------
# Tensor / Parameter


def _as_array(x) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype == np.float64:
        return a
    return a.astype(np.float32, copy=False)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar for readability inside model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
        """Build an op output; ``backward_fn(g)`` returns one gradient per parent (or None)."""
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out


class Parameter(Tensor):
    """Trainable leaf tensor; ``grad`` always has the value's shape."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients are added to whatever the leaves already hold: callers zero them
    between optimisation steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.data.dtype, copy=False)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise / structural


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor.from_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor.from_op(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise DimensionError(f"linear: input dim {xd.shape[-1]} != weight in-dim {wd.shape[1]}")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, bw)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor.from_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return Tensor.from_op(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("take_rows: id out of range")
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (gt,)

    return Tensor.from_op(table.data[ids], (table,), bw)


# --------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.from_op(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    out = x.dtype.type(0.5) * x * (1 + t)

    def bw(g):
        dinner = c * (1 + 3 * k * x * x)
        d = 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner
        return (g * d,)

    return Tensor.from_op(out, (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor.from_op(s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor.from_op(t, (a,), lambda g: (g * (1 - t * t),))


def abs_(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * sgn,))


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    s = _softmax(a.data, axis)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(s, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return Tensor.from_op(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    n = xd.shape[-1]

    def bw(g):
        gg = g * gamma.data if gamma is not None else g
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, n).sum(axis=0) if gamma is not None else None
        gbeta = g.reshape(-1, n).sum(axis=0) if beta is not None else None
        res = [gx]
        if gamma is not None:
            res.append(ggamma)
        if beta is not None:
            res.append(gbeta)
        return tuple(res)

    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)
    return Tensor.from_op(out, parents, bw)


def cross_entropy(logits: Tensor, targets, mask=None, label_smoothing: float = 0.0) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true.

    ``logits`` is [..., V]; ``targets`` integer array of the leading shape.
    With smoothing ``s`` the target distribution is ``(1-s)·onehot + s/V``.
    """
    x = logits.data
    v = x.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != x.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs logits {x.shape}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = max(int(mask.sum()), 1)
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe_t = np.where(mask, targets, 0)
    q = np.full(x.shape, label_smoothing / v, dtype=x.dtype)
    np.put_along_axis(q, safe_t[..., None], (1 - label_smoothing) + label_smoothing / v, axis=-1)
    per = -(q * logp).sum(axis=-1)
    loss = (per * mask).sum() / count
    p = np.exp(logp)

    def bw(g):
        return ((p - q) * (mask[..., None] * (g / count)),)

    return Tensor.from_op(np.asarray(loss, dtype=x.dtype), (logits,), bw)


# --------------------------------------------------------------------------
# convolutions, time-major: x is [..., T, C]


def conv_out_len(t: int, k: int, stride: int, pad: int) -> int:
    """Output length of a strided cross-correlation: floor((T + 2·pad − K)/stride) + 1."""
    return (t + 2 * pad - k) // stride + 1


def transposed_conv_out_len(t: int, k: int, stride: int, pad: int) -> int:
    """Output length of a transposed convolution: (T − 1)·stride − 2·pad + K."""
    return (t - 1) * stride - 2 * pad + k


def _promote_1d(x: Tensor, kernel: Tensor):
    squeeze = False
    if x.data.ndim == 1:
        x = reshape(x, (-1, 1))
        squeeze = True
    if kernel.data.ndim == 1:
        kernel = reshape(kernel, (-1, 1, 1))
    return x, kernel, squeeze


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation over time.

    ``x``: [..., T, C_in] (or 1-D signal), ``kernel``: [K, C_in, C_out] (or 1-D taps).
    Output [..., T_out, C_out] with ``T_out = conv_out_len(T, K, stride, pad)``.
    """
    x, kernel, squeeze = _promote_1d(x, kernel)
    xd, kd = x.data, kernel.data
    k, cin, cout = kd.shape
    if xd.shape[-1] != cin:
        raise DimensionError(f"conv1d: input channels {xd.shape[-1]} != kernel {cin}")
    t = xd.shape[-2]
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv1d: stride {stride} / pad {pad} invalid")
    tout = conv_out_len(t, k, stride, pad)
    if tout < 1:
        raise DimensionError(f"conv1d: kernel {k} does not fit length {t} with pad {pad}")
    lead = xd.shape[:-2]
    padw = [(0, 0)] * len(lead) + [(pad, pad), (0, 0)]
    xp = np.pad(xd, padw)
    idx = np.arange(tout)[:, None] * stride + np.arange(k)[None, :]  # [T_out, K]
    cols = xp[..., idx, :]  # [..., T_out, K, C_in]
    cols2 = cols.reshape(*lead, tout, k * cin)
    w2 = kd.reshape(k * cin, cout)
    out = cols2 @ w2
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(*lead, tout, k, cin)
            gxp = np.zeros_like(xp)
            # scatter back each tap
            for j in range(k):
                gxp[..., idx[:, j], :] += gcols[..., :, j, :]
            gx = gxp[..., pad : pad + t, :]
        if kernel.requires_grad:
            gk = (cols2.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out_t = Tensor.from_op(out, parents, bw)
    return reshape(out_t, (tout,)) if squeeze and cout == 1 else out_t


def transposed_conv1d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution: input frame t adds ``x[t] @ kernel[j]`` at output ``t·stride + j − pad``.

    Output length is ``transposed_conv_out_len(T, K, stride, pad)``.
    """
    x, kernel, squeeze = _promote_1d(x, kernel)
    xd, kd = x.data, kernel.data
    k, cin, cout = kd.shape
    if xd.shape[-1] != cin:
        raise DimensionError(f"transposed_conv1d: input channels {xd.shape[-1]} != kernel {cin}")
    t = xd.shape[-2]
    if stride < 1 or pad < 0:
        raise DimensionError(f"transposed_conv1d: stride {stride} / pad {pad} invalid")
    tout = transposed_conv_out_len(t, k, stride, pad)
    if tout < 1:
        raise DimensionError("transposed_conv1d: invalid geometry")
    lead = xd.shape[:-2]
    full = (t - 1) * stride + k
    # contributions [..., T, K, C_out]
    contrib = (xd @ kd.transpose(1, 0, 2).reshape(cin, k * cout)).reshape(*lead, t, k, cout)
    out_full = np.zeros((*lead, full, cout), dtype=xd.dtype)
    pos = np.arange(t)[:, None] * stride + np.arange(k)[None, :]  # [T, K]
    for j in range(k):
        out_full[..., pos[:, j], :] += contrib[..., :, j, :]
    out = out_full[..., pad : pad + tout, :]
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = gk = gb = None
        gfull = np.zeros((*lead, full, cout), dtype=g.dtype)
        gfull[..., pad : pad + tout, :] = g
        gcontrib = gfull[..., pos, :]  # [..., T, K, C_out]
        if x.requires_grad:
            gx = gcontrib.reshape(*lead, t, k * cout) @ kd.transpose(1, 0, 2).reshape(cin, k * cout).T
        if kernel.requires_grad:
            gk2 = xd.reshape(-1, cin).T @ gcontrib.reshape(-1, k * cout)  # [C_in, K*C_out]
            gk = gk2.reshape(cin, k, cout).transpose(1, 0, 2)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out_t = Tensor.from_op(np.ascontiguousarray(out), parents, bw)
    return reshape(out_t, (tout,)) if squeeze and cout == 1 else out_t


def depthwise_conv1d(x: Tensor, taps: Tensor, left: int, right: int) -> Tensor:
    """Per-channel filter over frames ``t-left .. t+right`` (zero padded); ``taps`` is [left+right+1, C]."""
    xd, kd = x.data, taps.data
    k, c = kd.shape
    if k != left + right + 1 or xd.shape[-1] != c:
        raise DimensionError("depthwise_conv1d: taps shape does not match left/right/channels")
    t = xd.shape[-2]
    lead = xd.shape[:-2]
    xp = np.pad(xd, [(0, 0)] * len(lead) + [(left, right), (0, 0)])
    out = np.zeros_like(xd)
    for j in range(k):
        out += xp[..., j : j + t, :] * kd[j]

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j : j + t, :] += g * kd[j]
            gx = gxp[..., left : left + t, :]
        if taps.requires_grad:
            gk = np.stack([(g * xp[..., j : j + t, :]).reshape(-1, c).sum(axis=0) for j in range(k)])
        return gx, gk

    return Tensor.from_op(out, (x, taps), bw)


# --------------------------------------------------------------------------
# attention


def attention(Q: Tensor, K: Tensor, V: Tensor, n_heads: int, key_mask=None) -> Tensor:
    """softmax(Q·Kᵀ/√d_head)·V per head on already-projected inputs, heads concatenated.

    ``key_mask`` (bool, broadcastable to [..., Lq, Lk]) marks keys a query may see.
    """
    d = Q.shape[-1]
    if d % n_heads:
        raise DimensionError(f"model dim {d} not divisible by {n_heads} heads")
    if K.shape[-1] != d or V.shape[-1] != d or K.shape[-2] != V.shape[-2]:
        raise DimensionError("attention: query/key/value dims disagree")
    dh = d // n_heads

    def split(t: Tensor) -> Tensor:
        lead = t.shape[:-2]
        return swapaxes(reshape(t, (*lead, t.shape[-2], n_heads, dh)), -2, -3)  # [..., H, L, dh]

    Qh, Kh, Vh = split(Q), split(K), split(V)
    scores = scale(matmul(Qh, swapaxes(Kh, -1, -2)), 1.0 / math.sqrt(dh))  # [..., H, Lq, Lk]
    if key_mask is not None:
        m = np.asarray(key_mask, dtype=bool)
        if m.ndim >= 2:
            m = np.expand_dims(m, -3)  # head axis
        scores = add(scores, Tensor(np.where(m, 0.0, -1e9).astype(scores.dtype)))
    ctx = swapaxes(matmul(softmax(scores, axis=-1), Vh), -2, -3)  # [..., Lq, H, dh]
    return reshape(ctx, (*ctx.shape[:-2], d))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: dict, n_heads: int, key_mask=None) -> Tensor:
    """Project, attend per head, concatenate and project out.

    ``params`` maps ``wq, wk, wv, wo`` ([out, in]) and optional ``bq, bk, bv, bo``.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError("multi_head_attention: query/key/value dims disagree")
    Q = linear(q, params["wq"], params.get("bq"))
    K = linear(k, params["wk"], params.get("bk"))
    V = linear(v, params["wv"], params.get("bv"))
    return linear(attention(Q, K, V, n_heads, key_mask), params["wo"], params.get("bo"))


# --------------------------------------------------------------------------
# recurrent


def lstm_step(x: Tensor, h: Tensor, c: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """One LSTM cell update; gates ordered (input, forget, candidate, output).

    ``params``: ``w_x`` [4H, I], ``w_h`` [4H, H], ``b`` [4H].
    """
    hdim = h.shape[-1]
    if params["w_x"].shape != (4 * hdim, x.shape[-1]) or params["w_h"].shape != (4 * hdim, hdim):
        raise DimensionError("lstm_step: parameter shapes do not match input/hidden sizes")
    z = add(linear(x, params["w_x"], params.get("b")), linear(h, params["w_h"]))

    def gate(i):
        return Tensor.from_op(z.data[..., i * hdim : (i + 1) * hdim], (z,), _slice_bw(z.shape, i, hdim))

    ig, fg, gg, og = sigmoid(gate(0)), sigmoid(gate(1)), tanh(gate(2)), sigmoid(gate(3))
    c2 = add(mul(fg, c), mul(ig, gg))
    h2 = mul(og, tanh(c2))
    return h2, c2


def _slice_bw(shape, i, hdim):
    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., i * hdim : (i + 1) * hdim] = g
        return (full,)

    return bw


def lstm(zx: Tensor, w_h: Tensor) -> Tensor:
    """Run an LSTM over time given the precomputed input projection.

    ``zx`` is [..., T, 4H] (``x @ w_x.T + b`` for every frame), ``w_h`` is [4H, H].
    Zero initial state.  Returns hidden states [..., T, H].  Forward and
    backward-through-time are fused for speed; :func:`lstm_step` is the
    per-step reference.
    """
    zd, wd = zx.data, w_h.data
    four_h = zd.shape[-1]
    hdim = four_h // 4
    if wd.shape != (four_h, hdim):
        raise DimensionError("lstm: recurrent weight shape mismatch")
    lead = zd.shape[:-2]
    t_len = zd.shape[-2]
    dt = zd.dtype
    if not (zx.requires_grad or w_h.requires_grad):
        # inference: compiled recurrence, no tape
        flat = np.ascontiguousarray(zd.reshape(-1, t_len, four_h))
        out = _lstm_forward(flat, np.ascontiguousarray(wd.astype(dt)), dt == np.float32)
        return Tensor(out.reshape(*lead, t_len, hdim))
    hs = np.zeros((*lead, t_len, hdim), dt)
    cs = np.zeros((*lead, t_len, hdim), dt)
    gates = np.zeros((*lead, t_len, four_h), dt)
    h = np.zeros((*lead, hdim), dt)
    c = np.zeros((*lead, hdim), dt)
    wt = wd.T
    for t in range(t_len):
        z = zd[..., t, :] + h @ wt
        i = _sigmoid(z[..., :hdim])
        f = _sigmoid(z[..., hdim : 2 * hdim])
        g = np.tanh(z[..., 2 * hdim : 3 * hdim])
        o = _sigmoid(z[..., 3 * hdim :])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[..., t, :hdim] = i
        gates[..., t, hdim : 2 * hdim] = f
        gates[..., t, 2 * hdim : 3 * hdim] = g
        gates[..., t, 3 * hdim :] = o
        hs[..., t, :] = h
        cs[..., t, :] = c

    def bw(gh_all):
        gz_all = np.zeros_like(gates)
        gh_next = np.zeros((*lead, hdim), dt)
        gc_next = np.zeros((*lead, hdim), dt)
        for t in range(t_len - 1, -1, -1):
            i = gates[..., t, :hdim]
            f = gates[..., t, hdim : 2 * hdim]
            g = gates[..., t, 2 * hdim : 3 * hdim]
            o = gates[..., t, 3 * hdim :]
            c_t = cs[..., t, :]
            c_prev = cs[..., t - 1, :] if t > 0 else np.zeros_like(c_t)
            gh = gh_all[..., t, :] + gh_next
            tc = np.tanh(c_t)
            go = gh * tc
            gc = gh * o * (1 - tc * tc) + gc_next
            gi = gc * g
            gf = gc * c_prev
            gg = gc * i
            gz = np.concatenate(
                [gi * i * (1 - i), gf * f * (1 - f), gg * (1 - g * g), go * o * (1 - o)], axis=-1
            )
            gz_all[..., t, :] = gz
            gh_next = gz @ wd
            gc_next = gc * f
        gw = None
        if w_h.requires_grad:
            hprev = np.zeros_like(hs)
            hprev[..., 1:, :] = hs[..., :-1, :]
            gw = gz_all.reshape(-1, four_h).T @ hprev.reshape(-1, hdim)
        return gz_all, gw

    return Tensor.from_op(hs, (zx, w_h), bw)


@numba.njit(cache=True)
def _exp_neg(x, out):
    """out = exp(-x) for x >= 0, float64 and branch-free so the loop vectorizes.

    2**(-x*log2 e) split into 2**n (built in the exponent bits) times a
    degree-11 Taylor polynomial of e**(f ln 2), |f| <= 1/2: relative error < 1e-13.
    """
    n_el = x.shape[0]
    y = np.empty(n_el, np.float64)
    ni = np.empty(n_el, np.int64)
    for i in range(n_el):
        v = -min(x[i], 700.0) * 1.4426950408889634
        n = np.floor(v + 0.5)
        y[i] = (v - n) * 0.6931471805599453
        ni[i] = (np.int64(n) + 1023) << 52
    scale = ni.view(np.float64)
    for i in range(n_el):
        r = y[i]
        p = 1.0 / 39916800.0
        p = p * r + 1.0 / 3628800.0
        p = p * r + 1.0 / 362880.0
        p = p * r + 1.0 / 40320.0
        p = p * r + 1.0 / 5040.0
        p = p * r + 1.0 / 720.0
        p = p * r + 1.0 / 120.0
        p = p * r + 1.0 / 24.0
        p = p * r + 1.0 / 6.0
        p = p * r + 0.5
        p = p * r + 1.0
        p = p * r + 1.0
        out[i] = p * scale[i]


@numba.njit(cache=True)
def _lstm_forward(zx, wh, f32):
    """Inference-only LSTM recurrence (gate order i, f, g, o), zero initial state.

    State is kept in float64; with ``f32`` it is rounded to float32 every step
    so the result tracks the float32 tape path.
    """
    b, t_len, four_h = zx.shape
    hdim = four_h // 4
    wt = np.ascontiguousarray(wh.T)  # [H, 4H]: the inner loop runs along contiguous gates
    out = np.zeros((b, t_len, hdim), zx.dtype)
    h = np.zeros(hdim, np.float64)
    c = np.zeros(hdim, np.float64)
    z = np.zeros(four_h, zx.dtype)
    a = np.zeros(four_h + hdim, np.float64)
    e = np.zeros(four_h + hdim, np.float64)
    for bi in range(b):
        h[:] = 0
        c[:] = 0
        for t in range(t_len):
            z[:] = zx[bi, t]
            for k in range(hdim):
                hk = zx.dtype.type(h[k])
                for r in range(four_h):
                    z[r] += wt[k, r] * hk
            # sigmoid/tanh through e = exp(-|x|) (tanh uses exp(-2|x|)), never overflowing
            for r in range(four_h):
                a[r] = abs(np.float64(z[r]))
            for r in range(2 * hdim, 3 * hdim):
                a[r] *= 2.0
            _exp_neg(a[:four_h], e[:four_h])
            for k in range(hdim):
                ei, ef, eg, eo = e[k], e[hdim + k], e[2 * hdim + k], e[3 * hdim + k]
                ig = 1.0 / (1.0 + ei) if z[k] >= 0 else ei / (1.0 + ei)
                fg = 1.0 / (1.0 + ef) if z[hdim + k] >= 0 else ef / (1.0 + ef)
                gg = (1.0 - eg) / (1.0 + eg)
                if z[2 * hdim + k] < 0:
                    gg = -gg
                og = 1.0 / (1.0 + eo) if z[3 * hdim + k] >= 0 else eo / (1.0 + eo)
                if f32:
                    c[k] = np.float32(np.float32(fg) * np.float32(c[k]) + np.float32(ig) * np.float32(gg))
                else:
                    c[k] = fg * c[k] + ig * gg
                a[four_h + k] = 2.0 * abs(c[k])
            _exp_neg(a[four_h:], e[four_h:])
            for k in range(hdim):
                ec = e[four_h + k]
                tc = (1.0 - ec) / (1.0 + ec)
                if c[k] < 0:
                    tc = -tc
                og = e[3 * hdim + k]
                og = 1.0 / (1.0 + og) if z[3 * hdim + k] >= 0 else og / (1.0 + og)
                h[k] = np.float32(np.float32(og) * np.float32(tc)) if f32 else og * tc
                out[bi, t, k] = h[k]
    return out


# --------------------------------------------------------------------------
# random numbers: xorshift64* (Vigna 2016).  state ^= state>>12; ^= <<25; ^= >>27;
# output = state * 0x2545F4914F6CDD1D; uniforms use the top 53 bits.

_MULT = np.uint64(0x2545F4914F6CDD1D)


@numba.njit(cache=True)
def _xs_uniform(state, n):
    out = np.empty(n, np.float64)
    s = np.uint64(state)
    for i in range(n):
        s ^= s >> np.uint64(12)
        s ^= s << np.uint64(25)
        s ^= s >> np.uint64(27)
        r = s * np.uint64(0x2545F4914F6CDD1D)
        out[i] = np.float64(r >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    return out, s


def _splitmix64(x: int) -> int:
    mask = (1 << 64) - 1
    x = (x + 0x9E3779B97F4A7C15) & mask
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


class Rng:
    """Seeded xorshift64* stream.  The seed is mixed through splitmix64 so that
    nearby seeds give unrelated streams and the all-zero state never occurs."""

    def __init__(self, seed: int = 0):
        s = _splitmix64(int(seed) & ((1 << 64) - 1))
        self.state = s or 0x9E3779B97F4A7C15

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        u, s = _xs_uniform(np.uint64(self.state), n)
        self.state = int(s)
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None, mean: float = 0.0, std: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        r = np.sqrt(-2.0 * np.log(u1))
        th = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(th), r * np.sin(th)])[:n]
        z = mean + std * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        if high <= low:
            raise ValueError("empty integer range")
        u = self.uniform(size)
        v = np.floor(np.asarray(u) * (high - low)).astype(np.int64) + low
        v = np.minimum(v, high - 1)
        return int(v) if size is None else v

    def random(self) -> float:
        return self.uniform()

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from range(n), via a partial Fisher-Yates shuffle."""
        if not 0 <= k <= n:
            raise ValueError("choice: k out of range")
        pool = np.arange(n)
        for i in range(k):
            j = self.integers(i, n)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()

    def permutation(self, n: int) -> np.ndarray:
        return self.choice(n, n)

    def fork(self, tag: int) -> "Rng":
        """Independent child stream; does not advance this one."""
        child = Rng.__new__(Rng)
        child.state = _splitmix64(self.state ^ (int(tag) * 0xD1B54A32D192ED03 & ((1 << 64) - 1))) or 1
        return child
