"""Parameterised building blocks shared by the recogniser, VAD and punctuation models."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable

import numpy as np

from . import kernels as K
from .kernels import Parameter, Rng, Tensor


class ParamStore(OrderedDict):
    """Ordered name -> Parameter map; the unit of persistence and optimisation."""

    def new(self, name: str, shape, rng: Rng | None = None, init: str = "xavier", value: float = 0.0) -> Parameter:
        if name in self:
            raise KeyError(f"duplicate parameter {name}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape, np.float32)
        elif init == "ones":
            data = np.ones(shape, np.float32)
        elif init == "const":
            data = np.full(shape, value, np.float32)
        elif init == "xavier":
            fan_out, fan_in = shape[-2], shape[-1]
            if len(shape) == 3:  # conv kernels [K, C_in, C_out]
                fan_in, fan_out = shape[0] * shape[1], shape[0] * shape[2]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(shape, -bound, bound).astype(np.float32)
        elif init == "normal":
            data = (rng.normal(shape) * value).astype(np.float32)
        else:
            raise ValueError(f"unknown init {init}")
        p = Parameter(data)
        self[name] = p
        return p

    def set_trainable(self, flag: bool) -> None:
        for p in self.values():
            p.requires_grad = flag
            if flag and p.grad is None:
                p.grad = np.zeros_like(p.data)

    def num_params(self) -> int:
        return sum(p.data.size for p in self.values())


class Linear:
    """Affine map with weight [out, in].

    ``override`` lets an inference runtime swap in another implementation
    (e.g. an int8 kernel) operating on plain arrays; it is ignored whenever the
    input or the weights are being differentiated.
    """

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, rng: Rng, bias: bool = True, init: str = "xavier"):
        self.name = name
        self.weight = store.new(f"{name}.weight", (n_out, n_in), rng, init)
        self.bias = store.new(f"{name}.bias", (n_out,), init="zeros") if bias else None
        self.override: Callable[[np.ndarray], np.ndarray] | None = None

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if self.override is not None and not (x.requires_grad or self.weight.requires_grad):
            return Tensor(self.override(x.data))
        return K.linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.gamma = store.new(f"{name}.gamma", (dim,), init="ones")
        self.beta = store.new(f"{name}.beta", (dim,), init="zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return K.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention:
    def __init__(self, store: ParamStore, name: str, dim: int, n_heads: int, rng: Rng):
        self.q = Linear(store, f"{name}.q", dim, dim, rng)
        self.k = Linear(store, f"{name}.k", dim, dim, rng)
        self.v = Linear(store, f"{name}.v", dim, dim, rng)
        self.o = Linear(store, f"{name}.o", dim, dim, rng)
        self.n_heads = n_heads

    def __call__(self, q: Tensor, kv: Tensor, key_mask=None) -> Tensor:
        ctx = K.attention(self.q(q), self.k(kv), self.v(kv), self.n_heads, key_mask)
        return self.o(ctx)

    def linears(self) -> list[Linear]:
        return [self.q, self.k, self.v, self.o]


class FeedForward:
    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int, rng: Rng):
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden, rng)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(K.gelu(self.fc1(x)))

    def linears(self) -> list[Linear]:
        return [self.fc1, self.fc2]


def sinusoid_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    ang = pos / np.power(10000.0, 2 * i / dim)
    pe = np.zeros((length, dim), np.float32)
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


def collect_linears(obj, seen=None) -> list[Linear]:
    """Every :class:`Linear` reachable through attributes/lists of ``obj``, in definition order."""
    seen = set() if seen is None else seen
    found: list[Linear] = []
    if id(obj) in seen:
        return found
    seen.add(id(obj))
    if isinstance(obj, Linear):
        return [obj]
    if isinstance(obj, (list, tuple)):
        for item in obj:
            found.extend(collect_linears(item, seen))
        return found
    if hasattr(obj, "__dict__") and not isinstance(obj, (Tensor, np.ndarray, ParamStore)):
        for value in vars(obj).values():
            found.extend(collect_linears(value, seen))
    return found


class Adam:
    """Adam with bias correction and optional global-norm clipping."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-9, clip: float | None = 5.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        self.t += 1
        norm = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in self.params))
        factor = 1.0
        if self.clip is not None and norm > self.clip:
            factor = self.clip / (norm + 1e-12)
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * factor
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)
        return norm

    def zero_grad(self) -> None:
        K.zero_grads(self.params)
