"""Minimal differentiable-network substrate on numpy.

Reverse-mode autodiff over a small op set (enough for dense stacks and a
multi-head attention encoder), a named parameter store, an adaptive-moment
optimizer, and a checkpoint format. Everything is float64 and
single-threaded; determinism comes from seeded initialization and a pure
numpy update path.
"""

from __future__ import annotations

import hashlib
import os
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable graph recording (forward-only inference)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1
                 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Array node in a reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad and _GRAD_ENABLED[-1]
        if _GRAD_ENABLED[-1]:
            self._parents = parents
            self._vjp = vjp
        else:
            self._parents = ()
            self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self):
        """Reverse-mode sweep from this scalar."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, grad in zip(node._parents, node._vjp(node.grad)):
                if grad is not None:
                    parent._accumulate(grad)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data
        return Tensor(out_data, parents=(self, other), vjp=lambda g: (
            _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(a * b, parents=(self, other), vjp=lambda g: (
            _unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)))

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(a / b, parents=(self, other), vjp=lambda g: (
            _unbroadcast(g / b, self.shape),
            _unbroadcast(-g * a / (b * b), other.shape)))

    def __pow__(self, exponent: float):
        a = self.data
        return Tensor(a ** exponent, parents=(self,), vjp=lambda g: (
            g * exponent * a ** (exponent - 1.0),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        out = np.matmul(a, b)

        def vjp(g):
            if b.ndim == 1:
                ga = np.multiply.outer(g, b) if a.ndim > 1 else g * b
                gb = np.matmul(np.swapaxes(a, -1, -2), g) if a.ndim > 1 \
                    else g * a
            elif a.ndim == 1:
                ga = np.matmul(g, np.swapaxes(b, -1, -2))
                gb = np.multiply.outer(a, g)
            else:
                ga = np.matmul(g, np.swapaxes(b, -1, -2))
                gb = np.matmul(np.swapaxes(a, -1, -2), g)
            return (_unbroadcast(ga, self.shape),
                    _unbroadcast(gb, other.shape))

        return Tensor(out, parents=(self, other), vjp=vjp)

    # -- shape ------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor(self.data.reshape(shape), parents=(self,),
                      vjp=lambda g: (g.reshape(src),))

    def swapaxes(self, ax1, ax2):
        return Tensor(np.swapaxes(self.data, ax1, ax2), parents=(self,),
                      vjp=lambda g: (np.swapaxes(g, ax1, ax2),))

    def __getitem__(self, key):
        src_shape = self.shape

        def vjp(g):
            full = np.zeros(src_shape)
            np.add.at(full, key, g)
            return (full,)

        return Tensor(self.data[key], parents=(self,), vjp=vjp)

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        src = self.shape

        def vjp(g):
            if axis is None:
                return (np.full(src, g),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, src).copy(),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                      parents=(self,), vjp=vjp)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims=False):
        out = self.data.max(axis=axis, keepdims=True)
        mask = (self.data == out)
        mask = mask / mask.sum(axis=axis, keepdims=True)

        def vjp(g):
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (mask * g_exp,)

        return Tensor(out if keepdims else out.squeeze(axis=axis),
                      parents=(self,), vjp=vjp)

    # -- elementwise ------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, parents=(self,), vjp=lambda g: (g * out,))

    def log(self):
        a = self.data
        return Tensor(np.log(a), parents=(self,), vjp=lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor(out, parents=(self,), vjp=lambda g: (g / (2.0 * out),))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, parents=(self,),
                      vjp=lambda g: (g * (1.0 - out * out),))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  parents=tuple(tensors), vjp=vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear activation."""
    x = as_tensor(x)
    a = x.data
    phi = 0.5 * (1.0 + erf(a / np.sqrt(2.0)))
    out = a * phi

    def vjp(g):
        pdf = np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)
        return (g * (phi + a * pdf),)

    return Tensor(out, parents=(x,), vjp=vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return Tensor(s, parents=(x,), vjp=vjp)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    x = as_tensor(x)
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a - mu) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor(y, parents=(x,), vjp=vjp)


class PoisonedUpdateError(ValueError):
    """An optimizer step was refused because a gradient is not finite."""


class ParameterStore:
    """Named parameter tensors with seed-controlled initialization.

    Names are unique and shapes immutable after creation.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape, fan_in: int | None = None,
            zero: bool = False) -> Tensor:
        """Create a parameter: N(0, 1/fan_in) Gaussian, or zeros."""
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        shape = tuple(shape)
        if zero:
            data = np.zeros(shape)
        else:
            scale = 1.0 / np.sqrt(fan_in if fan_in else max(shape[-1], 1))
            data = self._rng.standard_normal(shape) * scale
        tensor = Tensor(data, requires_grad=True)
        self._params[name] = tensor
        return tensor

    def add_array(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        tensor = Tensor(np.array(data, dtype=np.float64),
                        requires_grad=True)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def n_values(self) -> int:
        return sum(p.data.size for p in self._params.values())


def gradients(store: ParameterStore) -> dict:
    """Gradients aligned with the store; disconnected parameters get zeros."""
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in store.items()}


# -- layers ---------------------------------------------------------------

def init_dense(store: ParameterStore, name: str, in_dim: int,
               out_dim: int) -> None:
    store.add(f"{name}.weight", (out_dim, in_dim), fan_in=in_dim)
    store.add(f"{name}.bias", (out_dim,), zero=True)


def dense_forward(store: ParameterStore, name: str, x,
                  activation: str = "linear") -> Tensor:
    """Affine map x @ W.T + b over the last axis, then an activation.

    Leading axes are flattened for the matmul and restored afterwards.
    """
    x = as_tensor(x)
    weight = store[f"{name}.weight"]
    bias = store[f"{name}.bias"]
    out_dim, in_dim = weight.shape
    if x.shape[-1] != in_dim:
        raise ValueError(f"dense '{name}' expects input dim {in_dim}, "
                         f"got {x.shape[-1]}")
    lead = x.shape[:-1]
    flat = x.reshape((-1, in_dim)) if x.ndim != 2 else x
    y = flat @ weight.swapaxes(0, 1) + bias
    if x.ndim != 2:
        y = y.reshape(lead + (out_dim,))
    if activation == "linear":
        return y
    if activation == "gelu":
        return gelu(y)
    if activation == "tanh":
        return y.tanh()
    raise ValueError(f"unknown activation '{activation}'")


@dataclass
class EncoderConfig:
    model_dim: int = 64
    heads: int = 4
    layers: int = 4

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must be divisible by heads")


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table, (length, dim)."""
    pos = np.arange(length)[:, None]
    idx = np.arange(dim // 2)[None, :]
    angles = pos / (10000.0 ** (2.0 * idx / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def init_attention(store: ParameterStore, config: EncoderConfig,
                   prefix: str, in_dim: int) -> None:
    d = config.model_dim
    init_dense(store, f"{prefix}.input", in_dim, d)
    store.add(f"{prefix}.cls", (d,), fan_in=d)
    for i in range(config.layers):
        block = f"{prefix}.block{i}"
        init_dense(store, f"{block}.qkv", d, 3 * d)
        init_dense(store, f"{block}.proj", d, d)
        init_dense(store, f"{block}.ff1", d, 4 * d)
        init_dense(store, f"{block}.ff2", 4 * d, d)


def attention_encode(config: EncoderConfig, store: ParameterStore,
                     sequence, prefix: str = "encoder",
                     positional: bool = True) -> Tensor:
    """CLS-token summary of a sequence.

    `sequence` is (T, in_dim) or (B, T, in_dim); the result is the CLS
    position after `layers` pre-norm attention + feedforward blocks, shape
    (model_dim,) or (B, model_dim). Positional encodings are sinusoidal and
    toggleable; without them the encoder is permutation invariant over the
    sequence positions.
    """
    x = as_tensor(sequence)
    if x.ndim == 2:
        return attention_encode(config, store, x.reshape((1,) + x.shape),
                                prefix, positional).reshape(
                                    (config.model_dim,))
    if x.ndim != 3:
        raise ValueError("sequence must be (T, dim) or (B, T, dim)")
    batch, length, _ = x.shape
    if length == 0:
        raise ValueError("sequence must be non-empty")
    d, heads = config.model_dim, config.heads
    dh = d // heads
    h = dense_forward(store, f"{prefix}.input", x)
    cls = store[f"{prefix}.cls"].reshape((1, 1, d))
    h = concat([cls + Tensor(np.zeros((batch, 1, d))), h], axis=1)
    if positional:
        h = h + Tensor(sinusoidal_positions(length + 1, d)[None])
    for i in range(config.layers):
        block = f"{prefix}.block{i}"
        norm = layer_norm(h)
        qkv = dense_forward(store, f"{block}.qkv", norm)
        qkv = qkv.reshape((batch, length + 1, 3, heads, dh))
        qkv = qkv.swapaxes(1, 3)                       # (B, heads, 3, T, dh)
        q, k, v = qkv[:, :, 0], qkv[:, :, 1], qkv[:, :, 2]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        attn = softmax(scores, axis=-1) @ v            # (B, heads, T, dh)
        merged = attn.swapaxes(1, 2).reshape((batch, length + 1, d))
        h = h + dense_forward(store, f"{block}.proj", merged)
        ff = dense_forward(store, f"{block}.ff1", layer_norm(h),
                           activation="gelu")
        h = h + dense_forward(store, f"{block}.ff2", ff)
    return layer_norm(h)[:, 0, :]


# -- optimizer ------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, store: ParameterStore, lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-6):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def step(self, grads: dict) -> None:
        """One update; refused (no mutation) if any gradient is not finite."""
        for name, grad in grads.items():
            if not np.isfinite(grad).all():
                raise PoisonedUpdateError(
                    f"non-finite gradient for '{name}'")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, grad in grads.items():
            param = self.store[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            param.data -= self.lr * update
            if self.weight_decay:
                param.data -= self.lr * self.weight_decay * param.data


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(store: ParameterStore, path, meta: dict | None = None
                    ) -> None:
    """Directory with a (name, shape) manifest, flat little-endian float64
    parameter blob, and a sha256 integrity line."""
    os.makedirs(path, exist_ok=True)
    names = store.names()
    blob = np.concatenate([store[n].data.ravel() for n in names]) \
        if names else np.zeros(0)
    raw = blob.astype("<f8").tobytes()
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        fh.write(raw)
    digest = hashlib.sha256(raw).hexdigest()
    with open(os.path.join(path, "manifest.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(f"params {len(names)}\n")
        for name in names:
            dims = " ".join(str(d) for d in store[name].shape)
            fh.write(f"{name} {dims}\n".rstrip() + "\n")
        for key, value in (meta or {}).items():
            fh.write(f"meta {key} {value}\n")
        fh.write(f"checksum {digest}\n")


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    """Inverse of save_checkpoint; verifies the checksum."""
    with open(os.path.join(path, "manifest.txt"), "r",
              encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("params "):
        raise ValueError("bad checkpoint manifest")
    count = int(lines[0].split()[1])
    entries = []
    for line in lines[1:1 + count]:
        parts = line.split()
        entries.append((parts[0], tuple(int(d) for d in parts[1:])))
    meta = {}
    checksum = None
    for line in lines[1 + count:]:
        if line.startswith("meta "):
            _, key, value = line.split(" ", 2)
            meta[key] = value
        elif line.startswith("checksum "):
            checksum = line.split()[1]
    with open(os.path.join(path, "params.bin"), "rb") as fh:
        raw = fh.read()
    if checksum is None or hashlib.sha256(raw).hexdigest() != checksum:
        raise ValueError("checkpoint checksum mismatch")
    blob = np.frombuffer(raw, dtype="<f8")
    store = ParameterStore(seed=0)
    offset = 0
    for name, shape in entries:
        size = int(np.prod(shape)) if shape else 1
        data = blob[offset:offset + size].reshape(shape)
        store.add_array(name, data)
        offset += size
    if offset != blob.size:
        raise ValueError("checkpoint blob size mismatch")
    return store, meta
