"""Dense float64 tensors with reverse-mode differentiation, plus the layer
primitives (linear, layer-norm, softmax, multi-head cross-attention) used by
every learnable module.

Only what the model needs is implemented.  Each op computes its forward value
with numpy and, when any input requires a gradient, records a closure that maps
the output gradient to per-input gradients.
"""

from __future__ import annotations

import contextlib
import math
import zlib
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import CheckError, DimensionError, NumericError, ParseError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that
        requires a gradient."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _topo_order(root):
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


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracks(*xs):
    return _GRAD_ENABLED and any(x.requires_grad for x in xs)


def _node(data, parents, backward):
    return Tensor(data, True, parents, backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    if not _tracks(a, b):
        return Tensor(out)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    if not _tracks(a, b):
        return Tensor(out)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    if not _tracks(a, b):
        return Tensor(out)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    if not _tracks(a, b):
        return Tensor(out)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw)


def neg(a):
    out = -a.data
    if not _tracks(a):
        return Tensor(out)
    return _node(out, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    if not _tracks(a):
        return Tensor(out)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    out = np.log(a.data)
    if not _tracks(a):
        return Tensor(out)
    return _node(out, (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    if not _tracks(a):
        return Tensor(out)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if not _tracks(a):
        return Tensor(out)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximated GELU (smooth everywhere)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    if not _tracks(a):
        return Tensor(out)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), bw)


def clip(a, lo, hi):
    out = np.clip(a.data, lo, hi)
    if not _tracks(a):
        return Tensor(out)
    inside = (a.data > lo) & (a.data < hi)
    return _node(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if not _tracks(a):
        return Tensor(out)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    out = a.data.reshape(shape)
    if not _tracks(a):
        return Tensor(out)
    orig = a.shape
    return _node(out, (a,), lambda g: (g.reshape(orig),))


def swapaxes(a, i, j):
    out = np.swapaxes(a.data, i, j)
    if not _tracks(a):
        return Tensor(out)
    return _node(out, (a,), lambda g: (np.swapaxes(g, i, j),))


def broadcast_to(a, shape):
    out = np.broadcast_to(a.data, shape)
    if not _tracks(a):
        return Tensor(out)
    orig = a.shape
    return _node(out, (a,), lambda g: (_unbroadcast(g, orig),))


def concat(tensors: Sequence[Tensor], axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    if not _tracks(*tensors):
        return Tensor(out)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    if not _tracks(*tensors):
        return Tensor(out)
    n = len(tensors)
    return _node(
        out, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))
    )


def getitem(a, index):
    out = a.data[index]
    if not _tracks(a):
        return Tensor(out)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(out, (a,), bw)


def neighborhood_max(x, neighbors):
    """``out[i, c] = max_j x[neighbors[i, j], c]`` for a 2-D ``x``.

    The gradient of each output entry flows to the first maximizing neighbor.
    """
    gathered = x.data[neighbors]  # N x k x d
    out = gathered.max(axis=1)
    if not _tracks(x):
        return Tensor(out)
    n, d = x.shape
    k = neighbors.shape[1]

    def bw(g):
        # first maximizing slot per (point, channel); min-reduce is much
        # faster than argmax over a short strided axis
        slot = np.where(gathered == out[:, None, :], np.arange(k)[None, :, None], k).min(axis=1)
        src = np.take_along_axis(neighbors, slot, axis=1)
        flat = (src * d + np.arange(d)).ravel()
        return (np.bincount(flat, weights=g.ravel(), minlength=n * d).reshape(n, d),)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    if not _tracks(a, b):
        return Tensor(out)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw)


def linear(x, weight, bias=None):
    """``y = x W + b`` over the last axis of ``x``; W has shape (d_in, d_out)."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} does not match weight shape {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    if not _tracks(*parents):
        return Tensor(out)
    d_in, d_out = weight.shape

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = (g @ weight.data.T) if x.requires_grad else None
        gw = (x.data.reshape(-1, d_in).T @ g2) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, parents, bw)


def softmax(logits, axis=-1):
    logits = as_tensor(logits)
    x = logits.data
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax received non-finite logits")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    if not _tracks(logits):
        return Tensor(out)
    return _node(out, (logits,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gamma, beta, eps=1e-5):
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    if not _tracks(x, gamma, beta):
        return Tensor(out)
    d = x.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _node(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- parameters and modules


class Parameter(Tensor):
    """A named, trainable tensor.

    ``init_mode`` is one of ``xavier``, ``zeros`` or ``constant``; the actual
    values are drawn by :meth:`Module.init` from a generator keyed on the
    parameter's full dotted name, so initialization is independent of
    construction order.
    """

    __slots__ = ("name", "init_mode", "init_value", "fans")

    def __init__(self, shape, init_mode="xavier", value=0.0, fans=None):
        if init_mode not in ("xavier", "zeros", "constant"):
            raise ValueError(f"unknown init_mode {init_mode!r}")
        super().__init__(np.zeros(shape), requires_grad=True)
        self.name = ""
        self.init_mode = init_mode
        self.init_value = float(value)
        if fans is None:
            shape = tuple(shape)
            fans = (shape[0], shape[1]) if len(shape) == 2 else (int(np.prod(shape)), 1)
        self.fans = fans

    def reset(self, seed):
        if self.init_mode == "zeros":
            self.data = np.zeros(self.shape)
        elif self.init_mode == "constant":
            self.data = np.full(self.shape, self.init_value)
        else:
            rng = np.random.default_rng([seed, zlib.crc32(self.name.encode())])
            limit = math.sqrt(6.0 / (self.fans[0] + self.fans[1]))
            self.data = rng.uniform(-limit, limit, size=self.shape)


class Module:
    """Container that discovers parameters and sub-modules from attributes."""

    def named_parameters(self, prefix="") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, prefix + key)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def init(self, seed, prefix=""):
        for name, p in self.named_parameters(prefix):
            p.name = name
            p.reset(seed)
        return self

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if strict and (missing or unexpected):
            raise DimensionError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != p.shape:
                    raise DimensionError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
                p.data = arr.copy()
        return missing


def _walk(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, d_in, d_out, bias=True, init_mode="xavier"):
        self.weight = Parameter((d_in, d_out), init_mode)
        self.bias = Parameter((d_out,), "zeros") if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gamma = Parameter((d,), "constant", 1.0)
        self.beta = Parameter((d,), "zeros")
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class CrossAttention(Module):
    """Multi-head scaled dot-product attention with input and output
    projections.  No residual is applied here.  The key projection has no
    bias: a shared offset on every key shifts each query's scores by a
    constant, which softmax cancels, so such a bias would only ever receive
    a zero gradient.

    Inputs are ``[..., q, d]`` queries and ``[..., k, d]`` keys/values with
    identical leading dimensions.
    """

    def __init__(self, d, heads=4):
        if d % heads:
            raise DimensionError(f"width {d} is not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q_proj = Linear(d, d)
        self.k_proj = Linear(d, d, bias=False)
        self.v_proj = Linear(d, d)
        self.out_proj = Linear(d, d)

    def _split(self, x):
        *lead, n, _ = x.shape
        return swapaxes(reshape(x, (*lead, n, self.heads, self.d // self.heads)), -3, -2)

    def __call__(self, query, key, value, return_weights=False):
        if key.shape[-2] == 0:
            raise DimensionError("cross-attention over an empty key set")
        if key.shape[:-2] != query.shape[:-2] or value.shape != key.shape:
            raise DimensionError(
                f"cross-attention shapes disagree: query {query.shape}, key {key.shape}, value {value.shape}"
            )
        if key.shape[-2] == 1 and not return_weights:
            # a single key gets softmax weight exactly 1 and the query/key
            # projections receive exactly zero gradient; skip them
            out = self.out_proj(self.v_proj(value))
            return broadcast_to(out, (*query.shape[:-1], self.d))
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.d // self.heads))
        weights = softmax(scores, axis=-1)
        mixed = swapaxes(matmul(weights, v), -3, -2)
        *lead, n, _, _ = mixed.shape
        out = self.out_proj(reshape(mixed, (*lead, n, self.d)))
        if return_weights:
            return out, weights.data
        return out


# ---------------------------------------------------------------- verification


def grad_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h=1e-5):
    """Largest relative error between reverse-mode and central-difference
    gradients over every element of ``tensors``.

    ``fn`` must rebuild the scalar loss from the current tensor values.
    Relative error uses the denominator ``max(|a|, |b|, 1e-8)``.
    """
    tensors = [t for t in tensors if t.requires_grad]
    for t in tensors:
        t.grad = None
    loss = fn()
    if loss.data.size != 1:
        raise CheckError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    with no_grad():
        if fn().data != loss.data:
            raise CheckError("function is not deterministic; finite differences are meaningless")
        worst = 0.0
        for t, a in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise CheckError("tensor data must be contiguous for grad_check")
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn().data)
                flat[i] = orig - h
                fm = float(fn().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = abs(af[i] - num) / max(abs(af[i]), abs(num), 1e-8)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoint files

_MANIFEST_HEADER = "# voxafford parameters v1"


def save_parameters(stem, named: Sequence[tuple[str, np.ndarray, str]]):
    """Write ``stem.manifest`` (name, shape, init_mode per line) and
    ``stem.bin`` (little-endian float64 values in manifest order)."""
    stem = Path(stem)
    names = [n for n, _, _ in named]
    if len(set(names)) != len(names):
        raise DimensionError("parameter names must be unique")
    lines = [_MANIFEST_HEADER]
    blobs = []
    for name, arr, mode in named:
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(f"{name}\t({','.join(str(s) for s in arr.shape)})\t{mode}")
        blobs.append(arr.astype("<f8").tobytes())
    stem.with_suffix(".manifest").write_text("\n".join(lines) + "\n")
    stem.with_suffix(".bin").write_bytes(b"".join(blobs))


def load_parameters(stem) -> dict[str, tuple[np.ndarray, str]]:
    stem = Path(stem)
    mpath, bpath = stem.with_suffix(".manifest"), stem.with_suffix(".bin")
    text = mpath.read_text().splitlines()
    if not text or text[0] != _MANIFEST_HEADER:
        raise ParseError("missing manifest header", mpath, 1)
    blob = bpath.read_bytes()
    out, offset = {}, 0
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError("expected name<TAB>shape<TAB>init_mode", mpath, lineno)
        name, shape_txt, mode = parts
        inner = shape_txt.strip("()")
        shape = tuple(int(s) for s in inner.split(",") if s)
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise ParseError(f"binary blob too short for {name}", bpath)
        out[name] = (np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).astype(np.float64), mode)
        offset = end
    if offset != len(blob):
        raise ParseError("binary blob has trailing bytes", bpath)
    return out


def save_module(module: Module, stem):
    save_parameters(stem, [(n, p.data, p.init_mode) for n, p in module.named_parameters()])


def load_module(module: Module, stem, strict=True):
    loaded = load_parameters(stem)
    return module.load_state_dict({k: v for k, (v, _) in loaded.items()}, strict=strict)
