"""Reverse-mode automatic differentiation over float64 numpy arrays.

Only what the dense encoder/decoder/classifier stacks need: elementwise
arithmetic with broadcasting, matmul, reductions, the usual activations,
column slicing/concatenation, and the loss functions.

Gradient semantics: ``Tensor.backward()`` *accumulates* into ``.grad`` of the
leaf tensors that require gradients.  Calling it twice on the same graph
without ``zero_grad`` therefore leaves exactly twice the gradient.  The
trainer uses :func:`grad` instead, which returns fresh arrays for a chosen
parameter subset and never touches ``.grad``.
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "sigmoid", "tanh", "softmax")
PROB_EPS = 1e-12


class ShapeError(ValueError):
    """Operand dimensions do not line up."""

    def __init__(self, op: str, expected, got):
        self.op = op
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: expected {expected}, got {got}")


_recording = True


class no_grad:
    """Context manager that disables graph recording (evaluation passes)."""

    def __enter__(self):
        global _recording
        self._prev, _recording = _recording, False

    def __exit__(self, *exc):
        global _recording
        _recording = self._prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        grads = _gradients(self)
        for leaf, g in grads.values():
            if leaf.requires_grad:
                leaf.grad = leaf.grad + g

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = _wrap(other)
        a_shape, b_shape = self.shape, other.shape
        return _node(self.data + other.data, (self, other),
                     lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)), "add")

    __radd__ = __add__

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = _wrap(other)
        a_shape, b_shape = self.shape, other.shape
        return _node(self.data - other.data, (self, other),
                     lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)), "sub")

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        other = _wrap(other)
        a, b = self.data, other.data
        return _node(a * b, (self, other),
                     lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        a, b = self.data, other.data
        return _node(a / b, (self, other),
                     lambda g: (_unbroadcast(g / b, a.shape),
                                _unbroadcast(-g * a / (b * b), b.shape)), "div")

    def __pow__(self, p: float):
        a = self.data
        return _node(a ** p, (self,), lambda g: (g * p * a ** (p - 1),), f"pow{p}")

    def __matmul__(self, other):
        other = _wrap(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", f"(m,{b.shape[0] if b.ndim else '?'})", a.shape)
        return _node(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g), "matmul")

    def __getitem__(self, idx):
        shape = self.shape
        basic = all(isinstance(i, (slice, int)) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def back(g):
            full = np.zeros(shape)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return _node(self.data[idx], (self,), back, "slice")

    # -- reductions ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        shape = self.shape
        n = self.data.size if axis is None else shape[axis]

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, shape).copy(),)

        return _node(self.data.mean(axis=axis, keepdims=keepdims), (self,), back, "mean")

    # -- elementwise functions --------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return _node(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        return _node(np.log(a), (self,), lambda g: (g / a,), "log")

    def relu(self):
        mask = self.data > 0  # subgradient 0 at 0
        return _node(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,), "relu")

    def sigmoid(self):
        out = _sigmoid(self.data)
        return _node(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def tanh(self):
        out = np.tanh(self.data)
        return _node(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def softmax(self):
        out = softmax_array(self.data)

        def back(g):
            return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

        return _node(out, (self,), back, "softmax")

    def activate(self, name: str):
        if name == "identity":
            return self
        if name not in ACTIVATIONS:
            raise ValueError(f"unknown activation {name!r}")
        return getattr(self, name)()


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax_array(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, backward, op: str) -> Tensor:
    if _recording and any(p.tracked for p in parents):
        return Tensor(data, _parents=parents, _backward=backward, op=op)
    return Tensor(data)


def _topo(root: Tensor) -> list[Tensor]:
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
            if p.tracked and id(p) not in seen:
                stack.append((p, False))
    return order


def _gradients(loss: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
    if loss.data.size != 1:
        raise ShapeError("backward", "scalar loss", loss.shape)
    order = _topo(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            leaves[id(node)] = (node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.tracked:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return leaves


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. ``params``; zeros for unreached ones."""
    leaves = _gradients(loss)
    return [leaves[id(p)][1] if id(p) in leaves else np.zeros_like(p.data) for p in params]


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError("labels", "1-D class indices", labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)]
        raise ValueError(f"label {int(bad[0])} outside [0, {k})")
    return labels.astype(np.int64)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class; probabilities clamped at 1e-12."""
    probs = _wrap(probs)
    b, k = probs.shape
    labels = _check_labels(labels, k)
    if len(labels) != b:
        raise ShapeError("cross_entropy", f"{b} labels", len(labels))
    if not np.allclose(probs.data.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise ValueError("cross_entropy: rows of predicted_probs must sum to 1")
    rows = np.arange(b)
    picked = probs.data[rows, labels]
    clamped = np.maximum(picked, PROB_EPS)

    def back(g):
        out = np.zeros((b, k))
        out[rows, labels] = np.where(picked > PROB_EPS, -g / (b * clamped), 0.0)
        return (out,)

    return _node(np.asarray(-np.log(clamped).mean()), (probs,), back, "cross_entropy")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Fused softmax + cross-entropy via log-sum-exp."""
    logits = _wrap(logits)
    b, k = logits.shape
    labels = _check_labels(labels, k)
    if len(labels) != b:
        raise ShapeError("softmax_cross_entropy", f"{b} labels", len(labels))
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = (lse - z[rows, labels]).mean()

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _node(np.asarray(loss), (logits,), back, "softmax_cross_entropy")


def mse(a: Tensor, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    diff = a - b
    return (diff * diff).mean()


# -- dense layers ------------------------------------------------------------

def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class DenseLayer:
    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity",
                 rng: np.random.Generator | None = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim, self.out_dim, self.activation = in_dim, out_dim, activation
        w = glorot_uniform(in_dim, out_dim, rng) if rng is not None else np.zeros((in_dim, out_dim))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return forward_dense(self, x)

    def __repr__(self):
        return f"DenseLayer({self.in_dim}->{self.out_dim}, {self.activation})"


def forward_dense(layer: DenseLayer, x) -> Tensor:
    x = _wrap(x)
    if x.data.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError("forward_dense", f"(batch, {layer.in_dim})", x.shape)
    return (x @ layer.weight + layer.bias).activate(layer.activation)


class MLP:
    """A stack of dense layers: hidden layers share one activation."""

    def __init__(self, layers: list[DenseLayer]):
        self.layers = layers

    @classmethod
    def build(cls, sizes: Sequence[int], rng: np.random.Generator,
              hidden: str = "relu", out: str = "identity") -> "MLP":
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = out if i == len(sizes) - 2 else hidden
            layers.append(DenseLayer(a, b, act, rng))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def __call__(self, x) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def param_digest(params: Iterable[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params[i].data``."""
    if len(params) != len(grads):
        raise ShapeError("adam_step", f"{len(params)} gradients", len(grads))
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError("adam_step", p.data.shape, g.shape)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self, grads: Sequence[np.ndarray]):
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# -- checkpoint format --------------------------------------------------------
#
#   b"NDGRAD\0\0"  u32 version  u32 layer_count
#   per layer: u32 in_dim, u32 out_dim, u32 activation code,
#              f64[in_dim*out_dim] weights (row-major), f64[out_dim] bias
#   all little-endian.

MAGIC = b"NDGRAD\0\0"
VERSION = 1


def dump_layers(layers: Sequence[DenseLayer]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(layers)))
    for layer in layers:
        buf.write(struct.pack("<III", layer.in_dim, layer.out_dim, ACTIVATIONS.index(layer.activation)))
        buf.write(np.ascontiguousarray(layer.weight.data, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.bias.data, dtype="<f8").tobytes())
    return buf.getvalue()


def parse_layers(blob: bytes) -> list[DenseLayer]:
    if blob[:8] != MAGIC:
        raise ValueError("not an ndgrad checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise ValueError(f"unsupported ndgrad checkpoint version {version}")
    off = 16
    layers = []
    for _ in range(count):
        in_dim, out_dim, code = struct.unpack_from("<III", blob, off)
        off += 12
        layer = DenseLayer(in_dim, out_dim, ACTIVATIONS[code])
        nw = in_dim * out_dim
        layer.weight.data = np.frombuffer(blob, "<f8", nw, off).reshape(in_dim, out_dim).astype(np.float64)
        off += 8 * nw
        layer.bias.data = np.frombuffer(blob, "<f8", out_dim, off).astype(np.float64)
        off += 8 * out_dim
        layer.weight.grad = np.zeros_like(layer.weight.data)
        layer.bias.grad = np.zeros_like(layer.bias.data)
        layers.append(layer)
    if off != len(blob):
        raise ValueError(f"trailing bytes in ndgrad checkpoint at offset {off}")
    return layers


def save_checkpoint(path, layers: Sequence[DenseLayer]):
    with open(path, "wb") as f:
        f.write(dump_layers(layers))


def load_checkpoint(path) -> list[DenseLayer]:
    with open(path, "rb") as f:
        return parse_layers(f.read())
