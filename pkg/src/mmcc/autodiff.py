"""Reverse-mode automatic differentiation on dense float64 arrays.

Operations are recorded on a tape (:class:`Graph`) only while a graph is
active and at least one input is tracked, so the same model code runs both
as a cheap numpy forward pass and as a differentiable program.  The tape
order is a topological order by construction; :meth:`Graph.backward` walks
it in reverse, visiting each recorded node exactly once.

Example
-------
>>> w = Tensor([2.0], requires_grad=True)
>>> with Graph() as g:
...     y = w * 3.0
>>> g.backward(y)[w]
array([3.])
"""
from __future__ import annotations

import struct
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError

__all__ = [
    "Tensor", "Graph", "DenseLayer", "Network",
    "forward", "backward", "no_grad_value",
    "concat", "stack", "where", "maximum", "exp", "log", "sqrt", "relu",
    "sigmoid", "tanh", "square", "dense", "grouped_softmax", "custom",
    "dump_snapshot", "load_snapshot",
]

_ACTIVE: list["Graph"] = []

ACTIVATIONS = ("identity", "relu", "sigmoid", "grouped_softmax")


class Node:
    # graph and output are weak so a tape never forms reference cycles and is
    # freed as soon as the caller drops it
    __slots__ = ("_graph", "index", "inputs", "needs", "fn", "_output")

    def __init__(self, graph, index, inputs, needs, fn, output):
        self._graph = weakref.ref(graph)
        self.index = index
        self.inputs = inputs
        self.needs = needs
        self.fn = fn
        self._output = weakref.ref(output)

    @property
    def graph(self):
        return self._graph()

    @property
    def output(self):
        return self._output()


class Tensor:
    """Dense float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Row-major flat copy of the data."""
        return self.data.ravel().copy()

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic -----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(x: Tensor, graph: "Graph") -> bool:
    node = x._node
    if node is not None:
        return node.graph is graph
    return x.requires_grad


def _op(value: np.ndarray, inputs: tuple, fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = False
    out._node = None
    out.name = None
    if _ACTIVE:
        graph = _ACTIVE[-1]
        needs = tuple(_tracked(x, graph) for x in inputs)
        if any(needs):
            graph._record(out, inputs, needs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Graph:
    """Tape of recorded operations.

    Use as a context manager; every differentiable operation executed inside
    the ``with`` block whose inputs depend on a ``requires_grad`` tensor is
    appended to :attr:`nodes`.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def _record(self, out, inputs, needs, fn) -> None:
        node = Node(self, len(self.nodes), inputs, needs, fn, out)
        self.nodes.append(node)
        out._node = node

    def backward(self, output: Tensor, seed=None, *, retain_all: bool = False) -> dict:
        """Propagate ``seed`` (default ones) from ``output`` back through the tape.

        Returns a mapping from each reached leaf tensor (``requires_grad``)
        to its gradient array.  With ``retain_all`` the mapping also holds
        gradients for intermediate tensors.
        """
        node = output._node
        if node is None or node.graph is not self:
            raise UsageError("backward called on a tensor that was not produced by a forward pass on this graph")
        if seed is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
            if seed.shape != output.data.shape:
                raise DimensionError(f"seed shape {seed.shape} does not match output shape {output.data.shape}")
        grads: dict[int, np.ndarray] = {id(output): seed}
        keep: dict[int, Tensor] = {}
        for nd in reversed(self.nodes[: node.index + 1]):
            out = nd.output
            if out is None:         # dropped intermediate: nothing downstream can reach it
                continue
            key = id(out)
            g = grads.get(key)
            if g is None:
                continue
            if retain_all:
                keep[key] = out
            else:
                del grads[key]
            in_grads = nd.fn(g, nd.needs)
            for x, need, gx in zip(nd.inputs, nd.needs, in_grads):
                if not need or gx is None:
                    continue
                k = id(x)
                prev = grads.get(k)
                grads[k] = gx if prev is None else prev + gx
                if x._node is None:
                    keep[k] = x
        return {keep[k]: grads[k] for k in keep if k in grads}


def backward(graph: Graph, seed_output: Tensor, seed=None) -> dict:
    """Module-level alias for :meth:`Graph.backward`."""
    return graph.backward(seed_output, seed)


# elementwise binary ops -----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g, needs):
        return (_unbroadcast(g, a.data.shape) if needs[0] else None,
                _unbroadcast(g, b.data.shape) if needs[1] else None)
    return _op(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g, needs):
        return (_unbroadcast(g, a.data.shape) if needs[0] else None,
                _unbroadcast(-g, b.data.shape) if needs[1] else None)
    return _op(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g, needs):
        return (_unbroadcast(g * b.data, a.data.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.data.shape) if needs[1] else None)
    return _op(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    q = a.data / b.data

    def fn(g, needs):
        return (_unbroadcast(g / b.data, a.data.shape) if needs[0] else None,
                _unbroadcast(-g * q / b.data, b.data.shape) if needs[1] else None)
    return _op(q, (a, b), fn)


def neg(a) -> Tensor:
    return _op(-a.data, (a,), lambda g, needs: (-g,))


def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant real exponent."""
    a = _as_tensor(a)
    p = float(p)
    if p == 0.0:
        return _op(np.ones_like(a.data), (a,), lambda g, needs: (np.zeros_like(g),))
    if p == 1.0:
        return _op(a.data.copy(), (a,), lambda g, needs: (g,))
    if p == 2.0:
        return square(a)
    out = a.data ** p

    def fn(g, needs):
        return (g * p * a.data ** (p - 1.0),)
    return _op(out, (a,), fn)


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _op(a.data * a.data, (a,), lambda g, needs: (2.0 * g * a.data,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` for a constant floor; zero gradient where clipped."""
    a = _as_tensor(a)
    mask = a.data > floor
    return _op(np.where(mask, a.data, floor), (a,), lambda g, needs: (g * mask,))


def where(cond, a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def fn(g, needs):
        return (_unbroadcast(np.where(cond, g, 0.0), a.data.shape) if needs[0] else None,
                _unbroadcast(np.where(cond, 0.0, g), b.data.shape) if needs[1] else None)
    return _op(np.where(cond, a.data, b.data), (a, b), fn)


# elementwise unary ops ------------------------------------------------------
def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _op(out, (a,), lambda g, needs: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _op(np.log(a.data), (a,), lambda g, needs: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _op(out, (a,), lambda g, needs: (g * 0.5 / out,))


def relu(a) -> Tensor:
    # subgradient at exactly zero is zero
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _op(a.data * mask, (a,), lambda g, needs: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _op(s, (a,), lambda g, needs: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _op(out, (a,), lambda g, needs: (g * (1.0 - out * out),))


# structural ops -------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes {a.data.shape} and {b.data.shape} are incompatible")

    def fn(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)
    return _op(a.data @ b.data, (a, b), fn)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape

    def fn(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), fn)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    return _op(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(old),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    basic = _is_basic_index(idx)

    def fn(g, needs):
        z = np.zeros_like(a.data)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)
    return _op(a.data[idx], (a,), fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.data.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g, needs):
        return tuple(np.split(g, bounds, axis=axis))
    return _op(np.concatenate([t.data for t in ts], axis=axis), ts, fn)


def stack(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)

    def fn(g, needs):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))
    return _op(np.stack([t.data for t in ts], axis=axis), ts, fn)


# fused network ops ----------------------------------------------------------
def dense(x, w: Tensor, b: Tensor, activation: str = "identity") -> Tensor:
    """``activation(x @ w.T + b)`` with ``w`` stored as (out, in)."""
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim != 2 or xd.shape[1] != w.data.shape[1]:
        raise DimensionError(f"dense layer expects input width {w.data.shape[1]}, got shape {xd.shape}")
    z = xd @ w.data.T
    z += b.data
    if activation == "identity":
        out, dact = z, None
    elif activation == "relu":
        mask = z > 0.0
        out, dact = z * mask, mask
    elif activation == "sigmoid":
        out = _sigmoid(z)
        dact = out * (1.0 - out)
    else:
        raise ConfigurationError(f"dense() does not handle activation {activation!r}")

    def fn(g, needs):
        gz = g if dact is None else g * dact
        return (gz @ w.data if needs[0] else None,
                gz.T @ xd if needs[1] else None,
                gz.sum(axis=0) if needs[2] else None)
    return _op(out, (x, w, b), fn)


_TINY = np.finfo(np.float64).tiny


def _check_groups(groups, width: int) -> list[np.ndarray]:
    idx = [np.asarray(gr, dtype=np.intp) for gr in groups]
    if any(len(gr) == 0 for gr in idx):
        raise ConfigurationError("grouped softmax has an empty group")
    flat = np.sort(np.concatenate(idx))
    if len(flat) != width or not np.array_equal(flat, np.arange(width)):
        raise ConfigurationError(f"groups do not partition the {width} output indices")
    return idx


def grouped_softmax(raw, groups, scales) -> Tensor:
    """Softmax within each index group, multiplied by that group's scale.

    ``raw`` is (B, n); ``scales`` broadcasts to (B, G).  Every output is
    strictly positive (a floor of the smallest normal double guards against
    underflow) and each group sums to its scale.
    """
    raw = _as_tensor(raw)
    scales = _as_tensor(scales)
    squeeze = raw.data.ndim == 1
    rd = raw.data[None, :] if squeeze else raw.data
    idx = _check_groups(groups, rd.shape[1])
    sd = np.broadcast_to(scales.data, (rd.shape[0], len(idx)))
    if not np.all(sd > 0.0) or not np.all(np.isfinite(sd)):
        raise ConfigurationError("grouped softmax scales must be finite and positive")
    probs = np.empty_like(rd)
    out = np.empty_like(rd)
    for k, gr in enumerate(idx):
        r = rd[:, gr]
        e = np.exp(r - r.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        probs[:, gr] = p
        out[:, gr] = p * sd[:, k:k + 1] + _TINY

    def fn(g, needs):
        g2 = g[None, :] if squeeze else g
        graw = np.empty_like(rd) if needs[0] else None
        gs = np.empty((rd.shape[0], len(idx))) if needs[1] else None
        for k, gr in enumerate(idx):
            p = probs[:, gr]
            gg = g2[:, gr]
            inner = np.sum(gg * p, axis=1, keepdims=True)
            if graw is not None:
                graw[:, gr] = sd[:, k:k + 1] * p * (gg - inner)
            if gs is not None:
                gs[:, k] = inner[:, 0]
        if graw is not None and squeeze:
            graw = graw[0]
        return (graw, _unbroadcast(gs, scales.data.shape) if gs is not None else None)
    return _op(out[0] if squeeze else out, (raw, scales), fn)


def custom(value, inputs: Sequence, vjp: Callable) -> Tensor:
    """Record a primitive with a hand-written vector-Jacobian product.

    ``vjp(g)`` receives the output cotangent and returns one array (shaped
    like the matching input) per entry of ``inputs``.
    """
    ts = tuple(_as_tensor(x) for x in inputs)

    def fn(g, needs):
        grads = vjp(g)
        if len(grads) != len(ts):
            raise UsageError(f"custom vjp returned {len(grads)} gradients for {len(ts)} inputs")
        return tuple(gx if need else None for gx, need in zip(grads, needs))
    return _op(np.asarray(value, dtype=np.float64), ts, fn)


def no_grad_value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# layers -----------------------------------------------------------------------
class DenseLayer:
    """Affine map followed by an activation; weights are (out, in)."""

    def __init__(self, weight, bias, activation: str = "identity", groups=None, scales=None):
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight)
        self.bias = bias if isinstance(bias, Tensor) else Tensor(bias)
        w, b = self.weight.data, self.bias.data
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise DimensionError(f"weight {w.shape} and bias {b.shape} are inconsistent")
        self.activation = activation
        self.groups = None
        self.scales = None
        if activation == "grouped_softmax":
            if groups is None:
                raise ConfigurationError("grouped_softmax layer needs groups")
            self.groups = _check_groups(groups, w.shape[0])
            self.scales = np.ones(len(self.groups)) if scales is None else np.asarray(scales, dtype=float)

    @classmethod
    def init(cls, n_in: int, n_out: int, activation: str, rng: np.random.Generator, **kw) -> "DenseLayer":
        # Glorot-uniform weights, zero bias
        lim = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-lim, lim, size=(n_out, n_in))
        return cls(w, np.zeros(n_out), activation, **kw)

    @property
    def n_in(self) -> int:
        return self.weight.data.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.data.shape[0]

    def __call__(self, x) -> Tensor:
        if self.activation == "grouped_softmax":
            return grouped_softmax(dense(x, self.weight, self.bias), self.groups, self.scales)
        return dense(x, self.weight, self.bias, self.activation)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Network:
    """Feed-forward stack of :class:`DenseLayer`."""

    def __init__(self, layers: Sequence[DenseLayer]):
        self.layers = list(layers)
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.n_out != b.n_in:
                raise DimensionError(f"layer {i} outputs {a.n_out} but layer {i + 1} expects {b.n_in}")

    @classmethod
    def mlp(cls, widths: Sequence[int], rng: np.random.Generator,
            hidden_activation: str = "relu", output_activation: str = "identity") -> "Network":
        """Build a network from layer widths ``[n_in, h1, ..., n_out]``."""
        layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            act = output_activation if i == len(widths) - 2 else hidden_activation
            layers.append(DenseLayer.init(a, b, act, rng))
        return cls(layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def widths(self) -> list[int]:
        return [self.n_in] + [layer.n_out for layer in self.layers]

    def __call__(self, x) -> Tensor:
        x = _as_tensor(x)
        if x.data.ndim == 1:
            return self(reshape(x, (1, -1)))[0]
        for i, layer in enumerate(self.layers):
            if x.data.shape[1] != layer.n_in:
                raise DimensionError(f"layer {i} expects input width {layer.n_in}, got {x.data.shape[1]}")
            x = layer(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    @property
    def size(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def get_vector(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise DimensionError(f"parameter vector has length {vec.size}, network needs {self.size}")
        pos = 0
        for p in self.parameters():
            n = p.data.size
            p.data = vec[pos:pos + n].reshape(p.data.shape).copy()
            pos += n

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def forward(graph: Graph, network: Network, *inputs) -> Tensor:
    """Run ``network`` on ``inputs`` while recording onto ``graph``."""
    with graph:
        return network(*inputs)


# binary snapshots -------------------------------------------------------------
MAGIC = b"MMCC"
SNAPSHOT_VERSION = 1
_TAGS = {name: i for i, name in enumerate(ACTIVATIONS)}


def dump_snapshot(network: Network | Iterable[DenseLayer]) -> bytes:
    """Serialize layer parameters.

    Layout (little-endian): ``b"MMCC"``, version u32, then per layer rows u32,
    cols u32, rows*cols f64 weights (row-major), rows f64 biases, activation
    tag u8 (0 identity, 1 relu, 2 sigmoid, 3 grouped_softmax).
    """
    layers = network.layers if isinstance(network, Network) else list(network)
    parts = [MAGIC, struct.pack("<I", SNAPSHOT_VERSION)]
    for layer in layers:
        rows, cols = layer.weight.data.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(layer.weight.data, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias.data, dtype="<f8").tobytes())
        parts.append(struct.pack("<B", _TAGS[layer.activation]))
    return b"".join(parts)


def load_snapshot(blob: bytes, groups=None) -> Network:
    """Inverse of :func:`dump_snapshot`.  ``groups`` is required for grouped-softmax layers."""
    if blob[:4] != MAGIC:
        raise UsageError("not an MMCC parameter snapshot")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != SNAPSHOT_VERSION:
        raise UsageError(f"unsupported snapshot version {version}")
    pos = 8
    layers = []
    while pos < len(blob):
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        w = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64)
        pos += 8 * rows * cols
        b = np.frombuffer(blob, dtype="<f8", count=rows, offset=pos).astype(np.float64)
        pos += 8 * rows
        (tag,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        act = ACTIVATIONS[tag]
        layers.append(DenseLayer(w, b, act, groups=groups if act == "grouped_softmax" else None))
    return Network(layers)
