"""Reverse-mode autodiff on dense arrays, sigmoid MLPs and Adam.

Every tensor carries leading "stack" axes so that the per-time-step networks
of a rollout are evaluated together with one batched matmul.
"""

from __future__ import annotations

import struct
import weakref
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "MlpArchitecture",
    "MlpParams",
    "init_params",
    "mlp_forward",
    "mlp_input_gradient",
    "mlp_value_and_input_gradient",
    "sigmoid",
    "AdamState",
    "Adam",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


def sigmoid(x):
    # tanh form cannot overflow
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap(a):
    return np.swapaxes(a, -1, -2)


class Node:
    __slots__ = ("_graph", "id", "op", "inputs", "value", "meta", "grad", "needs_grad")
    __array_priority__ = 1000.0
    __array_ufunc__ = None

    def __init__(self, graph, nid, op, inputs, value, meta=None):
        # weak back-reference: no node/graph cycle, so tapes are freed by refcount
        self._graph = weakref.ref(graph)
        self.id = nid
        self.op = op
        self.inputs = inputs
        self.value = value
        self.meta = meta
        self.grad = None
        self.needs_grad = op == "parameter" or any(i.needs_grad for i in inputs)

    @property
    def graph(self):
        g = self._graph()
        if g is None:
            raise ValueError("the graph of this node no longer exists")
        return g

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.graph.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.graph.scale(self, other)
        return self.graph.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __rmatmul__(self, other):
        return self.graph.matmul(other, self)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.value.shape})"


class Graph:
    """Append-only computation tape.

    Parameters are registered by array identity, so calling :meth:`parameter`
    twice with the same array returns the same node and gradients accumulate.
    """

    def __init__(self):
        self.nodes = []
        self._params = {}

    def _push(self, op, inputs, value, meta=None):
        node = Node(self, len(self.nodes), op, tuple(inputs), value, meta)
        self.nodes.append(node)
        return node

    def _as_node(self, x):
        if isinstance(x, Node):
            if x._graph() is not self:
                raise ValueError("node belongs to another graph")
            return x
        return self.constant(x)

    def constant(self, value):
        return self._push("constant", (), np.asarray(value, dtype=float))

    def parameter(self, array):
        if not isinstance(array, np.ndarray) or array.dtype != np.float64:
            raise TypeError("parameters must be float64 numpy arrays")
        key = id(array)
        if key in self._params:
            return self._params[key]
        node = self._push("parameter", (), array, meta=array)
        self._params[key] = node
        return node

    def add(self, a, b):
        a, b = self._as_node(a), self._as_node(b)
        return self._push("add_broadcast", (a, b), a.value + b.value)

    def sub(self, a, b):
        a, b = self._as_node(a), self._as_node(b)
        return self._push("sub", (a, b), a.value - b.value)

    def mul(self, a, b):
        a, b = self._as_node(a), self._as_node(b)
        return self._push("elementwise_mul", (a, b), a.value * b.value)

    def scale(self, a, c):
        a = self._as_node(a)
        return self._push("scale", (a,), float(c) * a.value, meta=float(c))

    def matmul(self, a, b):
        a, b = self._as_node(a), self._as_node(b)
        if a.value.ndim < 2 or b.value.ndim < 2:
            raise ValueError("matmul needs operands with at least 2 axes")
        if a.value.shape[-1] != b.value.shape[-2]:
            raise ValueError(f"matmul shape mismatch {a.value.shape} @ {b.value.shape}")
        return self._push("matmul", (a, b), np.matmul(a.value, b.value))

    def transpose(self, a):
        a = self._as_node(a)
        return self._push("transpose", (a,), _swap(a.value))

    def sigmoid(self, a):
        a = self._as_node(a)
        return self._push("sigmoid", (a,), sigmoid(a.value))

    def square(self, a):
        a = self._as_node(a)
        return self._push("square", (a,), a.value * a.value)

    def sum(self, a, axis=None, keepdims=False):
        a = self._as_node(a)
        return self._push("sum", (a,), np.sum(a.value, axis=axis, keepdims=keepdims), meta=(axis, keepdims))

    def mean(self, a, axis=None, keepdims=False):
        a = self._as_node(a)
        n = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
        return self.scale(self.sum(a, axis, keepdims), 1.0 / n)

    def take(self, a, index, axis=0):
        """Select one slice along ``axis`` (axis removed)."""
        a = self._as_node(a)
        return self._push("take", (a,), np.take(a.value, index, axis=axis), meta=(int(index), axis))

    def gather_rows(self, a, rows):
        rows = np.asarray(rows, dtype=np.intp)
        a = self._as_node(a)
        return self._push("gather_rows", (a,), a.value[rows], meta=rows)

    def segment_sum(self, a, segments, out_shape):
        """Sum rows of ``a`` (leading axes flattened) into ``out_shape`` cells.

        ``segments`` holds one flat cell index per row; negative entries are dropped.
        """
        a = self._as_node(a)
        feat = a.value.shape[-1]
        seg = np.asarray(segments, dtype=np.intp).reshape(-1)
        rows = a.value.reshape(-1, feat)
        if seg.size != rows.shape[0]:
            raise ValueError("segments must have one entry per row")
        n = int(np.prod(out_shape))
        keep = seg >= 0
        out = np.stack([np.bincount(seg[keep], rows[keep, f], minlength=n) for f in range(feat)], axis=-1)
        return self._push("segment_sum", (a,), out.reshape(tuple(out_shape) + (feat,)), meta=seg)

    def concat_rows(self, items, axis=0):
        items = [self._as_node(x) for x in items]
        value = np.concatenate([x.value for x in items], axis=axis)
        sizes = [x.value.shape[axis] for x in items]
        return self._push("concat_rows", items, value, meta=(axis, np.cumsum(sizes)[:-1]))

    def backward(self, loss):
        """Populate ``.grad`` on every node the loss depends on; return {parameter node: grad}."""
        loss = self._as_node(loss)
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            g = node.grad
            if g is None or not node.inputs or not node.needs_grad:
                continue
            need = tuple(i.needs_grad for i in node.inputs)
            for inp, gi in zip(node.inputs, _vjp(node, g, need)):
                if gi is None:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi
        return {n: n.grad for n in self._params.values() if n.grad is not None}

    def gradients(self, loss, arrays):
        """Gradients aligned with ``arrays``; zeros for parameters the loss does not reach."""
        self.backward(loss)
        out = []
        for arr in arrays:
            node = self._params.get(id(arr))
            out.append(np.zeros_like(arr) if node is None or node.grad is None else node.grad)
        return out


def _vjp(node, g, need):
    # need[i] is False for inputs that cannot reach a parameter; their slot is None
    op = node.op
    ins = node.inputs
    if op == "add_broadcast":
        return (_unbroadcast(g, ins[0].value.shape) if need[0] else None,
                _unbroadcast(g, ins[1].value.shape) if need[1] else None)
    if op == "sub":
        return (_unbroadcast(g, ins[0].value.shape) if need[0] else None,
                _unbroadcast(-g, ins[1].value.shape) if need[1] else None)
    if op == "elementwise_mul":
        a, b = ins[0].value, ins[1].value
        return (_unbroadcast(g * b, a.shape) if need[0] else None,
                _unbroadcast(g * a, b.shape) if need[1] else None)
    if op == "scale":
        return (node.meta * g,)
    if op == "matmul":
        a, b = ins[0].value, ins[1].value
        return (_unbroadcast(np.matmul(g, _swap(b)), a.shape) if need[0] else None,
                _unbroadcast(np.matmul(_swap(a), g), b.shape) if need[1] else None)
    if op == "transpose":
        return (_swap(g),)
    if op == "sigmoid":
        s = node.value
        return (g * s * (1.0 - s),)
    if op == "square":
        return (2.0 * ins[0].value * g,)
    if op == "sum":
        axis, keepdims = node.meta
        shape = ins[0].value.shape
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    if op == "take":
        index, axis = node.meta
        out = np.zeros_like(ins[0].value)
        sl = [slice(None)] * out.ndim
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)
    if op == "gather_rows":
        out = np.zeros_like(ins[0].value)
        np.add.at(out, node.meta, g)
        return (out,)
    if op == "segment_sum":
        seg = node.meta
        flat = g.reshape(-1, g.shape[-1])
        out = np.where((seg >= 0)[:, None], flat[np.maximum(seg, 0)], 0.0)
        return (out.reshape(ins[0].value.shape),)
    if op == "concat_rows":
        axis, cuts = node.meta
        return tuple(p if n else None for p, n in zip(np.split(g, cuts, axis=axis), need))
    raise NotImplementedError(op)


@dataclass(frozen=True)
class MlpArchitecture:
    in_dim: int
    width: int
    n_hidden: int = 2
    out_dim: int = 1

    @property
    def sizes(self):
        return [self.in_dim] + [self.width] * self.n_hidden + [self.out_dim]

    def n_params(self):
        s = self.sizes
        return sum(s[i + 1] * (1 + s[i]) for i in range(len(s) - 1))


@dataclass
class MlpParams:
    """Weights ``[..., fan_in, fan_out]`` and biases ``[..., 1, fan_out]`` per layer.

    Leading axes (if any) index independent networks sharing one architecture.
    """

    weights: list
    biases: list
    architecture: MlpArchitecture = None

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def step(self, n):
        """View of the ``n``-th network in a stack."""
        return MlpParams([w[n] for w in self.weights], [b[n] for b in self.biases], self.architecture)


def init_params(rng, architecture: MlpArchitecture, stack=()):
    """Weights ~ N(0, 1/fan_in), biases 0."""
    stack = tuple(np.atleast_1d(stack)) if stack != () else ()
    gen = rng.generator if hasattr(rng, "generator") else rng
    sizes = architecture.sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(gen.standard_normal(stack + (fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(stack + (1, fan_out)))
    return MlpParams(weights, biases, architecture)


def _layers(graph, params):
    return [(graph.parameter(w), graph.parameter(b)) for w, b in zip(params.weights, params.biases)]


def mlp_forward(graph, params: MlpParams, x):
    h = graph._as_node(x)
    layers = _layers(graph, params)
    for w, b in layers[:-1]:
        h = graph.sigmoid(h @ w + b)
    w, b = layers[-1]
    return h @ w + b


def mlp_value_and_input_gradient(graph, params: MlpParams, x):
    """Network output and its input gradient, the latter written with first-order ops.

    With ``a_l = sigmoid(h_l)`` the gradient is the backward chain
    ``delta_L = W_L^T``, ``delta_l = (delta_{l+1} W_{l+1}^T) * a_l (1 - a_l)``,
    ``grad = delta_1 W_1^T``; its parameter derivatives then come from an
    ordinary backward pass.
    """
    h = graph._as_node(x)
    layers = _layers(graph, params)
    acts = []
    for w, b in layers[:-1]:
        h = graph.sigmoid(h @ w + b)
        acts.append(h)
    w_out, b_out = layers[-1]
    out = h @ w_out + b_out
    if params.architecture is not None and params.architecture.out_dim != 1:
        raise ValueError("input gradient needs a scalar output")
    delta = graph.transpose(w_out)  # [..., 1, width]
    for (w, _), a in zip(reversed(layers[:-1]), reversed(acts)):
        delta = (delta * (a - a * a)) @ graph.transpose(w)
    if not acts:
        delta = graph.scale(x, 0.0) + delta
    return out, delta


def mlp_input_gradient(graph, params: MlpParams, x):
    return mlp_value_and_input_gradient(graph, params, x)[1]


@dataclass
class AdamState:
    lr_schedule: list = field(default_factory=lambda: [(0, 1e-3)])
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None

    def lr(self, step=None):
        step = self.step if step is None else step
        rate = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if step >= start:
                rate = value
        return rate


def adam_step(state: AdamState, params, grads):
    """In-place Adam update with bias correction."""
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and moments must align")
    lr = state.lr()
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    def __init__(self, lr_schedule=((0, 1e-3),), beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = AdamState(list(lr_schedule), beta1, beta2, eps)

    def step(self, params, grads):
        return adam_step(self.state, params, grads)


_MAGIC = b"JBSDCKPT"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict):
    """Write named float64 arrays: header, shapes, then little-endian doubles."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    header = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        header.append((name, shape))
    out = {}
    for name, shape in header:
        size = int(np.prod(shape))
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(float).reshape(shape)
        pos += 8 * size
    if pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return out
