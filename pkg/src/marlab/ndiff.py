"""Reverse-mode automatic differentiation on float64 numpy buffers.

A Graph records ops as they execute (define-by-run); backward replays the
tape in reverse from a scalar root.  Graphs are meant to be rebuilt every
training step and are single-threaded.
"""

import json

import numpy as np


class NdiffError(Exception):
    pass


class ShapeMismatch(NdiffError):
    pass


class UnknownOp(NdiffError):
    pass


class NonScalarRoot(NdiffError):
    pass


class StaleState(NdiffError):
    pass


class Tensor:
    """A float64 array with a gradient buffer of the same shape."""

    __slots__ = ("value", "grad", "requires_grad", "node_id", "name", "graph")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.array(value, dtype=np.float64, order="C")
        self.grad = np.zeros_like(self.value)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = None   # assigned when the tensor joins a Graph
        self.graph = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def item(self):
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"


def param(value, name=None):
    return Tensor(value, requires_grad=True, name=name)


def _wrap(value, requires_grad):
    t = Tensor.__new__(Tensor)
    t.value = value
    t.grad = np.zeros_like(value)
    t.requires_grad = requires_grad
    t.name = None
    t.node_id = None
    t.graph = None
    return t


class _Record:
    __slots__ = ("kind", "inputs", "output", "ctx")

    def __init__(self, kind, inputs, output, ctx):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


# ---------------------------------------------------------------------------
# op table: kind -> (forward, backward)
# forward(values, attrs) -> (out_value, ctx); backward(ctx, values, out_grad)
# -> per-input gradient arrays (None for inputs that need no gradient)
# ---------------------------------------------------------------------------

def _binary_shapes(a, b, kind):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeMismatch(f"{kind}: {a.shape} vs {b.shape} (exact match or scalar broadcast only)")


def _reduce_to(g, shape):
    # collapse a broadcast gradient back onto a size-1 operand
    if g.shape == shape:
        return g
    return np.full(shape, g.sum(), dtype=np.float64)


def _fw_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return a @ b, None


def _bw_matmul(ctx, vals, g):
    a, b = vals
    return g @ b.T, a.T @ g


def _fw_add(vals, attrs):
    a, b = vals
    _binary_shapes(a, b, "add")
    return a + b, None


def _bw_add(ctx, vals, g):
    a, b = vals
    return _reduce_to(g, a.shape), _reduce_to(g, b.shape)


def _fw_mul(vals, attrs):
    a, b = vals
    _binary_shapes(a, b, "mul")
    return a * b, None


def _bw_mul(ctx, vals, g):
    a, b = vals
    return _reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape)


def _fw_concat(vals, attrs):
    if not vals:
        raise ShapeMismatch("concat: no inputs")
    nd = vals[0].ndim
    if nd == 0:
        raise ShapeMismatch("concat: inputs must have rank >= 1")
    for v in vals:
        if v.ndim != nd or v.shape[:-1] != vals[0].shape[:-1]:
            raise ShapeMismatch(f"concat: {[x.shape for x in vals]}")
    widths = [v.shape[-1] for v in vals]
    return np.concatenate(vals, axis=-1), widths


def _bw_concat(ctx, vals, g):
    out, offset = [], 0
    for w in ctx:
        out.append(np.ascontiguousarray(g[..., offset:offset + w]))
        offset += w
    return out


def _fw_relu(vals, attrs):
    (x,) = vals
    return np.maximum(x, 0.0), None


def _bw_relu(ctx, vals, g):
    (x,) = vals
    return (g * (x > 0.0),)


def _fw_elu(vals, attrs):
    (x,) = vals
    return np.where(x >= 0.0, x, np.expm1(x)), None


def _bw_elu(ctx, vals, g):
    (x,) = vals
    return (g * np.where(x >= 0.0, 1.0, np.exp(x)),)


def _fw_tanh(vals, attrs):
    (x,) = vals
    return np.tanh(x), None


def _bw_tanh(ctx, vals, g):
    y = ctx
    return (g * (1.0 - y * y),)


def _fw_sigmoid(vals, attrs):
    (x,) = vals
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, None


def _bw_sigmoid(ctx, vals, g):
    y = ctx
    return (g * y * (1.0 - y),)


def _fw_softmax(vals, attrs):
    (x,) = vals
    if x.ndim == 0:
        raise ShapeMismatch("softmax: rank >= 1 required")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), None


def _bw_softmax(ctx, vals, g):
    y = ctx
    dot = (g * y).sum(axis=-1, keepdims=True)
    return (y * (g - dot),)


def _fw_log(vals, attrs):
    (x,) = vals
    return np.log(x), None


def _bw_log(ctx, vals, g):
    (x,) = vals
    return (g / x,)


def _fw_sum(vals, attrs):
    (x,) = vals
    return np.asarray(x.sum()), None


def _bw_sum(ctx, vals, g):
    (x,) = vals
    return (np.full_like(x, float(g)),)


def _fw_mean(vals, attrs):
    (x,) = vals
    return np.asarray(x.mean()), None


def _bw_mean(ctx, vals, g):
    (x,) = vals
    return (np.full_like(x, float(g) / x.size),)


def _fw_square(vals, attrs):
    (x,) = vals
    return x * x, None


def _bw_square(ctx, vals, g):
    (x,) = vals
    return (2.0 * x * g,)


def _fw_abs(vals, attrs):
    (x,) = vals
    return np.abs(x), None


def _bw_abs(ctx, vals, g):
    (x,) = vals
    return (g * np.sign(x),)


def _fw_neg(vals, attrs):
    (x,) = vals
    return -x, None


def _bw_neg(ctx, vals, g):
    return (-g,)


def _fw_slice(vals, attrs):
    (x,) = vals
    start, stop = attrs["start"], attrs["stop"]
    if x.ndim == 0:
        raise ShapeMismatch("slice: rank >= 1 required")
    width = x.shape[-1]
    if not (0 <= start < stop <= width):
        raise ShapeMismatch(f"slice: [{start}:{stop}] on width {width}")
    return np.ascontiguousarray(x[..., start:stop]), (start, stop)


def _bw_slice(ctx, vals, g):
    (x,) = vals
    start, stop = ctx
    out = np.zeros_like(x)
    out[..., start:stop] = g
    return (out,)


OPS = {
    "matmul": (_fw_matmul, _bw_matmul),
    "add": (_fw_add, _bw_add),
    "mul": (_fw_mul, _bw_mul),
    "concat": (_fw_concat, _bw_concat),
    "relu": (_fw_relu, _bw_relu),
    "elu": (_fw_elu, _bw_elu),
    "tanh": (_fw_tanh, _bw_tanh),
    "sigmoid": (_fw_sigmoid, _bw_sigmoid),
    "softmax": (_fw_softmax, _bw_softmax),
    "log": (_fw_log, _bw_log),
    "sum": (_fw_sum, _bw_sum),
    "mean": (_fw_mean, _bw_mean),
    "square": (_fw_square, _bw_square),
    "abs": (_fw_abs, _bw_abs),
    "neg": (_fw_neg, _bw_neg),
    "slice": (_fw_slice, _bw_slice),
}

# ops whose backward reads the output value rather than the inputs
_CTX_IS_OUTPUT = {"tanh", "sigmoid", "softmax"}


class Graph:
    """Append-only tape of op records; node ids are unique within a graph."""

    def __init__(self):
        self.records = []
        self.tensors = []

    def _register(self, t):
        if t.graph is not self:
            t.graph = self
            t.node_id = len(self.tensors)
            self.tensors.append(t)
        return t

    def constant(self, value):
        return self._register(Tensor(value, requires_grad=False))

    def leaf_params(self):
        outs = {rec.output.node_id for rec in self.records}
        seen, found = set(), []
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and t.node_id not in outs and t.node_id not in seen:
                    seen.add(t.node_id)
                    found.append(t)
        return found

    # convenience wrappers around forward_op -------------------------------
    def matmul(self, a, b):
        return forward_op(self, "matmul", (a, b))

    def add(self, a, b):
        return forward_op(self, "add", (a, b))

    def sub(self, a, b):
        return forward_op(self, "add", (a, forward_op(self, "neg", (b,))))

    def mul(self, a, b):
        return forward_op(self, "mul", (a, b))

    def concat(self, *xs):
        return forward_op(self, "concat", xs)

    def relu(self, x):
        return forward_op(self, "relu", (x,))

    def elu(self, x):
        return forward_op(self, "elu", (x,))

    def tanh(self, x):
        return forward_op(self, "tanh", (x,))

    def sigmoid(self, x):
        return forward_op(self, "sigmoid", (x,))

    def softmax(self, x):
        return forward_op(self, "softmax", (x,))

    def log(self, x):
        return forward_op(self, "log", (x,))

    def sum(self, x):
        return forward_op(self, "sum", (x,))

    def mean(self, x):
        return forward_op(self, "mean", (x,))

    def square(self, x):
        return forward_op(self, "square", (x,))

    def abs(self, x):
        return forward_op(self, "abs", (x,))

    def neg(self, x):
        return forward_op(self, "neg", (x,))

    def slice(self, x, start, stop):
        return forward_op(self, "slice", (x,), start=start, stop=stop)


def forward_op(graph, kind, inputs, **attrs):
    """Execute one op eagerly, appending its record to the graph."""
    pair = OPS.get(kind)
    if pair is None:
        raise UnknownOp(kind)
    fw, _ = pair
    inputs = tuple(inputs)
    vals = tuple(t.value for t in inputs)
    out_value, ctx = fw(vals, attrs)
    out = _wrap(out_value, any(t.requires_grad for t in inputs))
    for t in inputs:
        graph._register(t)
    graph._register(out)
    if kind in _CTX_IS_OUTPUT:
        ctx = out_value
    graph.records.append(_Record(kind, inputs, out, ctx))
    return out


def backward(graph, root):
    """Accumulate d(root)/d(ancestor) into .grad of every requires_grad ancestor.

    The root must be scalar-sized; the tape is swept once in reverse, so each
    node is visited exactly once and fan-out contributions sum.
    """
    if root.graph is not graph or root.node_id is None:
        raise NdiffError("root does not belong to this graph")
    if root.value.size != 1:
        raise NonScalarRoot(f"root has shape {root.shape}")
    acc = [None] * len(graph.tensors)
    acc[root.node_id] = np.ones_like(root.value)
    for rec in reversed(graph.records):
        g = acc[rec.output.node_id]
        if g is None or not rec.output.requires_grad:
            continue
        _, bw = OPS[rec.kind]
        vals = tuple(t.value for t in rec.inputs)
        grads = bw(rec.ctx, vals, g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if acc[t.node_id] is None:
                acc[t.node_id] = gi
            else:
                acc[t.node_id] = acc[t.node_id] + gi
    for t, g in zip(graph.tensors, acc):
        if g is not None and t.requires_grad:
            t.grad = t.grad + g


# ---------------------------------------------------------------------------
# dense networks
# ---------------------------------------------------------------------------

_ACT_NP = {
    "relu": lambda x: np.maximum(x, 0.0),
    "elu": lambda x: np.where(x >= 0.0, x, np.expm1(x)),
    "tanh": np.tanh,
    "sigmoid": lambda x: np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                                  np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))),
    "identity": lambda x: x,
}


def glorot_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class DenseNet:
    """Fully connected net; weights Glorot-uniform, biases zero."""

    def __init__(self, layer_sizes, activations, rng, name="net"):
        if len(layer_sizes) < 2:
            raise ShapeMismatch("DenseNet needs at least input and output sizes")
        if len(activations) != len(layer_sizes) - 1:
            raise ShapeMismatch("one activation per layer required")
        for a in activations:
            if a not in _ACT_NP:
                raise UnknownOp(f"activation {a!r}")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.activations = tuple(activations)
        self.name = name
        self.weights = []
        self.biases = []
        for l, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            self.weights.append(param(glorot_uniform(rng, n_in, n_out), name=f"{name}/W{l}"))
            self.biases.append(param(np.zeros((1, n_out)), name=f"{name}/b{l}"))

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def forward(self, g, x):
        if x.value.ndim != 2:
            raise ShapeMismatch(f"DenseNet input must be 2-D, got {x.shape}")
        ones = g.constant(np.ones((x.value.shape[0], 1)))
        h = x
        for act, w, b in zip(self.activations, self.weights, self.biases):
            h = g.add(g.matmul(h, w), g.matmul(ones, b))
            if act != "identity":
                h = forward_op(g, act, (h,))
        return h

    def forward_np(self, x):
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2:
            raise ShapeMismatch(f"DenseNet input must be 2-D, got {h.shape}")
        for act, w, b in zip(self.activations, self.weights, self.biases):
            h = _ACT_NP[act](h @ w.value + b.value)
        return h

    def clone(self, name=None):
        other = DenseNet.__new__(DenseNet)
        other.layer_sizes = self.layer_sizes
        other.activations = self.activations
        other.name = name or self.name
        other.weights = [param(w.value.copy(), name=w.name) for w in self.weights]
        other.biases = [param(b.value.copy(), name=b.name) for b in self.biases]
        return other


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]


def adam_step(params, state):
    """One Adam update; consumes and zeroes .grad, increments step_count."""
    params = list(params)
    if len(params) != len(state.params):
        raise StaleState("parameter list length changed")
    for p, q, m in zip(params, state.params, state.m):
        if p is not q or p.value.shape != m.shape:
            raise StaleState("parameters do not match optimizer state")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad[...] = 0.0


def sgd_step(params, lr):
    """Plain gradient step (ascent handled by the sign of the loss)."""
    for p in params:
        p.value -= lr * p.grad
        p.grad[...] = 0.0


def clip_grad_norm(params, max_norm=10.0):
    """Scale gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        total += float((p.grad * p.grad).sum())
    total = np.sqrt(total)
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return total


def zero_grads(params):
    for p in params:
        p.grad[...] = 0.0


def polyak_update(src, dst, tau):
    """dst <- (1 - tau) * dst + tau * src, elementwise over matched lists."""
    src, dst = list(src), list(dst)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if len(src) != len(dst):
        raise ShapeMismatch("polyak: list lengths differ")
    for s, d in zip(src, dst):
        if s.value.shape != d.value.shape:
            raise ShapeMismatch(f"polyak: {s.value.shape} vs {d.value.shape}")
    for s, d in zip(src, dst):
        d.value *= 1.0 - tau
        d.value += tau * s.value


def copy_params(src, dst):
    polyak_update(src, dst, 1.0)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, params, h=1e-5):
    """Compare tape gradients of the scalar f() against central differences.

    Returns the maximum relative error |analytic - numeric| /
    max(|analytic|, |numeric|, 1e-8) over all coordinates of params that
    require gradients.  f must be deterministic and rebuild its graph on
    every call.
    """
    params = [p for p in params if p.requires_grad]
    zero_grads(params)
    root = f()
    if root.value.size != 1:
        raise NonScalarRoot(f"grad_check root has shape {root.shape}")
    backward(root.graph, root)
    analytic = [p.grad.copy() for p in params]
    zero_grads(params)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().value.reshape(-1)[0])
            flat[i] = orig - h
            down = float(f().value.reshape(-1)[0])
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# parameter serialization: {name: [floats...]}
# ---------------------------------------------------------------------------

def params_to_json(named_params):
    out = {}
    for name, p in named_params:
        if name in out:
            raise NdiffError(f"duplicate parameter name {name!r}")
        out[name] = [float(x) for x in p.value.reshape(-1)]
    return out


def params_from_json(obj, named_params):
    for name, p in named_params:
        if name not in obj:
            raise NdiffError(f"missing parameter {name!r}")
        flat = np.asarray(obj[name], dtype=np.float64)
        if flat.size != p.value.size:
            raise ShapeMismatch(f"{name}: {flat.size} values for shape {p.value.shape}")
        p.value[...] = flat.reshape(p.value.shape)


def dumps_params(named_params):
    return json.dumps(params_to_json(named_params), sort_keys=True)
