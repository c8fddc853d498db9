"""Dense tensors with taped reverse-mode differentiation.

Values are numpy arrays. Parameters and checkpoints are float32; an op keeps
float64 when every input is float64, which the finite-difference gradient
checks rely on. Each op evaluates eagerly and, when any input requires a
gradient, records a backward rule on the output node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_LAYER_NORM = 1e-5
EPS_COSINE = 1e-8
_GELU_C = float(np.sqrt(2.0 / np.pi))


class ShapeError(ValueError):
    """Raised when the operands of an op do not conform."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


def as_array(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Node:
    """A value in the computation graph.

    Leaves created with ``requires_grad=True`` are trainable parameters.
    ``grad`` is materialized lazily; reading it before any gradient has
    flowed returns zeros of the value's shape.
    """

    __slots__ = ("value", "_grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.value = as_array(value)
        self._grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(lift(other), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents, backward_fn, op):
    """Wrap an op result, recording the tape only if a parent needs grads."""
    if any(p.requires_grad for p in parents):
        return Node(value, True, parents, backward_fn, op)
    return Node(value, op=op)


def _unbroadcast(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), backward, "add")


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), backward, "mul")


def scale(a, c: float) -> Node:
    a = lift(a)
    c_ = a.value.dtype.type(c)
    return _make(a.value * c_, (a,), lambda g: (g * c_,), "scale")


def gelu(a) -> Node:
    """GELU, tanh approximation."""
    a = lift(a)
    x = a.value
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


def log_sigmoid(a) -> Node:
    a = lift(a)
    x = a.value
    out = -np.logaddexp(0.0, -x)

    def backward(g):
        # d/dx log(sigmoid(x)) = sigmoid(-x)
        return (g * _sigmoid(-x),)

    return _make(out.astype(x.dtype, copy=False), (a,), backward, "log_sigmoid")


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Node:
    a, b = lift(a), lift(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def transpose(a) -> Node:
    """Swap the last two axes."""
    a = lift(a)
    if a.value.ndim < 2:
        raise ShapeError("transpose", a.shape)
    return _make(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a, shape) -> Node:
    a = lift(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def permute(a, axes) -> Node:
    a = lift(a)
    if sorted(axes) != list(range(a.value.ndim)):
        raise ShapeError("permute", a.shape, axes)
    inverse = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),), "permute")


def embedding(table, indices) -> Node:
    """Rows of ``table`` selected by integer ``indices``."""
    table = lift(table)
    idx = np.asarray(indices)
    if table.value.ndim != 2 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, idx.shape)

    def backward(g):
        grad = np.zeros_like(table.value)
        np.add.at(grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _make(table.value[idx], (table,), backward, "embedding")


def conv1d(x, weight, stride: int) -> Node:
    """Valid 1-d convolution over channels-last input.

    x: [..., length, in_channels]; weight: [out_channels, in_channels, kernel].
    Returns [..., frames, out_channels] with frames = (length - kernel) // stride + 1.
    """
    x, weight = lift(x), lift(weight)
    if weight.value.ndim != 3 or x.value.ndim < 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError("conv1d", x.shape, weight.shape)
    c_out, c_in, k = weight.shape
    length = x.shape[-2]
    if length < k:
        raise ShapeError("conv1d", x.shape, weight.shape)
    frames = (length - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.value, k, axis=-2)[..., ::stride, :, :]
    cols = windows.reshape(windows.shape[:-2] + (c_in * k,))
    wmat = weight.value.reshape(c_out, c_in * k)
    out = np.matmul(cols, wmat.T)

    def backward(g):
        gw = np.matmul(g.reshape(-1, c_out).T, cols.reshape(-1, c_in * k)).reshape(weight.shape)
        if not x.requires_grad:
            return None, gw
        gcols = np.matmul(g, wmat).reshape(g.shape[:-1] + (c_in, k))
        gx = np.zeros_like(x.value)
        span = stride * (frames - 1) + 1
        for j in range(k):
            gx[..., j : j + span : stride, :] += gcols[..., j]
        return gx, gw

    return _make(out, (x, weight), backward, "conv1d")


# ---------------------------------------------------------------- reductions


def total(a) -> Node:
    """Sum of every element, as a scalar."""
    a = lift(a)
    return _make(np.asarray(a.value.sum(), dtype=a.value.dtype), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a, axis=None) -> Node:
    a = lift(a)
    if axis is None:
        count = a.value.size
        out = np.asarray(a.value.mean(), dtype=a.value.dtype)

        def backward(g):
            return (np.full(a.shape, g / count, dtype=a.value.dtype),)
    else:
        if not -a.value.ndim <= axis < a.value.ndim:
            raise ShapeError("mean", a.shape, (axis,))
        count = a.shape[axis]
        out = a.value.mean(axis=axis)

        def backward(g):
            return (np.broadcast_to(np.expand_dims(g, axis) / a.value.dtype.type(count), a.shape).copy(),)

    return _make(out, (a,), backward, "mean")


def l1_mean(a, b) -> Node:
    """Mean absolute difference over all elements."""
    a, b = lift(a), lift(b)
    if a.shape != b.shape:
        raise ShapeError("l1_mean", a.shape, b.shape)
    diff = a.value - b.value
    count = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=diff.dtype)

    def backward(g):
        s = np.sign(diff) * (g / count)
        return s, -s

    return _make(out, (a, b), backward, "l1_mean")


def softmax(a) -> Node:
    a = lift(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a) -> Node:
    a = lift(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def cross_entropy(logits, labels) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    logits = lift(logits)
    labels = np.asarray(labels)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    shifted = logits.value - logits.value.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    n = labels.shape[0]
    out = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.value.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return _make(out, (logits,), backward, "cross_entropy")


def layer_norm(a, gain, bias, eps: float = EPS_LAYER_NORM) -> Node:
    a, gain, bias = lift(a), lift(gain), lift(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
    mu = a.value.mean(axis=-1, keepdims=True)
    xc = a.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.value.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def backward(g):
        gxhat = g * gain.value
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (a, gain, bias), backward, "layer_norm")


def cosine_similarity(a, b, eps: float = EPS_COSINE) -> Node:
    """Cosine similarity along the last axis: a.b / (|a||b| + eps)."""
    a, b = lift(a), lift(b)
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    dot = (a.value * b.value).sum(axis=-1)
    na = np.sqrt((a.value * a.value).sum(axis=-1))
    nb = np.sqrt((b.value * b.value).sum(axis=-1))
    denom = na * nb + a.value.dtype.type(eps)
    out = dot / denom

    def backward(g):
        g_ = (g / denom)[..., None]
        c = out[..., None]
        safe_na = np.where(na > 0, na, 1.0)[..., None]
        safe_nb = np.where(nb > 0, nb, 1.0)[..., None]
        # d(na*nb)/da = nb * a / na
        ga = g_ * (b.value - c * nb[..., None] * a.value / safe_na)
        gb = g_ * (a.value - c * na[..., None] * b.value / safe_nb)
        return ga, gb

    return _make(out, (a, b), backward, "cosine_similarity")


# every differentiable op above; the gradient-check suite covers each one
OPS = (
    "add", "mul", "scale", "gelu", "log_sigmoid", "matmul", "transpose", "reshape", "permute",
    "embedding", "conv1d", "total", "mean", "l1_mean", "softmax", "log_softmax", "cross_entropy",
    "layer_norm", "cosine_similarity",
)


# ---------------------------------------------------------------- backward


class NonScalarRootError(ValueError):
    pass


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node, params=None):
    """Populate ``.grad`` on every node reachable from the scalar ``root``.

    If ``params`` (a name -> Node mapping) is given, returns name -> gradient
    with zeros for parameters the root does not depend on.
    """
    if root.value.size != 1:
        raise NonScalarRootError(f"backward needs a scalar root, got shape {root.shape}")
    if params is not None:
        for p in params.values():
            p.zero_grad()
    order = _topological(root)
    for node in order:
        node._grad = None
    if order:
        root._grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is None or node._grad is None:
            continue
        grads = node.backward_fn(node._grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = g.astype(parent.value.dtype, copy=False)
            # never accumulate in place: backward rules may hand the same array to several parents
            parent._grad = g if parent._grad is None else parent._grad + g
    if params is None:
        return None
    return {name: p.grad for name, p in params.items()}


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` map names to arrays. Returns ``(new_params,
    new_state)``; the inputs are left untouched.
    """
    if set(params) != set(grads):
        raise KeyError(f"adam_step: params/grads keys differ: {sorted(set(params) ^ set(grads))}")
    if state.m and set(state.m) != set(params):
        raise KeyError(f"adam_step: state keys differ: {sorted(set(state.m) ^ set(params))}")
    t = state.step + 1
    f = np.float32
    b1, b2 = f(beta1), f(beta2)
    c1 = f(1.0 - beta1**t)
    c2 = f(1.0 - beta2**t)
    new_params, new_m, new_v = {}, {}, {}
    for name in params:
        p = np.asarray(params[name], dtype=np.float32)
        g = np.asarray(grads[name], dtype=np.float32)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (f(1) - b1) * g
        v = b2 * v + (f(1) - b2) * g * g
        new_m[name], new_v[name] = m, v
        new_params[name] = p - f(lr) * (m / c1) / (np.sqrt(v / c2) + f(eps))
    return new_params, AdamState(t, new_m, new_v)
