"""A small reverse-mode autodiff engine over numpy arrays.

Every differentiable operation creates its output :class:`Tensor` together
with a :class:`Node` holding the saved activations and a closure mapping the
output gradient to input gradients. :func:`backward` collects the nodes
reachable from a scalar loss into a :class:`Tape`, ordered by creation
counter (a valid topological order), and visits each node exactly once.

Storage defaults to float32; reductions inside the fused kernels accumulate
in float64. ``default_dtype(np.float64)`` switches newly created tensors to
double precision, which is what the finite-difference checks use.
"""

import contextlib
import itertools

import numpy as np

from . import kernels
from .errors import AutodiffError, MaskError, NumericsError, ShapeError, VocabError

_counter = itertools.count()
_grad_enabled = True
_default_dtype = np.dtype(np.float32)
_detect_anomaly = False


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype):
    global _default_dtype
    prev, _default_dtype = _default_dtype, np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def detect_anomaly():
    """Raise :class:`NumericsError` as soon as any op produces NaN or Inf."""
    global _detect_anomaly
    prev, _detect_anomaly = _detect_anomaly, True
    try:
        yield
    finally:
        _detect_anomaly = prev


def get_default_dtype():
    return _default_dtype


def is_grad_enabled():
    return _grad_enabled


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "uid", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.uid = next(_counter)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def make_op(op, data, inputs, backward_fn):
    """Wrap ``data`` as the output of ``op``.

    ``backward_fn(grad)`` must return one gradient (or None) per input, in
    order. The node is only recorded when grad mode is on and some input
    requires a gradient.
    """
    out = Tensor(data, dtype=data.dtype)
    if _detect_anomaly and not np.all(np.isfinite(out.data)):
        raise NumericsError(f"non-finite values produced by {op}")
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


class Tape:
    """Records reachable from one output, in forward (topological) order."""

    def __init__(self, records):
        self.records = records

    @classmethod
    def from_output(cls, out):
        seen = {out.uid: out}
        stack = [out]
        while stack:
            t = stack.pop()
            if t.node is None:
                continue
            for inp in t.node.inputs:
                if inp.requires_grad and inp.uid not in seen:
                    seen[inp.uid] = inp
                    stack.append(inp)
        ordered = sorted(seen.values(), key=lambda t: t.uid)
        return cls(ordered)

    def __len__(self):
        return len(self.records)


def backward(loss):
    """Populate ``.grad`` on every leaf tensor reachable from scalar ``loss``.

    Leaf gradients must be cleared between calls; accumulating into an
    existing gradient raises :class:`AutodiffError`.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("loss is not connected to any tensor requiring grad")
    tape = Tape.from_output(loss)
    for t in tape.records:
        if t.node is None and t.grad is not None:
            raise AutodiffError(
                f"gradient of {t.name or 'leaf'} already populated; reset grads before backward"
            )
        if t.node is not None and t.node.consumed:
            raise AutodiffError("graph already consumed by a previous backward call")
    grads = {loss.uid: np.ones_like(loss.data)}
    for t in reversed(tape.records):
        g = grads.pop(t.uid, None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.astype(t.data.dtype, copy=False)
            continue
        node = t.node
        in_grads = node.backward_fn(g)
        node.consumed = True
        node.backward_fn = None
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise ShapeError(f"{node.op}: gradient shape {ig.shape} != input shape {inp.shape}")
            if inp.uid in grads:
                grads[inp.uid] = grads[inp.uid] + ig
            else:
                grads[inp.uid] = ig


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_op("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_op("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_op("mul", ad * bd, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_op("div", out, (a, b), bw)


def scale(x, c):
    c = float(c)
    return make_op("scale", x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def relu(x):
    pos = x.data > 0
    return make_op("relu", x.data * pos, (x,), lambda g: (g * pos,))


def absolute(x):
    sign = np.sign(x.data)
    return make_op("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {shape}") from None
    return make_op("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_op("concat", out, tuple(tensors), bw)


def getitem(x, key):
    if isinstance(key, Tensor):
        key = key.data
    src_shape, dtype = x.shape, x.dtype

    basic = _is_basic_index(key)

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return make_op("getitem", x.data[key], (x,), bw)


def _is_basic_index(key):
    items = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice)) for k in items)


def take_along_last(x, idx):
    """``out[..., i] = x[..., idx[..., i]]``; ``idx`` is a constant integer array."""
    idx = np.asarray(idx)
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        width = src_shape[-1]
        rows = np.repeat(np.arange(g.size // idx.shape[-1]), idx.shape[-1])
        flat_idx = rows * width + idx.reshape(-1)
        out = kernels.scatter_add_rows(int(np.prod(src_shape)), flat_idx, g.reshape(-1, 1), dtype)
        return (out.reshape(src_shape),)

    return make_op("take_along_last", np.take_along_axis(x.data, idx, axis=-1), (x,), bw)


# --------------------------------------------------------------------------
# reductions


def tsum(x, axis=None, keepdims=False):
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return make_op("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / n)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # fold leading axes so BLAS sees one 2-D product
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
    else:
        out = np.matmul(ad, bd)

    def bw(g):
        if bd.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_op("matmul", out, (a, b), bw)


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --------------------------------------------------------------------------
# fused neural-net primitives


def masked_softmax(scores, mask):
    """Softmax over the last axis, with ``mask == False`` entries forced to exactly 0."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, scores.shape)
    except ValueError:
        raise ShapeError(f"mask {mask.shape} does not broadcast to scores {scores.shape}") from None
    if not mask.any(axis=-1).all():
        raise MaskError("masked_softmax: a row has no unmasked entry")
    shape = scores.shape
    n = shape[-1]
    p = kernels.masked_softmax_fwd(scores.data.reshape(-1, n), mask.reshape(-1, n)).reshape(shape)

    def bw(g):
        return (kernels.softmax_bwd(g.reshape(-1, n), p.reshape(-1, n)).reshape(shape),)

    return make_op("masked_softmax", p, (scores,), bw)


def softmax(scores):
    return masked_softmax(scores, np.ones(scores.shape, dtype=bool))


def layer_norm(x, gamma, beta, eps=1e-5):
    shape = x.shape
    d = shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params must have shape ({d},)")
    y, xhat, rstd = kernels.layer_norm_fwd(x.data.reshape(-1, d), gamma.data, beta.data, eps)

    def bw(g):
        dx, dgamma, dbeta = kernels.layer_norm_bwd(g.reshape(-1, d), xhat, rstd, gamma.data)
        return dx.reshape(shape), dgamma.astype(gamma.dtype), dbeta.astype(beta.dtype)

    return make_op("layer_norm", y.reshape(shape), (x, gamma, beta), bw)


def dropout(x, p, rng, train):
    """Inverted dropout. Identity (the same tensor) when not training or ``p == 0``."""
    if not train or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = rng.random(x.shape, dtype=np.float32) >= p
    factor = (keep / (1.0 - p)).astype(x.dtype)
    return make_op("dropout", x.data * factor, (x,), lambda g: (g * factor,))


def embedding_lookup(weight, ids):
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabError(f"token id out of range [0, {vocab})")
    wshape, dtype = weight.shape, weight.dtype

    def bw(g):
        return (kernels.scatter_add_rows(wshape[0], ids.reshape(-1), g.reshape(-1, wshape[1]), dtype),)

    return make_op("embedding", weight.data[ids], (weight,), bw)


def log_softmax_array(logits):
    """float64 log-softmax of a plain array over the last axis."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_label_smoothed(logits, targets, pad_id, eps=0.1):
    """Label-smoothed token cross-entropy, averaged over non-pad targets.

    The smoothed target puts ``1 - eps`` on the gold token plus ``eps``
    spread uniformly over every non-pad vocabulary entry (gold included).
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [T, V], got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    t, v = logits.shape
    if targets.shape[0] != t:
        raise ShapeError(f"{t} logit rows but {targets.shape[0]} targets")
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {eps}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise VocabError(f"target id out of range [0, {v})")
    keep = targets != pad_id
    count = int(keep.sum())
    lp = log_softmax_array(logits.data)
    q = np.zeros((t, v), dtype=np.float64)
    if v > 1 and eps > 0:
        q[:] = eps / (v - 1)
        q[:, pad_id] = 0.0
    q[np.arange(t), targets] += 1.0 - eps
    q[~keep] = 0.0
    total = -(q * lp).sum()
    loss = total / max(count, 1)
    dtype = logits.dtype

    def bw(g):
        p = np.exp(lp)
        grad = (p * keep[:, None] - q) * (float(g) / max(count, 1))
        return (grad.astype(dtype),)

    return make_op("cross_entropy", np.asarray(loss, dtype=dtype), (logits,), bw)


def is_finite(t):
    return bool(np.all(np.isfinite(t.data)))
