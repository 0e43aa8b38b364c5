"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a :class:`Node` holding its inputs and a
closure that maps the output gradient to input gradients. Nodes carry a global
sequence number, so sorting the nodes reachable from a loss by descending
sequence number is a valid reverse topological order.

Data is stored as numpy arrays in row-major order. Operations preserve the
dtype of their inputs, so float64 tensors stay float64 (used by the gradient
checks) and float32 tensors stay float32 (used for training).
"""

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import InvalidArgumentError, InvalidBatchError, ShapeError, StateError

_seq = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("inputs", "needs", "backward_fn", "seq", "op")

    def __init__(self, inputs, backward_fn, op):
        self.inputs = inputs
        # frozen at record time so later requires_grad flips don't leak gradients
        self.needs = tuple(t.requires_grad for t in inputs)
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.op = op


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self):
        backward(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, inputs, backward_fn, op):
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(inputs, backward_fn, op)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf requiring grad.

    The recorded graph is consumed: after the call, intermediate tensors no
    longer reference their nodes, and a second call on the same loss raises.
    """
    if not isinstance(loss, Tensor):
        raise InvalidArgumentError("backward expects a Tensor")
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            raise StateError("loss has no recorded graph (already consumed or leaf)")
        raise StateError("backward called without a recorded forward pass")

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        n = t.node
        if n is None or id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(n.inputs)

    grads = {id(loss): np.ones_like(loss.data)}
    order = sorted(nodes.values(), key=lambda t: t.node.seq, reverse=True)
    for t in order:
        g = grads.pop(id(t), None)
        node = t.node
        t.node = None
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, need, ig in zip(node.inputs, node.needs, in_grads):
            if ig is None or not need:
                continue
            if inp.node is not None:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
            else:
                ig = np.asarray(ig, dtype=inp.data.dtype)
                if inp.grad is None:
                    inp.grad = ig.copy()
                else:
                    inp.grad = inp.grad + ig


# ---------------------------------------------------------------- construction


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def zeros(shape, dtype=np.float64, requires_grad=False, name=None):
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype), requires_grad, name)


def constant(shape, value, dtype=np.float64, requires_grad=False, name=None):
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype), requires_grad, name)


def normal(shape, mean, std, rng, dtype=np.float64, requires_grad=False, name=None):
    """Normal draws filled in flat row-major index order from ``rng``."""
    shape = _check_shape(shape)
    if std < 0:
        raise InvalidArgumentError(f"std must be >= 0, got {std}")
    n = int(np.prod(shape))
    values = rng.normal(mean, std, size=n) if std > 0 else np.full(n, float(mean))
    return Tensor(values.reshape(shape).astype(dtype), requires_grad, name)


def construct(shape, init="zeros", *, value=0.0, mean=0.0, std=1.0, rng=None,
              dtype=np.float64, requires_grad=False, name=None):
    if init == "zeros":
        return zeros(shape, dtype, requires_grad, name)
    if init == "constant":
        return constant(shape, value, dtype, requires_grad, name)
    if init == "normal":
        if rng is None:
            raise InvalidArgumentError("normal init needs an rng")
        return normal(shape, mean, std, rng, dtype, requires_grad, name)
    raise InvalidArgumentError(f"unknown init kind {init!r}")


# ------------------------------------------------------------ elementwise ops


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def square(x):
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope=0.2):
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh(x):
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(x, floor=1e-12):
    """log(sigmoid(x)) computed stably, with the sigmoid clamped below at ``floor``.

    Clamped entries pass no gradient, matching ``log(max(sigmoid(x), floor))``.
    """
    v = x.data
    ls = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    lo = np.log(floor)
    clamped = ls < lo
    out = np.where(clamped, lo, ls).astype(v.dtype)
    slope = np.where(clamped, 0.0, 1.0 - _sigmoid(v)).astype(v.dtype)
    return _make(out, (x,), lambda g: (g * slope,), "log_sigmoid")


def activation(x, kind, slope=0.2):
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise InvalidArgumentError(f"unknown activation {kind!r}")


# ------------------------------------------------------------- reductions etc


def sum_(x, axis=None):
    shape = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x, axis=None):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis), 1.0 / float(n))


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x, idx):
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw, "getitem")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise ShapeError(f"cannot concat {t.shape} with {ref} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def concat_channels(a, b):
    """Stack ``a`` (channels [0, C1)) and ``b`` (channels [C1, C1+C2)) on axis 1."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"batch/spatial mismatch: {a.shape} vs {b.shape}")
    return concat([a, b], axis=1)


def replicate_spatial(v, height, width):
    """Tile a [N, C] tensor over space into [N, C, height, width]."""
    n, c = v.shape
    out = np.broadcast_to(v.data[:, :, None, None], (n, c, height, width)).copy()
    return _make(out, (v,), lambda g: (g.sum(axis=(2, 3)),), "replicate")


# ----------------------------------------------------------------- layers


def dense(x, weight, bias):
    """Affine map ``x @ weight.T + bias`` for x [N, F_in], weight [F_out, F_in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gb = g.sum(axis=0) if bias is not None else None
        return (g @ wd, g.T @ xd, gb)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, inputs, bw if bias is not None else (lambda g: bw(g)[:2]), "dense")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp, kh, kw, s, ho, wo):
    """[N, C, Hp, Wp] -> [N, C*kh*kw, ho*wo], one strided copy per kernel tap."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of NCHW input with an [C_out, C_in, kH, kW] kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    if stride < 1:
        raise InvalidArgumentError("stride must be >= 1")
    s, p = stride, padding
    ho = conv_output_size(h, kh, s, p)
    wo = conv_output_size(w, kw, s, p)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, s, ho, wo)
    wmat = kernel.data.reshape(co, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, co, ho, wo)
    xpshape, kshape = xp.shape, kernel.shape
    need_x, need_k = x.requires_grad, kernel.requires_grad

    def bw(g):
        gm = g.reshape(n, co, ho * wo)
        gk = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kshape) if need_k else None
        gb = gm.sum(axis=(0, 2)) if bias is not None else None
        gx = None
        if need_x and s == 1 and p <= kh - 1 and p <= kw - 1:
            # full correlation of the output gradient with the flipped kernel
            q, r = kh - 1 - p, kw - 1 - p
            gp = np.pad(g, ((0, 0), (0, 0), (q, q), (r, r))) if (q or r) else g
            wflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx = np.matmul(wflip, _im2col(gp, kh, kw, 1, h, w)).reshape(n, c, h, w)
        elif need_x:
            gcols = np.matmul(wmat.T, gm).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros(xpshape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, i, j]
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        if bias is None:
            return (gx, gk)
        return (gx, gk, gb)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, inputs, bw, "conv2d")


def nearest_upsample(x, factor):
    if int(factor) != factor or factor < 1:
        raise InvalidArgumentError(f"upsample factor must be an integer >= 1, got {factor}")
    k = int(factor)
    if k == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),), "upsample")


def batch_norm(x, gamma, beta, training, running_mean=None, running_var=None,
               momentum=0.9, eps=1e-5):
    """Per-channel normalization of [N, C, H, W] or [N, F] input.

    Train mode uses the biased batch variance and, when running buffers are
    given, updates them in place as ``r = momentum * r + (1 - momentum) * batch``.
    Eval mode normalizes with the running buffers.
    """
    xd = x.data
    if xd.ndim not in (2, 4):
        raise ShapeError("batch_norm expects [N, F] or [N, C, H, W]")
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have length {c}")
    axes = (0,) if xd.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if xd.ndim == 2 else (1, c, 1, 1)
    if training:
        if xd.shape[0] < 2:
            raise InvalidBatchError("batch_norm in train mode needs N >= 2")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1 - momentum) * mu
            running_var *= momentum
            running_var += (1 - momentum) * var
    else:
        if running_mean is None:
            raise StateError("eval-mode batch_norm needs running statistics")
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    m = xd.size // c

    def bw(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        dxhat = g * gd
        if training:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = (inv.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv.reshape(bshape)
        return (gx, ggamma, gbeta)

    return _make(out, (x, gamma, beta), bw, "batch_norm")


def log_softmax(x, axis=1):
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return _make(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax_np(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    lp = log_softmax(logits, axis=1)
    n = logits.shape[0]
    picked = getitem(lp, (np.arange(n), np.asarray(labels)))
    return mul(sum_(picked), -1.0 / n)
