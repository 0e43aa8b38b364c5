"""Parameter containers and the layer building blocks used by both stages."""

from contextlib import contextmanager

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02
LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class Module:
    """Registers Tensor attributes as parameters (``requires_grad``) or buffers,
    and Module attributes as children, in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            (self._params if value.requires_grad else self._buffers)[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for k, v in self._params.items():
            yield prefix + k, v
        for k, child in self._children.items():
            yield from child.named_parameters(prefix + k + ".")

    def named_buffers(self, prefix=""):
        for k, v in self._buffers.items():
            yield prefix + k, v
        for k, child in self._children.items():
            yield from child.named_buffers(prefix + k + ".")

    def parameters(self):
        return dict(self.named_parameters())

    def state(self):
        """All persistent tensors: parameters first, then buffers."""
        out = dict(self.named_parameters())
        out.update(self.named_buffers())
        return out

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None
        for child in self._children.values():
            child.zero_grad()

    def astype(self, dtype):
        for _, t in self.state().items():
            t.data = t.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        object.__setattr__(self, "layers", list(layers))
        for i, layer in enumerate(layers):
            self._children[str(i)] = layer

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


def set_requires_grad(module, flag):
    for _, p in module.named_parameters():
        p.requires_grad = flag


@contextmanager
def frozen(module):
    """Stop gradient accumulation into ``module`` for the block's duration."""
    params = list(module.parameters().values())
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield module
    finally:
        for p, flag in zip(params, prev):
            p.requires_grad = flag


def param_hash(module):
    import hashlib

    h = hashlib.sha256()
    for name, t in module.state().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


class Dense(Module):
    def __init__(self, fin, fout, rng, dtype=np.float64, bias=True):
        super().__init__()
        self.weight = T.normal((fout, fin), 0.0, INIT_STD, rng, dtype, requires_grad=True)
        if bias:
            self.bias = T.zeros((fout,), dtype, requires_grad=True)
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x):
        return T.dense(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, *, rng, dtype=np.float64, bias=True):
        super().__init__()
        self.kernel = T.normal((cout, cin, kernel, kernel), 0.0, INIT_STD, rng, dtype, requires_grad=True)
        if bias:
            self.bias = T.zeros((cout,), dtype, requires_grad=True)
        else:
            object.__setattr__(self, "bias", None)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)

    def forward(self, x):
        return T.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels, dtype=np.float64):
        super().__init__()
        self.gamma = T.constant((channels,), 1.0, dtype, requires_grad=True)
        self.beta = T.zeros((channels,), dtype, requires_grad=True)
        self.running_mean = T.zeros((channels,), dtype)
        self.running_var = T.constant((channels,), 1.0, dtype)

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.training,
                            self.running_mean.data, self.running_var.data,
                            BN_MOMENTUM, BN_EPS)


class Act(Module):
    def __init__(self, kind):
        super().__init__()
        object.__setattr__(self, "kind", kind)

    def forward(self, x):
        return T.activation(x, self.kind, LEAKY_SLOPE)


class Upsample(Module):
    def __init__(self, factor=2):
        super().__init__()
        object.__setattr__(self, "factor", factor)

    def forward(self, x):
        return T.nearest_upsample(x, self.factor)


def up_block(cin, cout, rng, dtype):
    """Nearest x2, 3x3 stride-1 conv, batch norm, ReLU."""
    return Sequential(Upsample(2), Conv2d(cin, cout, 3, 1, 1, rng=rng, dtype=dtype),
                      BatchNorm(cout, dtype), Act("relu"))


def down_block(cin, cout, rng, dtype, batch_norm=True):
    """4x4 stride-2 conv, optional batch norm, LeakyReLU."""
    layers = [Conv2d(cin, cout, 4, 2, 1, rng=rng, dtype=dtype)]
    if batch_norm:
        layers.append(BatchNorm(cout, dtype))
    layers.append(Act("leaky_relu"))
    return Sequential(*layers)


class ResidualBlock(Module):
    """conv-BN-ReLU-conv-BN plus identity skip; no activation after the add."""

    def __init__(self, channels, rng, dtype, relu_after_add=False):
        super().__init__()
        self.body = Sequential(
            Conv2d(channels, channels, 3, 1, 1, rng=rng, dtype=dtype), BatchNorm(channels, dtype), Act("relu"),
            Conv2d(channels, channels, 3, 1, 1, rng=rng, dtype=dtype), BatchNorm(channels, dtype),
        )
        object.__setattr__(self, "relu_after_add", relu_after_add)

    def forward(self, x):
        out = x + self.body(x)
        return T.relu(out) if self.relu_after_add else out
