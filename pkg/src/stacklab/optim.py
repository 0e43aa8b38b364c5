"""Bias-corrected ADAM."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, OptimizerError, ShapeError

BETA1 = 0.5
BETA2 = 0.999
EPSILON = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, param):
        data = _array(param)
        return cls(np.zeros_like(data), np.zeros_like(data), 0)


def _array(param):
    # ndarrays also have a ``.data`` attribute (a memoryview), so test the type
    return param if isinstance(param, np.ndarray) else param.data


def adam_step(param, grad, state, lr, beta1=BETA1, beta2=BETA2, epsilon=EPSILON, name="param"):
    """Apply one ADAM update in place (to an ndarray or a Tensor's data) and advance ``state``."""
    data = _array(param)
    grad = np.asarray(grad)
    if grad.shape != data.shape or state.m.shape != data.shape:
        raise ShapeError(f"{name}: gradient/state shape does not match parameter {data.shape}")
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise InvalidArgumentError("betas must lie in [0, 1)")
    if lr <= 0:
        raise InvalidArgumentError("learning rate must be positive")
    if not np.all(np.isfinite(grad)):
        raise OptimizerError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * (grad * grad)
    bc1 = 1 - beta1 ** state.t
    bc2 = 1 - beta2 ** state.t
    m_hat = state.m / bc1
    v_hat = state.v / bc2
    data -= (lr * m_hat / (np.sqrt(v_hat) + epsilon)).astype(data.dtype)
    return param, state


class Adam:
    """One optimizer per network, holding an :class:`AdamState` per named parameter."""

    def __init__(self, params, beta1=BETA1, beta2=BETA2, epsilon=EPSILON):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.states = {k: AdamState.like(p) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p, g, self.states[name], lr, self.beta1, self.beta2, self.epsilon, name)
