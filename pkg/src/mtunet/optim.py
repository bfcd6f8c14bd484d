"""AdaBelief optimizer and step learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, UsageError


def lr_schedule(epoch, base_lr, step, factor):
    """Step decay: ``base_lr / factor ** (epoch // step)``."""
    if step < 1 or factor <= 1:
        raise UsageError("lr_schedule needs step >= 1 and factor > 1")
    return base_lr / factor ** (epoch // step)


class ParamState:
    __slots__ = ("m", "s", "t")

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.s = np.zeros(shape)
        self.t = 0


def adabelief_step(param, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, name="param"):
    """Update ``param`` (ndarray) in place and advance ``state``."""
    if not np.isfinite(grad).all():
        raise NonFiniteError(f"non-finite gradient for {name}")
    if state.m.shape != param.shape:
        raise UsageError(f"optimizer state shape {state.m.shape} != {name} shape {param.shape}")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.s = beta2 * state.s + (1.0 - beta2) * (grad - state.m) ** 2 + eps
    m_hat = state.m / (1.0 - beta1 ** state.t)
    s_hat = state.s / (1.0 - beta2 ** state.t)
    param -= lr * m_hat / (np.sqrt(s_hat) + eps)
    return param


class AdaBelief:
    """AdaBelief over a list of ``(name, Tensor)`` pairs."""

    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {name: ParamState(p.shape) for name, p in self.named_params}

    def step(self):
        for name, p in self.named_params:
            adabelief_step(p.data, p.grad, self.state[name], self.lr,
                           self.beta1, self.beta2, self.eps, name=name)

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()

    @property
    def steps(self):
        return max((s.t for s in self.state.values()), default=0)

