"""Parameter containers, initialization and the small layers the model uses."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import DimensionError, LoadError
from .tensor import Tensor


def glorot_bound(shape):
    shape = tuple(shape)
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        if len(shape) > 2:
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        else:
            fan_in, fan_out = shape[-1], shape[0]
    return math.sqrt(6.0 / (fan_in + fan_out))


def glorot_init(shape, rng, name=None):
    """Glorot-uniform tensor; values drawn from ``rng`` in row-major order.

    Matrices use (last, first) extent as (fan_in, fan_out); conv kernels
    O×C×k×k use C·k·k and O·k·k.  Samples lie strictly inside (-a, a).
    ``rng=None`` gives zeros (a placeholder about to be overwritten by a load).
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise DimensionError(f"glorot_init: bad shape {shape}")
    if rng is None:
        return zeros(shape, name)
    bound = glorot_bound(shape)
    count = int(np.prod(shape))
    u = np.array([(rng.next_u32() + 0.5) for _ in range(count)]) / 4294967296.0
    return Tensor(((2.0 * u - 1.0) * bound).reshape(shape), requires_grad=True, name=name)


def zeros(shape, name=None):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class Module:
    """Anything holding parameter tensors, directly or through sub-modules."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Tensor):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}{i + 1}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix=""):
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state, prefix=""):
        own = dict(self.named_parameters(prefix))
        missing = sorted(set(own) - set(state))
        if missing:
            raise LoadError(f"checkpoint lacks {missing[0]}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
        for name, param in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise LoadError(f"{name}: checkpoint shape {value.shape} != model shape {param.shape}")
            param.data = value.copy()
            param.zero_grad()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """Affine map on the last axis: ``x @ weight.T + bias``."""

    def __init__(self, n_in, n_out, rng):
        self.weight = glorot_init((n_out, n_in), rng)
        self.bias = zeros(n_out)

    def __call__(self, x):
        return T.matmul(x, T.swap_last(self.weight)) + self.bias


class Conv(Module):
    def __init__(self, c_in, c_out, kernel, rng, padding=None):
        self.weight = glorot_init((c_out, c_in, kernel, kernel), rng)
        self.bias = zeros(c_out)
        self._padding = (kernel - 1) // 2 if padding is None else padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=1, padding=self._padding)


class Mlp(Module):
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, sizes, rng):
        self.fc = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.fc):
            x = layer(x)
            if i < len(self.fc) - 1:
                x = T.relu(x)
        return x


class GRUCell(Module):
    """Row-wise gated recurrent unit.

    r = σ(x Wrᵀ + h Urᵀ + br), u = σ(x Wuᵀ + h Uuᵀ + bu),
    ĥ = tanh(x Whᵀ + (r⊙h) Uhᵀ + bh), h' = (1-u)⊙ĥ + u⊙h.
    """

    def __init__(self, d, rng):
        for gate in ("r", "u", "h"):
            setattr(self, f"w_{gate}", glorot_init((d, d), rng))
            setattr(self, f"u_{gate}", glorot_init((d, d), rng))
            setattr(self, f"b_{gate}", zeros(d))
        self._d = d

    def __call__(self, x, h):
        d = self._d
        if x.shape[-1] != d or h.shape[-1] != d or x.shape != h.shape:
            raise DimensionError(f"gru_cell: x {x.shape} and h {h.shape} need matching ×{d} rows")

        def lin(v, name):
            return T.matmul(v, T.swap_last(getattr(self, name)))

        r = T.sigmoid(lin(x, "w_r") + lin(h, "u_r") + self.b_r)
        u = T.sigmoid(lin(x, "w_u") + lin(h, "u_u") + self.b_u)
        cand = T.tanh(lin(x, "w_h") + lin(T.hadamard(r, h), "u_h") + self.b_h)
        return T.hadamard(1.0 - u, cand) + T.hadamard(u, h)


def gru_cell(x, h, cell):
    return cell(T.as_tensor(x), T.as_tensor(h))
