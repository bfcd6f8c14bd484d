"""Pattern extractor: slot-style attention of z learned patterns over a
feature map, refined by a GRU, with sigmoid-times-softmax modulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .nn import Conv, GRUCell, Linear, Mlp, Module, glorot_init
from .tensor import Tensor


class PatternExtractor(Module):
    def __init__(self, channels, slots, rng, dim=64, iterations=3):
        if slots < 1 or iterations < 1 or dim < 1:
            raise UsageError("slots, dim and iterations must all be >= 1")
        self.squeeze = Conv(channels, dim, 1, rng, padding=0)
        self.position = Linear(4, dim, rng)
        self.patterns = glorot_init((slots, dim), rng)
        self.query = Mlp([dim, dim, dim, dim], rng)
        self.key = Mlp([dim, dim, dim, dim], rng)
        self.gru = GRUCell(dim, rng)
        self.iterations = iterations

    @property
    def channels(self):
        return self.squeeze.weight.shape[1]

    @property
    def dim(self):
        return self.patterns.shape[1]

    @property
    def slots(self):
        return self.patterns.shape[0]


@dataclass
class AttentionState:
    raw: Tensor  # scores before modulation, z×l
    attention: Tensor  # modulated, z×l
    patterns: Tensor  # W^(t), z×d
    updates: Tensor  # A·F'ᵀ, z×d
    t: int


def squeeze_project(features, pe):
    """1×1 conv + ReLU to ``dim`` channels, then row-major spatial flatten."""
    features = T.as_tensor(features)
    if features.shape[-3] != pe.channels:
        raise DimensionError(f"feature map has {features.shape[-3]} channels, extractor expects {pe.channels}")
    squeezed = T.relu(pe.squeeze(features))
    h, w = features.shape[-2:]
    return squeezed.reshape(squeezed.shape[:-2] + (h * w,))


def position_grid(h, w):
    """l×4 coordinate code (x, y, 1-x, 1-y); a unit extent maps to 0."""
    ys = np.linspace(0.0, 1.0, h) if h > 1 else np.zeros(1)
    xs = np.linspace(0.0, 1.0, w) if w > 1 else np.zeros(1)
    y, x = np.meshgrid(ys, xs, indexing="ij")
    x, y = x.reshape(-1), y.reshape(-1)
    return np.stack([x, y, 1.0 - x, 1.0 - y], axis=1)


def add_position(flat, h, w, pe):
    flat = T.as_tensor(flat)
    if flat.shape[-1] != h * w:
        raise DimensionError(f"flattened map has {flat.shape[-1]} positions, grid is {h}×{w}")
    embedding = pe.position(Tensor(position_grid(h, w)))
    return flat + T.swap_last(embedding)


def modulate(raw):
    """σ(Ā) ⊙ softmax over each row of Ā."""
    raw = T.as_tensor(raw)
    return T.hadamard(T.sigmoid(raw), T.softmax_rows(raw))


def _keys(embedded, pe):
    # position-wise g_K over the l columns
    return T.swap_last(pe.key(T.swap_last(embedded)))


def _step(patterns, keys, flat, pe, t):
    raw = T.matmul(pe.query(patterns), keys)
    attention = modulate(raw)
    updates = T.matmul(attention, T.swap_last(flat))
    nxt = pe.gru(updates, patterns)
    return AttentionState(raw, attention, patterns, updates, t), nxt


def attention_iteration(state_patterns, embedded, flat, pe, t=1):
    """One refinement: returns (state at t, patterns for t+1)."""
    if embedded.shape != flat.shape or state_patterns.shape[-1] != flat.shape[-2]:
        raise DimensionError(f"patterns {state_patterns.shape}, embedded {embedded.shape}, flat {flat.shape} disagree")
    return _step(T.as_tensor(state_patterns), _keys(embedded, pe), flat, pe, t)


def initial_patterns(pe, batch_shape=()):
    if not batch_shape:
        return pe.patterns
    return pe.patterns + np.zeros(tuple(batch_shape) + pe.patterns.shape)


def extract_overall(features, attention):
    """Channel vector from pattern-averaged spatial weights, average-pooled.

    a_j = mean over patterns of attention[:, j];  V_c = (1/l) Σ_j a_j F[c, j].
    """
    features, attention = T.as_tensor(features), T.as_tensor(attention)
    c, h, w = features.shape[-3:]
    l = h * w
    if attention.shape[-1] != l:
        raise DimensionError(f"attention covers {attention.shape[-1]} positions, features have {l}")
    weights = T.mean(attention, axis=-2)  # (..., l)
    flat = features.reshape(features.shape[:-2] + (l,))
    pooled = T.matmul(flat, weights.reshape(weights.shape + (1,)))
    return T.scale(pooled.reshape(pooled.shape[:-1]), 1.0 / l)


def pe_forward(features, pe, return_states=False):
    """Return (V, A_T) for a c×h×w map or a batch of them."""
    features = T.as_tensor(features)
    h, w = features.shape[-2:]
    flat = squeeze_project(features, pe)
    embedded = add_position(flat, h, w, pe)
    keys = _keys(embedded, pe)
    patterns = initial_patterns(pe, features.shape[:-3])
    states = []
    for t in range(1, pe.iterations + 1):
        state, patterns = _step(patterns, keys, flat, pe, t)
        states.append(state)
    attention = states[-1].attention
    overall = extract_overall(features, attention)
    if return_states:
        return overall, attention, states
    return overall, attention
