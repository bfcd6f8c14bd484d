"""Pairwise matching head and the episode loss."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .nn import Mlp, Module

CLAMP = 1e-12


class PairMatcher(Module):
    """MLP 2c -> c -> c/2 -> 1 on the concatenation [query, support].

    ``input_scale`` multiplies the concatenated input before the first
    layer.  Mean-pooled pattern features are O(1/l) in size, so training
    sets it to l (turning the spatial mean into a sum).
    """

    def __init__(self, channels, rng, input_scale=1.0):
        self.mlp = Mlp([2 * channels, channels, max(1, channels // 2), 1], rng)
        self.input_scale = float(input_scale)

    @property
    def channels(self):
        return self.mlp.fc[0].weight.shape[1] // 2


def average_supports(supports):
    """Mean over the shot axis (second to last): N×c -> c, K×N×c -> K×c."""
    supports = T.as_tensor(supports)
    if supports.ndim < 2 or supports.shape[-2] == 0:
        raise UsageError("average_supports needs at least one support vector")
    return T.mean(supports, axis=-2)


def match_logit(query, support, pm):
    query, support = T.as_tensor(query), T.as_tensor(support)
    if query.shape != support.shape or query.shape[-1] != pm.channels:
        raise DimensionError(f"match: query {query.shape} and support {support.shape} need ×{pm.channels}")
    pair = T.concat([query, support], axis=-1)
    if pm.input_scale != 1.0:
        pair = T.scale(pair, pm.input_scale)
    lead = pair.shape[:-1]
    logit = pm.mlp(pair.reshape((-1, pair.shape[-1])))
    return logit.reshape(lead)


def match_score(query, support, pm):
    """Membership probability σ(f([query, support])), query first."""
    return T.sigmoid(match_logit(query, support, pm))


def pair_logits(queries, centroids, pm):
    """Q×K logits for every (query, category centroid) pair."""
    queries, centroids = T.as_tensor(queries), T.as_tensor(centroids)
    q, k = queries.shape[0], centroids.shape[0]
    c = queries.shape[-1]
    left = queries.reshape(q, 1, c) + np.zeros((q, k, c))
    right = centroids.reshape(1, k, c) + np.zeros((q, k, c))
    return match_logit(left, right, pm)


def score_matrix(queries, centroids, pm):
    return T.sigmoid(pair_logits(queries, centroids, pm))


def classify_query(scores):
    """Argmax over the last axis; ties go to the lowest category index."""
    return np.argmax(np.asarray(scores), axis=-1)


def episode_loss(scores, labels, kind="bce"):
    """Mean-reduced loss over Q×K pair scores.

    ``bce``: binary cross-entropy on every pair, one positive per query.
    ``softmax_ce``: cross-entropy of a softmax over each query's K log-odds.
    Scores are clamped to [1e-12, 1 - 1e-12].
    """
    scores = T.as_tensor(scores)
    labels = np.asarray(labels, dtype=np.int64)
    q, k = scores.shape
    if labels.shape != (q,) or labels.min() < 0 or labels.max() >= k:
        raise UsageError(f"labels must be {q} integers in [0, {k})")
    target = np.zeros((q, k))
    target[np.arange(q), labels] = 1.0
    s = T.clip(scores, CLAMP, 1.0 - CLAMP)
    if kind == "bce":
        pos = T.hadamard(T.log(s), target)
        neg = T.hadamard(T.log(1.0 - s), 1.0 - target)
        return T.neg(T.mean(pos + neg))
    if kind == "softmax_ce":
        logits = T.log(s) - T.log(1.0 - s)
        return T.neg(T.tsum(T.hadamard(T.log_softmax_rows(logits), target))) / q
    raise UsageError(f"unknown loss {kind!r}")
