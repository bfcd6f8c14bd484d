"""Conv-4 style feature backbone, its supervised pretraining and the
nearest-centroid validation used to pick the best epoch."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import augment, sample_episode
from .errors import DimensionError, UsageError
from .nn import Conv, Linear, Module
from .optim import AdaBelief, lr_schedule
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

WIDTHS = (32, 64, 64, 64)
POOLED_BLOCKS = 2


class Block(Module):
    def __init__(self, c_in, c_out, rng, pool):
        self.conv = Conv(c_in, c_out, 3, rng)
        self._pool = pool

    def __call__(self, x):
        x = T.relu(self.conv(x))
        return T.pool2d("max", x, 2) if self._pool else x


class Backbone(Module):
    """3×3 conv + ReLU blocks; the first two also max-pool by 2.

    A 32×32 input gives a 64×8×8 feature map.  ``head`` (global average
    pool + linear) is only used while pretraining.
    """

    def __init__(self, n_classes, rng, widths=WIDTHS, in_channels=3):
        chans = (in_channels,) + tuple(widths)
        self.block = [Block(a, b, rng, i < POOLED_BLOCKS) for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))]
        self.head = Linear(widths[-1], n_classes, rng)

    @property
    def channels(self):
        return self.block[-1].conv.weight.shape[0]

    @property
    def in_channels(self):
        return self.block[0].conv.weight.shape[1]

    def features(self, images):
        x = T.as_tensor(images)
        if x.shape[-3] != self.in_channels:
            raise DimensionError(f"image has {x.shape[-3]} channels, backbone expects {self.in_channels}")
        for block in self.block:
            x = block(x)
        return x

    def logits(self, images):
        pooled = T.mean(self.features(images), axis=(-2, -1))
        return self.head(pooled)

    def feature_shape(self, height, width):
        scale = 2 ** POOLED_BLOCKS
        return self.channels, height // scale, width // scale


@dataclass
class FeatureMap:
    tensor: Tensor
    image_id: object = None

    @property
    def shape(self):
        return self.tensor.shape


def extract_features(backbone, image, image_id=None):
    """Forward one 3×H×W image (no head, no graph)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"expected a 3×H×W image, got shape {image.shape}")
    with no_grad():
        return FeatureMap(backbone.features(image), image_id)


def embed_pooled(backbone, images, batch=128):
    """Global-average-pooled features, (B, c) ndarray."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch):
            out.append(backbone.features(images[start:start + batch]).data.mean(axis=(-2, -1)))
    return np.concatenate(out) if out else np.zeros((0, backbone.channels))


def cross_entropy(logits, labels):
    labels = np.asarray(labels)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return T.neg(T.tsum(T.hadamard(T.log_softmax_rows(logits), onehot))) / len(labels)


def nearest_centroid(support, query):
    """Labels of ``query`` (Q×c) by Euclidean distance to centroids of K×N×c
    ``support``; the lowest class index wins ties."""
    centroids = support.mean(axis=1)
    dist = ((query[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(dist, axis=1)


def nn_validate(backbone, dataset, split, episodes, way, shot, rng, query=15):
    """Mean nearest-centroid accuracy over sampled episodes on raw pooled features."""
    n_cat = len(dataset.categories(split))
    if way > n_cat:
        raise UsageError(f"{way}-way validation needs {way} categories, split {split!r} has {n_cat}")
    plans = [sample_episode(dataset, split, way, shot, query, rng) for _ in range(episodes)]
    ids = sorted({i for ep in plans for i in ep.support_ids + ep.query_ids})
    pooled = dict(zip(ids, embed_pooled(backbone, dataset.load_many(ids))))
    accs = []
    for ep in plans:
        sup = np.stack([pooled[i] for i in ep.support_ids]).reshape(way, shot, -1)
        qry = np.stack([pooled[i] for i in ep.query_ids])
        accs.append(np.mean(nearest_centroid(sup, qry) == ep.query_labels))
    return float(np.mean(accs))


def pretrain_backbone(dataset, config, rng, backbone=None):
    """Cross-entropy training on every base image; keep the best-validating epoch.

    Returns ``(backbone, history)``; ``history`` holds per-epoch
    (loss, validation accuracy).
    """
    categories = dataset.categories("base")
    if len(categories) < 2:
        raise UsageError("backbone pretraining needs at least two base categories")
    ids = dataset.ids("base")
    if not ids:
        raise UsageError("base split is empty")
    label = {c: k for k, c in enumerate(categories)}
    targets = {i: label[dataset.label_of(i)] for i in ids}
    model = backbone or Backbone(len(categories), rng)
    opt = AdaBelief(model.named_parameters("backbone."), lr=config.lr)
    best_acc, best_state, history = -1.0, None, []
    for epoch in range(config.epochs):
        opt.lr = lr_schedule(epoch, config.lr, config.lr_step, config.lr_factor)
        order = rng.shuffle(ids)
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            images = dataset.load_many(batch)
            if config.augment:
                images = np.stack([augment(im, rng) for im in images])
            opt.zero_grad()
            loss = cross_entropy(model.logits(images), [targets[i] for i in batch])
            loss.backward()
            opt.step()
            losses.append(loss.item())
        acc = nn_validate(model, dataset, "val", config.val_episodes,
                          min(config.way, len(dataset.categories("val"))), config.shot, rng, config.query)
        history.append((float(np.mean(losses)), acc))
        log.info("backbone epoch %d loss %.4f val-acc %.4f", epoch + 1, history[-1][0], acc)
        if acc > best_acc:
            best_acc, best_state = acc, model.state_dict()
    model.load_state_dict(best_state)
    return model, history
