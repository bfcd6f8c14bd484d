"""Second and third training stages: pattern extractor, then pair matcher.

Each stage freezes everything trained before it.
"""

from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .backbone import cross_entropy
from .data import augment, evaluate, sample_episode
from .errors import UsageError
from .io import load_checkpoint, save_checkpoint  # noqa: F401  (re-exported)
from .matcher import PairMatcher, average_supports, episode_loss, score_matrix
from .model import MTUNet
from .optim import AdaBelief, lr_schedule
from .pattern import PatternExtractor, pe_forward
from .tensor import no_grad

log = logging.getLogger(__name__)

PE_TRAIN_FRACTION = 0.9
PE_STRIDE_DEFAULT = 10


def scouter_loss(attention, labels, lam=1.0, e=1.0, area_norm="zl"):
    """Slot-sum cross-entropy plus λ times the attention area.

    Slot logits are ``e · Σ_j A[k, j]``; labels are 0-based slot indices.
    The area term is the mean attention entry (``zl``) or the per-image
    attention sum divided by l only (``l``).
    """
    attention = T.as_tensor(attention)
    if attention.ndim == 2:
        attention = attention.reshape((1,) + attention.shape)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    b, z, l = attention.shape
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= z:
        raise UsageError(f"labels must be {b} slot indices in [0, {z})")
    logits = T.scale(T.tsum(attention, axis=-1), e)
    ce = cross_entropy(logits, labels)
    if area_norm == "zl":
        area = T.mean(attention)
    elif area_norm == "l":
        area = T.tsum(attention) / (b * l)
    else:
        raise UsageError(f"unknown area_norm {area_norm!r}")
    return ce + T.scale(area, lam)


def select_pe_categories(dataset, config):
    """Base categories the extractor is trained on (one slot each)."""
    base = dataset.categories("base")
    if config.pe_cats:
        chosen = []
        for token in config.pe_cats:
            if token in base:
                chosen.append(token)
            elif token.isdigit() and int(token) < len(base):
                chosen.append(base[int(token)])
            else:
                raise UsageError(f"PE category {token!r} is not in the base split")
    else:
        chosen = base[::config.pe_stride or PE_STRIDE_DEFAULT]
    if len(set(chosen)) != len(chosen):
        raise UsageError("PE categories must be distinct")
    if config.slots is not None and config.slots != len(chosen):
        raise UsageError(f"slots={config.slots} but {len(chosen)} PE categories were selected")
    return chosen


def split_pe_images(dataset, categories, rng):
    """Per category, shuffle and keep the first 90% for training."""
    train, val = [], []
    for label, category in enumerate(categories):
        ids = rng.shuffle(dataset.ids("base", category))
        cut = min(len(ids) - 1, max(1, int(round(PE_TRAIN_FRACTION * len(ids)))))
        train += [(i, label) for i in ids[:cut]]
        val += [(i, label) for i in ids[cut:]]
    return train, val


def _frozen_features(backbone, dataset, ids, batch=128):
    out = []
    with no_grad():
        for start in range(0, len(ids), batch):
            out.append(backbone.features(dataset.load_many(ids[start:start + batch])).data)
    return np.concatenate(out)


def pe_accuracy(pe, features, labels, e=1.0, batch=128):
    correct = 0
    with no_grad():
        for start in range(0, len(features), batch):
            _, attn = pe_forward(features[start:start + batch], pe)
            pred = np.argmax(e * attn.data.sum(axis=-1), axis=-1)
            correct += int((pred == labels[start:start + batch]).sum())
    return correct / len(features)


def train_pe(dataset, backbone, config, rng):
    """Fit a pattern extractor with the frozen ``backbone``.

    Returns ``(pe, categories, history)`` with history of (loss, val acc).
    """
    categories = select_pe_categories(dataset, config)
    train, val = split_pe_images(dataset, categories, rng)
    train_feats = _frozen_features(backbone, dataset, [i for i, _ in train])
    val_feats = _frozen_features(backbone, dataset, [i for i, _ in val])
    train_labels = np.array([y for _, y in train])
    val_labels = np.array([y for _, y in val])
    pe = PatternExtractor(backbone.channels, len(categories), rng, dim=config.dim, iterations=config.iterations)
    opt = AdaBelief(pe.named_parameters("pe."), lr=config.lr)
    best_acc, best_state, history = -1.0, None, []
    for epoch in range(config.epochs):
        opt.lr = lr_schedule(epoch, config.lr, config.lr_step, config.lr_factor)
        order = np.array(rng.shuffle(range(len(train))), dtype=np.int64)
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            _, attn = pe_forward(train_feats[idx], pe)
            loss = scouter_loss(attn, train_labels[idx], config.lambda_, config.e, config.area_norm)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        acc = pe_accuracy(pe, val_feats, val_labels, config.e)
        history.append((float(np.mean(losses)), acc))
        log.info("pe epoch %d loss %.4f val-acc %.4f", epoch + 1, history[-1][0], acc)
        if acc > best_acc:
            best_acc, best_state = acc, pe.state_dict()
    if best_state is not None:
        pe.load_state_dict(best_state)
    return pe, categories, history


def matcher_step(model, images_support, images_query, way, shot, labels, opt, loss_kind):
    """One optimizer step on a single episode; returns the loss before the step."""
    sup_v = model.embed(images_support).reshape(way, shot, -1)
    qry_v = model.embed(images_query)
    opt.zero_grad()
    scores = score_matrix(qry_v, average_supports(sup_v), model.pm)
    loss = episode_loss(scores, labels, loss_kind)
    loss.backward()
    opt.step()
    return loss.item()


def train_matcher(dataset, backbone, pe, config, rng):
    """Fit the pair matcher on base-split episodes with backbone and PE frozen.

    After every epoch the model is scored on ``val_episodes`` validation
    episodes; the best epoch is kept.  Returns ``(pm, history)``.
    """
    sample = dataset.load(dataset.ids("base")[0])
    _, h, w = backbone.feature_shape(*sample.shape[1:])
    pm = PairMatcher(backbone.channels, rng, input_scale=h * w)
    model = MTUNet(backbone, pe, pm)
    opt = AdaBelief(pm.named_parameters("pm."), lr=config.lr)
    val_way = min(config.way, len(dataset.categories("val")))
    val_cache = {}
    best_acc, best_state, history = -1.0, None, []
    for epoch in range(config.epochs):
        opt.lr = lr_schedule(epoch, config.lr, config.lr_step, config.lr_factor)
        losses = []
        for _ in range(config.episodes):
            ep = sample_episode(dataset, "base", config.way, config.shot, config.query, rng)
            sup = dataset.load_many(ep.support_ids)
            qry = dataset.load_many(ep.query_ids)
            if config.augment:
                sup = np.stack([augment(im, rng) for im in sup])
                qry = np.stack([augment(im, rng) for im in qry])
            losses.append(matcher_step(model, sup, qry, config.way, config.shot, ep.query_labels, opt, config.loss))
        report = evaluate(model, dataset, "val", config.val_episodes, val_way, config.shot, config.query,
                          base_seed=config.seed, cache=val_cache)
        history.append((float(np.mean(losses)), report.mean))
        log.info("matcher epoch %d loss %.4f val-acc %.4f", epoch + 1, history[-1][0], report.mean)
        if report.mean > best_acc:
            best_acc, best_state = report.mean, pm.state_dict()
    if best_state is not None:
        pm.load_state_dict(best_state)
    return pm, history


__all__ = [
    "scouter_loss", "select_pe_categories", "split_pe_images", "train_pe", "train_matcher",
    "pe_accuracy", "matcher_step", "save_checkpoint", "load_checkpoint",
]
