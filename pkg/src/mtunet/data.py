"""Datasets on disk, the K-way N-shot episode sampler, augmentation and
episodic evaluation."""

from __future__ import annotations

import colorsys
import csv
import io
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LoadError, UsageError
from .imaging import resize_bilinear, sample_bilinear
from .io import read_tensor, write_tensor
from .rng import Pcg32, mix_seed

SPLITS = ("base", "val", "test")
INDEX_HEADER = ["path", "category", "split"]

SHAPES = ("disk", "square", "triangle", "cross", "ring")
N_HUES = 8
FREQUENCIES = (2.0, 4.0, 7.0)
EPISODE_STREAM = 1013


@dataclass
class Record:
    image_id: int
    path: str
    category: str
    split: str


class Dataset:
    """Images indexed by integer id, with disjoint category splits.

    Images are read lazily and every read is recorded in ``access_log``
    (split -> set of ids), so tests can audit what a stage touched.
    """

    def __init__(self, records, root=None, arrays=None):
        self.root = Path(root) if root is not None else None
        self.records = list(records)
        self._arrays = arrays
        self._cache = {}
        self.access_log = defaultdict(set)
        self._by_split = {s: defaultdict(list) for s in SPLITS}
        owner = {}
        for rec in self.records:
            if owner.setdefault(rec.category, rec.split) != rec.split:
                raise LoadError(f"category {rec.category!r} appears in splits {owner[rec.category]!r} and {rec.split!r}")
            self._by_split[rec.split][rec.category].append(rec.image_id)

    @classmethod
    def from_arrays(cls, images, categories, splits):
        """In-memory dataset; ``images`` is a sequence of 3×H×W arrays."""
        records = [Record(i, f"mem:{i}", str(c), s) for i, (c, s) in enumerate(zip(categories, splits))]
        return cls(records, arrays=[np.asarray(im, dtype=np.float64) for im in images])

    def __len__(self):
        return len(self.records)

    def categories(self, split):
        return list(self._by_split[split])

    def ids(self, split, category=None):
        groups = self._by_split[split]
        if category is not None:
            return list(groups[category])
        return [i for ids in groups.values() for i in ids]

    def label_of(self, image_id):
        return self.records[image_id].category

    def load(self, image_id):
        """3×H×W float image in [0, 1]."""
        rec = self.records[image_id]
        self.access_log[rec.split].add(image_id)
        if image_id in self._cache:
            return self._cache[image_id]
        if self._arrays is not None:
            image = self._arrays[image_id]
        else:
            raw = read_tensor(self.root / rec.path)
            image = raw / 255.0 if raw.dtype == np.uint8 else raw
            if image.ndim != 3 or image.shape[0] != 3:
                raise LoadError(f"{rec.path}: expected a 3×H×W image, got shape {image.shape}")
        self._cache[image_id] = image
        return image

    def load_many(self, ids):
        return np.stack([self.load(i) for i in ids])

    def clear_log(self):
        self.access_log.clear()


def load_dataset(root):
    """Read ``root/index.csv`` (header ``path,category,split``)."""
    root = Path(root)
    index = root / "index.csv"
    if not index.exists():
        raise LoadError(f"{index} does not exist")
    text = index.read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != INDEX_HEADER:
        raise LoadError(f"{index}: row 1: header must be {','.join(INDEX_HEADER)}")
    records = []
    owner = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise LoadError(f"{index}: row {lineno}: expected 3 fields, got {len(row)}")
        path, category, split = row
        if split not in SPLITS:
            raise LoadError(f"{index}: row {lineno}: unknown split {split!r}")
        if owner.setdefault(category, split) != split:
            raise LoadError(f"{index}: row {lineno}: category {category!r} already in split {owner[category]!r}")
        if not (root / path).is_file():
            raise LoadError(f"{index}: row {lineno}: missing image file {path}")
        records.append(Record(len(records), path, category, split))
    if not records:
        raise LoadError(f"{index}: no images listed")
    return Dataset(records, root=root)


# -- synthetic data -----------------------------------------------------------

def category_triple(index):
    """(shape, hue index, frequency) for category ``index``; injective."""
    shape = index % len(SHAPES)
    hue = ((index // len(SHAPES)) * 3 + shape) % N_HUES
    freq = (index // (len(SHAPES) * N_HUES)) % len(FREQUENCIES)
    return SHAPES[shape], hue, FREQUENCIES[freq]


MAX_CATEGORIES = len(SHAPES) * N_HUES * len(FREQUENCIES)


def _motif_mask(shape, dx, dy, r):
    dist = np.hypot(dx, dy)
    if shape == "disk":
        return dist <= r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    if shape == "triangle":
        return (dy <= 0.7 * r) & (np.abs(dx) <= 0.6 * (dy + r))
    if shape == "cross":
        return ((np.abs(dx) <= 0.3 * r) & (np.abs(dy) <= r)) | ((np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r))
    return (dist <= r) & (dist >= 0.55 * r)


def render_synthetic(triple, size, rng):
    shape, hue, freq = triple
    coarse = np.array(rng.floats(3 * 8 * 8)).reshape(3, 8, 8)
    image = 0.25 + 0.3 * resize_bilinear(coarse, size, size)
    cx = size * rng.uniform(0.3, 0.7)
    cy = size * rng.uniform(0.3, 0.7)
    radius = size * rng.uniform(0.2, 0.3)
    angle = rng.uniform(0.0, math.pi)
    phase = rng.uniform(0.0, 2 * math.pi)
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    mask = _motif_mask(shape, xs - cx, ys - cy, radius)
    stripes = np.cos(2 * math.pi * freq * (xs * math.cos(angle) + ys * math.sin(angle)) / size + phase)
    color = np.array(colorsys.hsv_to_rgb(hue / N_HUES, 0.85, 0.95))
    motif = color[:, None, None] * (0.7 + 0.3 * stripes)[None]
    image = np.where(mask[None], motif, image)
    return np.clip(image, 0.0, 1.0)


def generate_synthetic(root, n_base, n_val, n_test, per_class, size=32, seed=1):
    """Write a synthetic dataset under ``root`` and return it loaded."""
    if min(n_base, n_val, n_test, per_class) < 1:
        raise UsageError("category and image counts must be >= 1")
    if size < 16:
        raise UsageError("image size must be >= 16")
    total = n_base + n_val + n_test
    if total > MAX_CATEGORIES:
        raise UsageError(f"{total} categories requested, only {MAX_CATEGORIES} distinct motifs exist")
    root = Path(root)
    rng = Pcg32(seed, stream=7)
    splits = ["base"] * n_base + ["val"] * n_val + ["test"] * n_test
    rows = []
    for index, split in enumerate(splits):
        triple = category_triple(index)
        name = f"c{index:03d}_{triple[0]}_h{triple[1]}_f{int(triple[2])}"
        folder = root / "images" / name
        folder.mkdir(parents=True, exist_ok=True)
        for j in range(per_class):
            image = render_synthetic(triple, size, rng)
            rel = f"images/{name}/{j:04d}.btsr"
            write_tensor(root / rel, np.round(image * 255.0).astype(np.uint8))
            rows.append((rel, name, split))
    with open(root / "index.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INDEX_HEADER)
        writer.writerows(rows)
    return load_dataset(root)


# -- episodes -------------------------------------------------------------------

@dataclass
class Episode:
    categories: list
    support: list  # (image id, label), category-major, N per category
    query: list  # (image id, label), category-major, M per category
    seed: int | None = None

    @property
    def way(self):
        return len(self.categories)

    @property
    def shot(self):
        return len(self.support) // len(self.categories)

    @property
    def support_ids(self):
        return [i for i, _ in self.support]

    @property
    def query_ids(self):
        return [i for i, _ in self.query]

    @property
    def query_labels(self):
        return np.array([y for _, y in self.query])


def sample_episode(dataset, split, way, shot, query, rng):
    """Draw ``way`` categories, then ``shot + query`` distinct images of each."""
    if way < 1 or shot < 1 or query < 0:
        raise UsageError(f"invalid episode shape K={way}, N={shot}, M={query}")
    eligible = [c for c in dataset.categories(split) if len(dataset.ids(split, c)) >= shot + query]
    if len(eligible) < way:
        raise UsageError(f"split {split!r} has {len(eligible)} categories with >= {shot + query} images, need {way}")
    categories = rng.sample(eligible, way)
    support, queries = [], []
    for label, category in enumerate(categories):
        ids = rng.sample(dataset.ids(split, category), shot + query)
        support.extend((i, label) for i in ids[:shot])
        queries.extend((i, label) for i in ids[shot:])
    return Episode(categories, support, queries)


def episode_rng(base_seed, index):
    return Pcg32(mix_seed(base_seed, index), stream=EPISODE_STREAM)


# -- augmentation ---------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotation: float = 10.0  # degrees
    max_translation: float = 0.1  # fraction of size
    min_scale: float = 0.9
    max_scale: float = 1.1

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, 0.0, 1.0, 1.0)


def augment(image, rng, config=None):
    """Random horizontal flip, then a random affine warp (bilinear, edge clamp).

    Exactly five values are drawn from ``rng`` per call.
    """
    config = config or AugmentConfig()
    flip = rng.next_float() < config.flip_prob
    angle = math.radians(rng.uniform(-config.max_rotation, config.max_rotation))
    _, h, w = image.shape
    tx = rng.uniform(-config.max_translation, config.max_translation) * w
    ty = rng.uniform(-config.max_translation, config.max_translation) * h
    zoom = rng.uniform(config.min_scale, config.max_scale)
    out = image[:, :, ::-1] if flip else image
    if angle == 0.0 and tx == 0.0 and ty == 0.0 and zoom == 1.0:
        return np.array(out)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = ys - cy - ty, xs - cx - tx
    cos, sin = math.cos(angle), math.sin(angle)
    src_x = (cos * dx + sin * dy) / zoom + cx
    src_y = (-sin * dx + cos * dy) / zoom + cy
    return np.clip(sample_bilinear(out, src_y, src_x), 0.0, 1.0)


# -- evaluation -------------------------------------------------------------------

@dataclass
class EvalReport:
    mean: float
    ci: float
    episodes: int
    accuracies: list = field(repr=False)

    def to_dict(self):
        return {"mean": self.mean, "ci": self.ci, "episodes": self.episodes}

    def format(self):
        return f"ACC {100 * self.mean:.2f} ± {100 * self.ci:.2f}"


def confidence_interval(accuracies):
    """95% half-width: 1.96 · sample std (n-1) / sqrt(n); 0 for one episode."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size < 2:
        return 0.0
    return float(1.96 * acc.std(ddof=1) / math.sqrt(acc.size))


def evaluate(model, dataset, split, episodes, way, shot, query, base_seed, jobs=1, cache=None):
    """Mean accuracy and 95% CI over ``episodes`` sampled episodes.

    ``model`` provides ``embed(images) -> (B, c)`` and
    ``classify(query_feats, support_feats) -> labels`` where support_feats
    is K×N×c.  Embeddings are memoized per image id, in ``cache`` when one
    is passed (valid only while the embedding part of the model is frozen).
    The model is never modified.
    """
    if episodes < 1:
        raise UsageError("episodes must be >= 1")
    plans = []
    for i in range(episodes):
        ep = sample_episode(dataset, split, way, shot, query, episode_rng(base_seed, i))
        ep.seed = mix_seed(base_seed, i)
        plans.append(ep)
    feats = {} if cache is None else cache
    needed = sorted({i for ep in plans for i in ep.support_ids + ep.query_ids} - set(feats))
    for start in range(0, len(needed), 256):
        chunk = needed[start:start + 256]
        for image_id, vec in zip(chunk, model.embed(dataset.load_many(chunk))):
            feats[image_id] = vec

    def score(ep):
        sup = np.stack([feats[i] for i in ep.support_ids]).reshape(way, shot, -1)
        qry = np.stack([feats[i] for i in ep.query_ids])
        pred = np.asarray(model.classify(qry, sup))
        return float(np.mean(pred == ep.query_labels))

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            accuracies = list(pool.map(score, plans))
    else:
        accuracies = [score(ep) for ep in plans]
    return EvalReport(float(np.mean(accuracies)), confidence_interval(accuracies), episodes, accuracies)
