"""Attention heatmaps, overlays, matching-score matrices and PGM/PPM export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, LoadError, UsageError
from .imaging import grayscale, resize_bilinear
from .matcher import average_supports, score_matrix
from .tensor import no_grad

ALPHA = 0.5


@dataclass
class Heatmap:
    source: np.ndarray  # attention row, length l
    image: np.ndarray  # H×W in [0, 1]
    pattern: object  # int index or "overall"


@dataclass
class MatchMatrix:
    scores: np.ndarray  # K×K percent; row = support category, column = query category
    categories: list

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["support\\query"] + list(self.categories))
            for name, row in zip(self.categories, self.scores):
                writer.writerow([name] + [f"{v:.6f}" for v in row])


def overall_attention(attention):
    """Mean over the pattern rows of a z×l attention matrix."""
    return np.asarray(attention, dtype=np.float64).mean(axis=0)


def normalize(values, lo=None, hi=None):
    """Min-max to [0, 1]; a constant input maps to 0.5 everywhere."""
    values = np.asarray(values, dtype=np.float64)
    lo = values.min() if lo is None else lo
    hi = values.max() if hi is None else hi
    if hi - lo <= 0:
        return np.full(values.shape, 0.5)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def render_heatmap(row, grid, target, pattern="overall", value_range=None):
    """Reshape a length-l row to h×w, normalize, upsample to H×W bilinearly."""
    row = np.asarray(row, dtype=np.float64)
    (h, w), (height, width) = grid, target
    if row.shape != (h * w,):
        raise DimensionError(f"row of length {row.size} does not fill a {h}×{w} grid")
    if height < h or width < w:
        raise DimensionError(f"target {height}×{width} is smaller than grid {h}×{w}")
    lo, hi = value_range if value_range is not None else (None, None)
    small = normalize(row.reshape(h, w), lo, hi)
    return Heatmap(row, resize_bilinear(small, height, width), pattern)


def colormap(values):
    """Linear blue -> red: (v, 0, 1 - v)."""
    return np.stack([values, np.zeros_like(values), 1.0 - values])


def overlay(image, heatmap, alpha=ALPHA):
    """Blend the grayscale image with the colored heatmap, clamped to [0, 1]."""
    heat = heatmap.image if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if image.shape[1:] != heat.shape:
        raise DimensionError(f"image {image.shape} and heatmap {heat.shape} differ in size")
    gray = np.broadcast_to(grayscale(image), image.shape)
    return np.clip((1.0 - alpha) * gray + alpha * colormap(heat), 0.0, 1.0)


def matching_matrix(episode, model, dataset):
    """K×K percent scores: entry (k, k') = 100 · s(first query of k', supports of k)."""
    way, shot = episode.way, episode.shot
    supports = model.embed(dataset.load_many(episode.support_ids)).reshape(way, shot, -1)
    first_query = [episode.query_ids[k * (len(episode.query) // way)] for k in range(way)]
    queries = model.embed(dataset.load_many(first_query))
    with no_grad():
        s = score_matrix(queries, average_supports(supports), model.pm).data  # (query k', support k)
    return MatchMatrix(100.0 * s.T, list(episode.categories)), first_query


# -- PGM / PPM ---------------------------------------------------------------

def encode_image(tensor, fmt):
    data = np.asarray(tensor, dtype=np.float64)
    if fmt == "pgm":
        if data.ndim == 3 and data.shape[0] == 1:
            data = data[0]
        if data.ndim != 2:
            raise UsageError(f"pgm needs a single-channel image, got shape {data.shape}")
        magic, (h, w) = b"P5", data.shape
        payload = data
    elif fmt == "ppm":
        if data.ndim != 3 or data.shape[0] != 3:
            raise UsageError(f"ppm needs a 3×H×W image, got shape {data.shape}")
        magic, (h, w) = b"P6", data.shape[1:]
        payload = data.transpose(1, 2, 0)
    else:
        raise UsageError(f"unknown image format {fmt!r}")
    if not np.isfinite(data).all() or data.min() < 0.0 or data.max() > 1.0:
        raise UsageError("image values must lie in [0, 1]; clamp before writing")
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + np.round(255.0 * payload).astype(np.uint8).tobytes()


def write_image(path, tensor, fmt=None):
    fmt = fmt or Path(path).suffix.lstrip(".").lower()
    Path(path).write_bytes(encode_image(tensor, fmt))


def read_image(path):
    """Read a binary PGM/PPM (maxval 255) as floats in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos)
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LoadError(f"{path}: truncated header")
        tokens.append(buf[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise LoadError(f"{path}: only P5/P6 with maxval 255 are supported")
    channels = 1 if magic == b"P5" else 3
    raw = np.frombuffer(buf, dtype=np.uint8, offset=pos)
    if raw.size != w * h * channels:
        raise LoadError(f"{path}: payload has {raw.size} bytes, expected {w * h * channels}")
    data = raw.reshape(h, w, channels).astype(np.float64) / 255.0
    return data[:, :, 0] if channels == 1 else data.transpose(2, 0, 1)


# -- the `explain` directory --------------------------------------------------

def export_explanation(out_dir, episode, model, dataset, global_norm=False, alpha=ALPHA):
    """Write per-pattern and overall overlays for one support and one query
    per category, plus ``matrix.csv``.  Returns the MatchMatrix."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matrix, first_query = matching_matrix(episode, model, dataset)
    first_support = episode.support_ids[::episode.shot]
    for role, ids in (("support", first_support), ("query", first_query)):
        images = dataset.load_many(ids)
        _, attention = model.attend(images)
        feat_h, feat_w = model.backbone.feature_shape(*images.shape[-2:])[1:]
        for k, (image, attn) in enumerate(zip(images, attention)):
            size = image.shape[1:]
            value_range = (attn.min(), attn.max()) if global_norm else None
            for i, row in enumerate(attn):
                heat = render_heatmap(row, (feat_h, feat_w), size, i, value_range)
                write_image(out / f"{role}_{k}_pattern_{i}.ppm", overlay(image, heat, alpha), "ppm")
            heat = render_heatmap(overall_attention(attn), (feat_h, feat_w), size, "overall")
            write_image(out / f"{role}_{k}_overall.ppm", overlay(image, heat, alpha), "ppm")
    matrix.to_csv(out / "matrix.csv")
    return matrix
