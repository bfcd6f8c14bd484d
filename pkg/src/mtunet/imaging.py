"""Plain-numpy image helpers shared by augmentation, synthesis and export."""

from __future__ import annotations

import numpy as np


def resize_bilinear(array, height, width):
    """Corner-aligned bilinear resize of the last two axes."""
    array = np.asarray(array, dtype=np.float64)
    h, w = array.shape[-2:]
    ys = np.linspace(0.0, h - 1, height) if height > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1, width) if width > 1 else np.zeros(1)
    return sample_bilinear(array, ys[:, None] * np.ones((1, width)), np.ones((height, 1)) * xs[None, :])


def sample_bilinear(array, ys, xs):
    """Sample the last two axes at fractional (ys, xs), clamping to the edge."""
    h, w = array.shape[-2:]
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    top = array[..., y0, x0] * (1 - fx) + array[..., y0, x1] * fx
    bottom = array[..., y1, x0] * (1 - fx) + array[..., y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def grayscale(image):
    """Luma of a 3×H×W image, shape H×W."""
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
