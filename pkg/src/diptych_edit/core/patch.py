"""Patch tokenization of pixel grids.

Works on numpy arrays and torch tensors alike; a leading batch dimension is
optional. Tokens are laid out row-major over the patch grid and each token
flattens its ``p x p x C`` block in (row, col, channel) order.
"""

from __future__ import annotations

import numpy as np
import torch


class DimensionMismatch(ValueError):
    pass


def _permute(x, axes):
    return x.permute(*axes) if isinstance(x, torch.Tensor) else x.transpose(axes)


def patchify(image, patch_size: int):
    """(…, H, W, C) -> (…, (H/p)·(W/p), p·p·C)."""
    *lead, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionMismatch(f"image {h}x{w} not divisible by patch size {p}")
    n = len(lead)
    x = image.reshape(*lead, h // p, p, w // p, p, c)
    x = _permute(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(tokens, patch_size: int, height: int, width: int, channels: int = 3):
    """Inverse of :func:`patchify`."""
    *lead, count, dim = tokens.shape
    p = patch_size
    if height % p or width % p or count != (height // p) * (width // p) or dim != p * p * channels:
        raise DimensionMismatch(
            f"{count} tokens of dim {dim} do not tile a {height}x{width}x{channels} image with patch {p}"
        )
    n = len(lead)
    x = tokens.reshape(*lead, height // p, width // p, p, p, channels)
    x = _permute(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return x.reshape(*lead, height, width, channels)


def to_latent(image):
    """Pixels in [0, 1] -> latent values in [-1, 1]."""
    return image * 2.0 - 1.0


def to_pixels(latent):
    return (latent + 1.0) / 2.0


def image_positions(rows: int, cols: int) -> np.ndarray:
    """(text index, row, col) coordinates of a row-major patch grid."""
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([np.zeros(rows * cols, dtype=np.int64), r.ravel(), c.ravel()], axis=1)


def text_positions(count: int) -> np.ndarray:
    """Text tokens sit on the first axis at 1..count, disjoint from image tokens (index 0)."""
    pos = np.zeros((count, 3), dtype=np.int64)
    pos[:, 0] = np.arange(1, count + 1)
    return pos
