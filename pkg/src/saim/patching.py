"""Patch serialization, sin-cos position tables and Gaussian target smoothing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from einops import rearrange
from scipy import ndimage

PATCH_NORM_EPS = 1e-6


@dataclass
class PatchSequence:
    """Per-patch pixel vectors, shape ``(batch, n_tokens, patch_size**2 * channels)``.

    ``values`` may be a numpy array or a torch tensor.
    """

    values: np.ndarray | torch.Tensor
    grid_h: int
    grid_w: int
    patch_size: int
    channels: int

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def with_values(self, values) -> "PatchSequence":
        return PatchSequence(values, self.grid_h, self.grid_w, self.patch_size, self.channels)


def patchify(img, patch_size: int) -> PatchSequence:
    """Split ``(N, C, H, W)`` images into grid-row-major patches.

    Inside a patch the layout is (row, col, channel) with channels last.
    """
    n, c, h, w = img.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    values = rearrange(img, "n c (gh p) (gw q) -> n (gh gw) (p q c)", p=patch_size, q=patch_size)
    return PatchSequence(values, h // patch_size, w // patch_size, patch_size, c)


def unpatchify(seq: PatchSequence):
    return rearrange(
        seq.values,
        "n (gh gw) (p q c) -> n c (gh p) (gw q)",
        gh=seq.grid_h,
        gw=seq.grid_w,
        p=seq.patch_size,
        q=seq.patch_size,
        c=seq.channels,
    )


def sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_table(grid_h: int, grid_w: int, embed_dim: int) -> np.ndarray:
    """Fixed 2D sin-cos table, ``(grid_h*grid_w, embed_dim)`` float64.

    The first half encodes the row index and the second half the column index.
    """
    if embed_dim % 4:
        raise ValueError(f"embed_dim must be divisible by 4, got {embed_dim}")
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    half = embed_dim // 2
    return np.concatenate(
        [sincos_1d(half, rows.reshape(-1)), sincos_1d(half, cols.reshape(-1))], axis=1
    )


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    c = size // 2
    ax = np.arange(size, dtype=np.float64) - c
    w = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return w / w.sum()


def smooth(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2D convolution with reflect padding (edge sample not repeated)."""
    img = np.asarray(img)
    pad = kernel.shape[0] // 2
    if pad >= img.shape[-1] or pad >= img.shape[-2]:
        raise ValueError(f"kernel of size {kernel.shape[0]} does not fit image {img.shape[-2:]}")
    # scipy's "mirror" is the reflect-without-edge convention
    out = ndimage.correlate(
        img.astype(np.float64), kernel[None, None], mode="mirror"
    )
    return out.astype(img.dtype)


def normalize_patch(seq: PatchSequence) -> PatchSequence:
    v = seq.values
    if isinstance(v, torch.Tensor):
        mean = v.mean(dim=-1, keepdim=True)
        var = v.var(dim=-1, unbiased=False, keepdim=True)
        return seq.with_values((v - mean) / torch.sqrt(var + PATCH_NORM_EPS))
    mean = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    return seq.with_values(((v - mean) / np.sqrt(var + PATCH_NORM_EPS)).astype(v.dtype))


def patch_stats(seq: PatchSequence):
    """Per-patch mean and std as used by ``normalize_patch``."""
    v = np.asarray(seq.values, dtype=np.float64)
    mean = v.mean(axis=-1, keepdims=True)
    std = np.sqrt(v.var(axis=-1, keepdims=True) + PATCH_NORM_EPS)
    return mean, std
