"""Regression targets and reconstruction losses."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from saim.patching import PatchSequence, gaussian_kernel, normalize_patch, patchify, smooth


class LossKind(str, Enum):
    MSE = "mse"
    MSE_NORM_PIXEL = "mse-norm"
    L1 = "l1"


@dataclass
class LossConfig:
    kind: LossKind = LossKind.MSE_NORM_PIXEL
    # (kernel size, sigma); None disables target smoothing
    smoothing: tuple[int, float] | None = (9, 1.0)

    def __post_init__(self):
        self.kind = LossKind(self.kind)
        if self.smoothing is not None:
            size, sigma = self.smoothing
            if size < 1 or size % 2 == 0:
                raise ValueError(f"smoothing kernel size must be odd, got {size}")
            if sigma <= 0:
                raise ValueError("smoothing sigma must be positive")
            self.smoothing = (int(size), float(sigma))


def smoothed(img: np.ndarray, cfg: LossConfig) -> np.ndarray:
    if cfg.smoothing is None:
        return img
    return smooth(img, gaussian_kernel(*cfg.smoothing))


def target(img: np.ndarray, cfg: LossConfig, patch_size: int) -> PatchSequence:
    """smooth -> patchify -> (optionally) per-patch normalize."""
    seq = patchify(smoothed(img, cfg), patch_size)
    if cfg.kind is LossKind.MSE_NORM_PIXEL:
        seq = normalize_patch(seq)
    return seq


def loss(pred: torch.Tensor, tgt, kind: LossKind | str = LossKind.MSE) -> torch.Tensor:
    """Mean over every token and patch element."""
    tgt = torch.as_tensor(tgt, dtype=pred.dtype, device=pred.device)
    if pred.shape != tgt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} vs target {tuple(tgt.shape)}")
    diff = pred - tgt
    if LossKind(kind) is LossKind.L1:
        return diff.abs().mean()
    return (diff * diff).mean()
