"""Tensor primitives used by the model, backed by torch autograd.

Tensors are ``torch.Tensor`` values. float32 is the default width; the
verification suites switch to float64. ``backward`` is a thin wrapper around
``torch.autograd.grad`` whose contract is checked against central differences
in the test suite.
"""

from __future__ import annotations

import math
from typing import Iterable, Mapping

import torch

MASK_SENTINEL = -1e9
LN_EPS = 1e-6


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"{what} produced non-finite values")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1:
        raise ValueError("matmul needs at least 1-d operands")
    inner_b = b.shape[-2] if b.dim() > 1 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return _check_finite(torch.matmul(a, b), "matmul")


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax over visible entries; masked entries get exactly 0.

    ``mask`` is boolean (True = visible) and broadcastable to ``logits``.
    A row with no visible entries returns all zeros instead of NaN.
    """
    mask = mask.to(torch.bool)
    filled = logits.masked_fill(~mask, MASK_SENTINEL)
    probs = torch.softmax(filled, dim=dim)
    # explicit zeroing makes empty rows 0 and keeps masked entries exactly 0
    return probs * mask.to(probs.dtype)


def layernorm(
    x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = LN_EPS
) -> torch.Tensor:
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise ValueError("gamma/beta must match the last dimension")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gamma + beta


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact erf form
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def backward(
    loss: torch.Tensor, params: Mapping[str, torch.Tensor] | Iterable[torch.Tensor]
) -> dict[str, torch.Tensor] | list[torch.Tensor]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Returns a dict when given a mapping, otherwise a list in input order.
    Parameters the loss does not reach get zero gradients.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if isinstance(params, Mapping):
        names = list(params.keys())
        tensors = [params[k] for k in names]
    else:
        names = None
        tensors = list(params)
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    if names is None:
        return grads
    return dict(zip(names, grads))
