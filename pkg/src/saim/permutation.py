"""Prediction-order sampling and the content/query attention masks.

A plan draws one uniform noise value per token. The prediction order is the
ascending sort of the noise, with ties broken by token index, and every mask
comparison uses the same ``(noise, index)`` key so masks and order agree even
when values tie.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from saim.rng import Xoshiro256


@dataclass(frozen=True)
class PermutationPlan:
    noise: np.ndarray  # (n,) float64 in [0, 1)
    order: np.ndarray  # (n,) token indices, first-predicted first
    content_mask: np.ndarray  # (n, n) bool, row attends to column
    query_mask: np.ndarray  # (n, n) bool

    @property
    def n(self) -> int:
        return len(self.noise)

    @property
    def rank(self) -> np.ndarray:
        rank = np.empty(self.n, dtype=np.int64)
        rank[self.order] = np.arange(self.n)
        return rank


def plan_from_noise(noise) -> PermutationPlan:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 1 or len(noise) == 0:
        raise ValueError("noise must be a non-empty 1-d array")
    order = np.argsort(noise, kind="stable")
    rank = np.empty(len(noise), dtype=np.int64)
    rank[order] = np.arange(len(noise))
    content = rank[:, None] >= rank[None, :]
    query = rank[:, None] > rank[None, :]
    return PermutationPlan(noise, order, content, query)


def sample_plan(n: int, rng: Xoshiro256) -> PermutationPlan:
    if n < 1:
        raise ValueError("a plan needs at least one token")
    return plan_from_noise(rng.uniforms(n))


def raster_plan(n: int) -> PermutationPlan:
    if n < 1:
        raise ValueError("a plan needs at least one token")
    return plan_from_noise(np.arange(n, dtype=np.float64) / n)


def visible_count(plan: PermutationPlan, token: int) -> int:
    """How many tokens precede ``token`` in the prediction order."""
    if not 0 <= token < plan.n:
        raise IndexError(f"token {token} out of range for n={plan.n}")
    return int(plan.rank[token])


def verify_plan(plan: PermutationPlan) -> list[str]:
    """Check every structural invariant of a plan; returns violations (empty if ok)."""
    out: list[str] = []
    n = len(plan.noise)
    r = np.asarray(plan.noise)
    content = np.asarray(plan.content_mask, dtype=bool)
    query = np.asarray(plan.query_mask, dtype=bool)
    if content.shape != (n, n) or query.shape != (n, n):
        return [f"mask shape: expected {(n, n)}, got {content.shape} / {query.shape}"]
    if np.any((r < 0) | (r >= 1)):
        out.append("noise outside [0, 1)")
    order = np.asarray(plan.order)
    if sorted(order.tolist()) != list(range(n)):
        out.append("order is not a permutation")
        return out
    if not np.array_equal(order, np.argsort(r, kind="stable")):
        out.append("order does not sort the noise")
    idx = np.arange(n)
    ge = (r[:, None] > r[None, :]) | ((r[:, None] == r[None, :]) & (idx[:, None] >= idx[None, :]))
    gt = ge & ~np.eye(n, dtype=bool)
    if not np.array_equal(content, ge):
        out.append("content comparator: content_mask[i][j] != key_i >= key_j")
    if not np.array_equal(query, gt):
        out.append("query comparator: query_mask[i][j] != key_i > key_j")
    if not content.diagonal().all():
        out.append("content diagonal not all 1")
    if query.diagonal().any():
        out.append("query diagonal not all 0")
    if content.sum() != n * (n + 1) // 2:
        out.append(f"content popcount {int(content.sum())} != {n * (n + 1) // 2}")
    if query.sum() != n * (n - 1) // 2:
        out.append(f"query popcount {int(query.sum())} != {n * (n - 1) // 2}")
    pc = content[np.ix_(order, order)]
    pq = query[np.ix_(order, order)]
    if not np.array_equal(pc, np.tril(np.ones((n, n), dtype=bool))):
        out.append("permuted content mask not lower triangular")
    if not np.array_equal(pq, np.tril(np.ones((n, n), dtype=bool), -1)):
        out.append("permuted query mask not strictly lower triangular")
    return out


def plans_to_masks(plans: list[PermutationPlan]) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-image plans into ``(B, n, n)`` content and query masks."""
    return (
        np.stack([p.content_mask for p in plans]),
        np.stack([p.query_mask for p in plans]),
    )
