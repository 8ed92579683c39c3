"""Verification and analysis instruments.

* leakage certification by exact forward perturbation
* full-model gradient check against central differences
* distribution of visible-set sizes under random orders
* last-layer attention maps, reconstructions and a toy linear probe
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from saim.imageio import AugmentConfig, denormalize_colors, encode_ppm
from saim.model import SAIM, ModelConfig, build_model, encoder_features
from saim.numerics import backward
from saim.objective import LossConfig, LossKind, loss as loss_fn, smoothed, target
from saim.patching import patch_stats, patchify, unpatchify
from saim.permutation import (
    PermutationPlan,
    plan_from_noise,
    plans_to_masks,
    sample_plan,
    visible_count,
)
from saim.rng import Xoshiro256


# ---------------------------------------------------------------------------
# leakage

@dataclass
class LeakageEntry:
    trial: int
    token: int  # perturbed token
    rank: int  # its position in the prediction order
    max_protected_delta: float  # over tokens ranked <= rank
    max_other_delta: float  # over tokens ranked after it

    def line(self) -> str:
        return (
            f"trial={self.trial}\ttoken={self.token}\trank={self.rank}\t"
            f"protected={self.max_protected_delta!r}\tother={self.max_other_delta!r}"
        )


@dataclass
class LeakageReport:
    depth: int
    n_tokens: int
    tolerance: float
    entries: list[LeakageEntry] = field(default_factory=list)

    @property
    def max_protected_delta(self) -> float:
        return max((e.max_protected_delta for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.max_protected_delta <= self.tolerance for e in self.entries)

    def lines(self) -> list[str]:
        head = (
            f"leakage depth={self.depth} n={self.n_tokens} tol={self.tolerance!r} "
            f"max_protected={self.max_protected_delta!r} verdict={'PASS' if self.passed else 'FAIL'}"
        )
        return [head] + [e.line() for e in self.entries]


def perturbation_deltas(model: SAIM, patches: torch.Tensor, plan: PermutationPlan, token: int,
                        scale: float = 1.0, rng: Xoshiro256 | None = None) -> np.ndarray:
    """Per-token max |prediction change| when ``token``'s pixels are perturbed."""
    content, query = plans_to_masks([plan])
    cm, qm = torch.from_numpy(content), torch.from_numpy(query)
    bumped = patches.clone()
    if rng is None:
        noise = torch.full_like(bumped[0, token], scale)
    else:
        noise = torch.from_numpy(rng.uniforms(bumped.shape[-1]) * 2 - 1).to(bumped.dtype) * scale
    bumped[0, token] += noise
    with torch.no_grad():
        a = model(patches, cm, qm)
        b = model(bumped, cm, qm)
    return (a - b).abs().amax(dim=-1)[0].numpy()


def certify_no_leakage(model: SAIM, n_trials: int = 8, tolerance: float = 0.0,
                       seed: int = 0, include_extremes: bool = True) -> LeakageReport:
    """Check that no prediction depends on tokens at or after it in the order.

    Each trial draws an input and a plan, perturbs one token ``j`` and requires
    every prediction ranked at or before ``j`` to be unchanged within
    ``tolerance``. With ``include_extremes`` the first two trials perturb the
    minimum- and maximum-noise tokens.
    """
    cfg = model.cfg
    rng = Xoshiro256(seed)
    n = cfg.n_tokens
    report = LeakageReport(cfg.depth, n, tolerance)
    dtype = next(model.parameters()).dtype
    for trial in range(n_trials):
        patches = torch.from_numpy(
            rng.uniforms(n * cfg.patch_dim).reshape(1, n, cfg.patch_dim) * 2 - 1
        ).to(dtype)
        plan = sample_plan(n, rng)
        if include_extremes and trial == 0:
            token = int(plan.order[0])
        elif include_extremes and trial == 1:
            token = int(plan.order[-1])
        else:
            token = rng.integers(n)
        deltas = perturbation_deltas(model, patches, plan, token, rng=rng)
        rank = plan.rank
        protected = rank <= rank[token]
        report.entries.append(
            LeakageEntry(
                trial,
                token,
                int(rank[token]),
                float(deltas[protected].max()),
                float(deltas[~protected].max()) if (~protected).any() else 0.0,
            )
        )
    return report


# ---------------------------------------------------------------------------
# gradient check

@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: dict[str, float]
    n_checked: int
    all_finite: bool


def tiny_config(**overrides) -> ModelConfig:
    """D=8, M=2, 4 tokens (8x8 image, 4x4 patches), 2 heads."""
    base = dict(image_size=8, patch_size=4, in_chans=1, embed_dim=8, depth=2, n_heads=2)
    base.update(overrides)
    return ModelConfig(**base)


def grad_check(cfg: ModelConfig | None = None, eps: float = 1e-5, seed: int = 0,
               loss_cfg: LossConfig | None = None, image: np.ndarray | None = None,
               floor: float = 1e-6) -> GradCheckResult:
    """Autograd vs central differences for every parameter element, in float64.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    gradients that are zero up to rounding from dominating the maximum.
    """
    cfg = cfg or tiny_config()
    loss_cfg = loss_cfg or LossConfig(LossKind.MSE_NORM_PIXEL, (3, 1.0))
    rng = Xoshiro256(seed)
    model = build_model(cfg, rng.spawn()).double()
    # larger weights than the 0.02 init so every path carries signal
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.from_numpy(rng.uniforms(p.numel()).reshape(p.shape) - 0.5) * 0.5)
    if image is None:
        image = rng.uniforms(cfg.in_chans * cfg.image_size**2).reshape(
            1, cfg.in_chans, cfg.image_size, cfg.image_size
        )
    image = np.asarray(image, dtype=np.float64)
    tgt = torch.from_numpy(np.ascontiguousarray(target(image, loss_cfg, cfg.patch_size).values))
    patches = torch.from_numpy(np.ascontiguousarray(patchify(image, cfg.patch_size).values))
    plans = [sample_plan(cfg.n_tokens, rng) for _ in range(image.shape[0])]
    content, query = (torch.from_numpy(m) for m in plans_to_masks(plans))

    def f() -> torch.Tensor:
        return loss_fn(model(patches, content, query), tgt, loss_cfg.kind)

    params = dict(model.named_parameters())
    grads = backward(f(), params)
    per_tensor: dict[str, float] = {}
    all_finite = all(bool(torch.isfinite(g).all()) for g in grads.values())
    n_checked = 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            analytic = grads[name].reshape(-1)
            worst = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                a = analytic[i].item()
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
                n_checked += 1
            per_tensor[name] = worst
    return GradCheckResult(max(per_tensor.values()), per_tensor, n_checked, all_finite)


# ---------------------------------------------------------------------------
# permutation distribution

@dataclass
class DistributionResult:
    n: int
    counts: np.ndarray
    exact: bool
    chi2: float
    p_value: float

    @property
    def passed(self) -> bool:
        if self.exact:
            return bool(np.all(self.counts == self.counts[0]))
        return self.p_value > 0.01


def permutation_distribution_test(n: int, samples: int = 100_000, rng: Xoshiro256 | None = None,
                                  token: int = 0, exact: bool | None = None) -> DistributionResult:
    """Histogram of ``visible_count(token)`` against the uniform law on 0..n-1.

    Exact mode enumerates all n! orders (default for n <= 5); otherwise plans
    are sampled and compared with a chi-square test.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if exact is None:
        exact = n <= 5
    counts = np.zeros(n, dtype=np.int64)
    if exact:
        for perm in itertools.permutations(range(n)):
            plan = plan_from_noise((np.asarray(perm, dtype=np.float64) + 0.5) / n)
            counts[visible_count(plan, token)] += 1
    else:
        rng = rng or Xoshiro256(0)
        for _ in range(samples):
            counts[visible_count(sample_plan(n, rng), token)] += 1
    chi2, p = stats.chisquare(counts)
    return DistributionResult(n, counts, exact, float(chi2), float(p))


# ---------------------------------------------------------------------------
# attention maps

@dataclass
class AttentionMap:
    weights: np.ndarray  # (grid_h, grid_w)
    query_token: int

    def to_pgm(self) -> bytes:
        w = self.weights
        peak = w.max()
        scaled = w / peak if peak > 0 else w
        return encode_ppm(scaled[None].astype(np.float32))


def attention_map(model: SAIM, patches: torch.Tensor, query_token: int,
                  pos: torch.Tensor | None = None) -> AttentionMap:
    """Head-averaged last-layer attention of one query over all keys, mask-free."""
    cfg = model.cfg
    n = patches.shape[1]
    if not 0 <= query_token < n:
        raise IndexError(f"query token {query_token} out of range for {n} tokens")
    mask = torch.ones(patches.shape[0], n, n, dtype=torch.bool)
    with torch.no_grad():
        h = model.embed(patches, pos)
        for blk in list(model.enc)[:-1]:
            h = blk(h, mask)
        last = model.enc[-1]
        hn = last.norm1(h)
        probs, _ = last.attn.probs(hn, hn, mask)
    w = probs[0, :, query_token, :].mean(dim=0).double().numpy()
    return AttentionMap(w.reshape(cfg.grid, cfg.grid), query_token)


# ---------------------------------------------------------------------------
# reconstruction

def reconstruct(model: SAIM, image: np.ndarray, plans: list[PermutationPlan],
                loss_cfg: LossConfig, augment: AugmentConfig | None = None) -> np.ndarray:
    """Side-by-side ``original | prediction`` in [0, 1], shape ``(B, C, H, 2W)``.

    ``image`` is color-normalized model input. Under normalized-pixel loss the
    per-patch mean/std of the (smoothed) target is re-applied to the prediction.
    """
    augment = augment or AugmentConfig()
    p = model.cfg.patch_size
    pred = predict(model, image, plans)
    if LossKind(loss_cfg.kind) is LossKind.MSE_NORM_PIXEL:
        mean, std = patch_stats(patchify(smoothed(image, loss_cfg), p))
        pred = pred * std + mean
    seq = patchify(image, p)
    recon = unpatchify(seq.with_values(pred.astype(np.float32)))
    both = np.concatenate([image, recon], axis=-1)
    return np.clip(denormalize_colors(both, augment), 0.0, 1.0)


def predict(model: SAIM, image: np.ndarray, plans: list[PermutationPlan]) -> np.ndarray:
    p = model.cfg.patch_size
    patches = torch.from_numpy(np.ascontiguousarray(patchify(image, p).values))
    content, query = plans_to_masks(plans)
    with torch.no_grad():
        out = model(patches.to(next(model.parameters()).dtype),
                    torch.from_numpy(content), torch.from_numpy(query))
    return out.double().numpy()


def reconstruction_mse(model: SAIM, image: np.ndarray, plans, loss_cfg: LossConfig) -> float:
    """MSE of predictions against the training target of ``image``."""
    tgt = target(image, loss_cfg, model.cfg.patch_size).values
    return float(np.mean((predict(model, image, plans) - tgt) ** 2))


# ---------------------------------------------------------------------------
# linear probe

def pooled_features(model, image: np.ndarray, batch: int = 200) -> np.ndarray:
    """Mean-pooled last-block encoder features, ``(N, D)``."""
    p = model.cfg.patch_size
    out = []
    for i in range(0, len(image), batch):
        patches = torch.from_numpy(np.ascontiguousarray(patchify(image[i : i + batch], p).values))
        out.append(encoder_features(model, patches).mean(dim=1).double().numpy())
    return np.concatenate(out)


def linear_probe(features: np.ndarray, labels: np.ndarray, n_classes: int,
                 train_frac: float = 0.75, steps: int = 500, lr: float = 0.5,
                 weight_decay: float = 1e-4, seed: int = 0) -> float:
    """Held-out accuracy of a multinomial logistic regression on frozen features.

    Features are standardized with training-split statistics, then the
    classifier is fit by full-batch gradient descent.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(features) != len(labels):
        raise ValueError("features and labels differ in length")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    rng = Xoshiro256(seed)
    order = list(range(len(labels)))
    for i in range(len(order) - 1, 0, -1):  # Fisher-Yates
        j = rng.integers(i + 1)
        order[i], order[j] = order[j], order[i]
    n_train = int(round(train_frac * len(order)))
    tr, te = np.asarray(order[:n_train]), np.asarray(order[n_train:])
    mu = features[tr].mean(axis=0)
    sd = features[tr].std(axis=0) + 1e-8
    x = torch.from_numpy((features - mu) / sd)
    y = torch.from_numpy(labels)
    w = torch.zeros(x.shape[1], n_classes, dtype=torch.float64, requires_grad=True)
    b = torch.zeros(n_classes, dtype=torch.float64, requires_grad=True)
    xtr, ytr = x[tr], y[tr]
    for _ in range(steps):
        logits = xtr @ w + b
        obj = torch.nn.functional.cross_entropy(logits, ytr) + weight_decay * (w * w).sum()
        gw, gb = torch.autograd.grad(obj, (w, b))
        with torch.no_grad():
            w -= lr * gw
            b -= lr * gb
    with torch.no_grad():
        pred = (x[te] @ w + b).argmax(dim=1)
    return float((pred == y[te]).double().mean())
