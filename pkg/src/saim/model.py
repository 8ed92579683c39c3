"""Parallel two-stream encoder/decoder.

The content stream ``h`` starts as patch embeddings plus fixed positions and
runs masked self-attention under the content mask. The query stream ``g``
starts as the positions alone and cross-attends into ``h`` under the strict
query mask, so a token's prediction never sees its own pixels. A small head
maps the final query stream back to patch pixels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from saim import numerics
from saim.patching import sincos_table
from saim.rng import Xoshiro256

HEAD_KINDS = ("mlp", "linear", "transformer")
LEAK_KINDS = ("none", "query_diag", "content_full")


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    in_chans: int = 3
    embed_dim: int = 64
    depth: int = 2
    n_heads: int = 4
    mlp_ratio: float = 4.0
    head_hidden_dim: int | None = None
    decoder_depth: int | None = None
    share_weights: bool = False
    head: str = "mlp"
    qkv_bias: bool = False
    decoder_reads_previous_layer: bool = False
    # negative-control fixture: deliberately breaks a mask so certification must fail
    leak: str = "none"

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for the sin-cos table")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if not 1 <= self.dec_depth <= self.depth:
            raise ValueError(f"decoder_depth must be in [1, {self.depth}]")
        if self.head not in HEAD_KINDS:
            raise ValueError(f"head must be one of {HEAD_KINDS}")
        if self.leak not in LEAK_KINDS:
            raise ValueError(f"leak must be one of {LEAK_KINDS}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans

    @property
    def dec_depth(self) -> int:
        return self.depth if self.decoder_depth is None else self.decoder_depth

    @property
    def hidden(self) -> int:
        return self.embed_dim if self.head_hidden_dim is None else self.head_hidden_dim

    def to_dict(self) -> dict:
        return asdict(self)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return numerics.layernorm(x, self.weight, self.bias)


class Linear(nn.Linear):
    def forward(self, x):
        y = numerics.matmul(x, self.weight.t())
        return y if self.bias is None else y + self.bias


class Attention(nn.Module):
    """Multi-head attention; ``kv`` may differ from ``x`` (cross-attention)."""

    def __init__(self, dim: int, n_heads: int, qkv_bias: bool = False):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim**-0.5
        self.qkv = Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = Linear(dim, dim)

    def _split(self, t):
        b, n, _ = t.shape
        return t.reshape(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def probs(self, x, kv, mask):
        dim = x.shape[-1]
        w, bias = self.qkv.weight, self.qkv.bias
        q = numerics.matmul(x, w[:dim].t())
        k = numerics.matmul(kv, w[dim : 2 * dim].t())
        v = numerics.matmul(kv, w[2 * dim :].t())
        if bias is not None:
            q, k, v = q + bias[:dim], k + bias[dim : 2 * dim], v + bias[2 * dim :]
        q, k, v = self._split(q), self._split(k), self._split(v)
        logits = numerics.matmul(q, k.transpose(-2, -1)) * self.scale
        return numerics.masked_softmax(logits, mask[:, None]), v

    def forward(self, x, kv, mask):
        p, v = self.probs(x, kv, mask)
        out = numerics.matmul(p, v)
        b, _, n, _ = out.shape
        return self.proj(out.transpose(1, 2).reshape(b, n, -1))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, out_dim: int | None = None):
        super().__init__()
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim if out_dim is None else out_dim)

    def forward(self, x):
        return self.fc2(numerics.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block; cross-attends when ``kv`` is given."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float = 4.0, qkv_bias: bool = False):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, n_heads, qkv_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, mask, kv=None):
        xn = self.norm1(x)
        kvn = xn if kv is None else self.norm1(kv)
        x = x + self.attn(xn, kvn, mask)
        return x + self.mlp(self.norm2(x))


class Head(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.kind = cfg.head
        d = cfg.embed_dim
        if cfg.head == "transformer":
            self.blocks = nn.ModuleList(
                [Block(d, cfg.n_heads, cfg.mlp_ratio, cfg.qkv_bias) for _ in range(2)]
            )
        self.norm = LayerNorm(d)
        if cfg.head == "mlp":
            self.mlp = Mlp(d, cfg.hidden, cfg.patch_dim)
        else:
            self.fc = Linear(d, cfg.patch_dim)

    def forward(self, g, self_mask):
        if self.kind == "transformer":
            # query-stream tokens may read query-stream tokens that come no later
            for blk in self.blocks:
                g = blk(g, self_mask)
        g = self.norm(g)
        return self.mlp(g) if self.kind == "mlp" else self.fc(g)


def _ones_mask(b: int, n: int, device=None) -> torch.Tensor:
    return torch.ones(b, n, n, dtype=torch.bool, device=device)


class SAIM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = Linear(cfg.patch_dim, d)
        pos = torch.from_numpy(sincos_table(cfg.grid, cfg.grid, d)).float()
        self.register_buffer("pos_embed", pos)
        self.enc = nn.ModuleList(
            [Block(d, cfg.n_heads, cfg.mlp_ratio, cfg.qkv_bias) for _ in range(cfg.depth)]
        )
        if cfg.share_weights:
            self.dec = None
        else:
            self.dec = nn.ModuleList(
                [Block(d, cfg.n_heads, cfg.mlp_ratio, cfg.qkv_bias) for _ in range(cfg.dec_depth)]
            )
        self.head = Head(cfg)

    # -- streams -----------------------------------------------------------
    def decoder_blocks(self) -> list[Block]:
        """Decoder blocks aligned to the last ``dec_depth`` encoder layers."""
        if self.dec is not None:
            return list(self.dec)
        return list(self.enc)[self.cfg.depth - self.cfg.dec_depth :]

    def embed(self, patches, pos=None):
        pos = self.pos_embed if pos is None else pos
        return self.patch_embed(patches) + pos

    def _apply_leak(self, content_mask, query_mask):
        if self.cfg.leak == "query_diag":
            eye = torch.eye(query_mask.shape[-1], dtype=torch.bool, device=query_mask.device)
            query_mask = query_mask | eye
        elif self.cfg.leak == "content_full":
            content_mask = torch.ones_like(content_mask)
        return content_mask, query_mask

    def forward(self, patches, content_mask, query_mask, return_streams: bool = False):
        """Predict every patch from the tokens that precede it in its plan.

        ``patches`` is ``(B, L, patch_dim)``; masks are ``(B, L, L)`` bool.
        """
        b, n, _ = patches.shape
        if content_mask.shape != (b, n, n) or query_mask.shape != (b, n, n):
            raise ValueError(
                f"mask shape {tuple(content_mask.shape)} does not match {n} tokens x batch {b}"
            )
        if n != self.pos_embed.shape[0]:
            raise ValueError(f"model expects {self.pos_embed.shape[0]} tokens, got {n}")
        content_mask, query_mask = self._apply_leak(content_mask, query_mask)
        h = self.embed(patches)
        g = self.pos_embed.expand(b, -1, -1)
        streams = [(h, g)]
        offset = self.cfg.depth - self.cfg.dec_depth
        dec = self.decoder_blocks()
        for i, blk in enumerate(self.enc):
            h_prev = h
            h = blk(h, content_mask)
            if i >= offset:
                kv = h_prev if self.cfg.decoder_reads_previous_layer else h
                g = dec[i - offset](g, query_mask, kv=kv)
            streams.append((h, g))
        pred = self.head(g, content_mask)
        if return_streams:
            return pred, streams
        return pred

    def encode(self, patches, mask=None, pos=None):
        """Content stream only; full visibility when ``mask`` is None."""
        b, n, _ = patches.shape
        if mask is None:
            mask = _ones_mask(b, n, patches.device)
        h = self.embed(patches, pos)
        for blk in self.enc:
            h = blk(h, mask)
        return h

    # -- parameter groups ----------------------------------------------------
    def param_groups(self) -> dict[str, int]:
        counts = {"encoder": 0, "decoder": 0, "head": 0}
        for name, p in self.named_parameters():
            counts[group_of(name)] += p.numel()
        return counts


def group_of(name: str) -> str:
    if name.startswith("dec."):
        return "decoder"
    if name.startswith("head."):
        return "head"
    return "encoder"


def init_params(model: nn.Module, rng: Xoshiro256, std: float = 0.02) -> None:
    """Truncated-normal (2 std) linear weights, zero biases, unit LayerNorm gains.

    Parameters are filled in ``named_parameters`` order, so a seed fully
    determines the result.
    """
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".bias"):
                p.zero_()
            elif isinstance(_owner(model, name), LayerNorm):
                p.fill_(1.0)
            else:
                vals = rng.truncated_normals(p.numel(), std)
                p.copy_(torch.from_numpy(vals.reshape(p.shape)).to(p.dtype))


def _owner(model: nn.Module, name: str) -> nn.Module:
    return model.get_submodule(name.rsplit(".", 1)[0]) if "." in name else model


def build_model(cfg: ModelConfig, seed: int | Xoshiro256 = 0) -> SAIM:
    rng = seed if isinstance(seed, Xoshiro256) else Xoshiro256(seed)
    model = SAIM(cfg)
    init_params(model, rng)
    return model


# ---------------------------------------------------------------------------
# encoder export

class ViTEncoder(nn.Module):
    """Mask-free encoder rebuilt from exported SAIM weights."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = Linear(cfg.patch_dim, d)
        pos = torch.from_numpy(sincos_table(cfg.grid, cfg.grid, d)).float()
        self.register_buffer("pos_embed", pos)
        self.enc = nn.ModuleList(
            [Block(d, cfg.n_heads, cfg.mlp_ratio, cfg.qkv_bias) for _ in range(cfg.depth)]
        )

    def forward(self, patches):
        b, n, _ = patches.shape
        mask = _ones_mask(b, n, patches.device)
        h = self.patch_embed(patches) + self.pos_embed
        for blk in self.enc:
            h = blk(h, mask)
        return h


def export_encoder(model: SAIM) -> dict[str, torch.Tensor]:
    """Patch projection, position table and encoder blocks; no decoder or head."""
    return {
        k: v.detach().clone()
        for k, v in model.state_dict().items()
        if k.startswith(("patch_embed.", "enc.")) or k == "pos_embed"
    }


def load_encoder(tensors: dict[str, torch.Tensor], cfg: ModelConfig) -> ViTEncoder:
    enc = ViTEncoder(cfg)
    enc.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    return enc


def encoder_features(model: SAIM | ViTEncoder, patches) -> torch.Tensor:
    """Last-block content features with full visibility, ``(B, L, D)``."""
    with torch.no_grad():
        if isinstance(model, ViTEncoder):
            return model(patches)
        return model.encode(patches)


def masks_to_torch(content: np.ndarray, query: np.ndarray, device=None):
    return (
        torch.as_tensor(content, dtype=torch.bool, device=device),
        torch.as_tensor(query, dtype=torch.bool, device=device),
    )
