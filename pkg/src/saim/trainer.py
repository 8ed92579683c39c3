"""Pretraining loop: AdamW, warmup + cosine schedule, checkpoints, metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from saim import checkpoint as ckpt_io
from saim.config import TrainConfig
from saim.imageio import generate_synthetic, load_raw_batch, random_resize_crop_flip
from saim.model import SAIM, build_model
from saim.numerics import NonFiniteError, backward
from saim.objective import loss as loss_fn
from saim.objective import target
from saim.patching import patchify
from saim.permutation import plans_to_masks, raster_plan, sample_plan
from saim.rng import Xoshiro256

log = logging.getLogger(__name__)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr``, then cosine decay reaching 0 at the last step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warmup, total = cfg.warmup_steps, cfg.total_steps
    if step < warmup:
        return cfg.base_lr * step / warmup
    if total <= warmup:
        return cfg.base_lr
    progress = min(1.0, (step - warmup) / (total - warmup))
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str, p: torch.Tensor) -> bool:
    # biases and LayerNorm gains/offsets are 1-d; the position table is a buffer
    return p.ndim >= 2


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> AdamState:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteError(f"gradient of {name} is not finite at step {state.step}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1, bc2 = 1 - b1**t, 1 - b2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            if cfg.weight_decay and decays(name, p):
                p.mul_(1 - lr * cfg.weight_decay)
            denom = (v / bc2).sqrt_().add_(cfg.adam_eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


def load_dataset(cfg: TrainConfig) -> np.ndarray:
    if cfg.data == "synthetic":
        images, _ = generate_synthetic(
            cfg.n_images, cfg.model.image_size, cfg.data_seed, cfg.model.in_chans
        )
        return images
    images = load_raw_batch(cfg.data)
    if images.shape[1:] != (cfg.model.in_chans, cfg.model.image_size, cfg.model.image_size):
        raise ValueError(f"dataset shape {images.shape} does not match the model config")
    return images


def set_deterministic(on: bool = True) -> None:
    if on:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(on)


class Trainer:
    def __init__(self, cfg: TrainConfig, images: np.ndarray | None = None):
        self.cfg = cfg
        root = Xoshiro256(cfg.seed)
        self.model: SAIM = build_model(cfg.model, root.spawn())
        self.rng = root.spawn()
        self.images = load_dataset(cfg) if images is None else images
        self.adam = AdamState()
        self.history: list[tuple[int, float, float]] = []

    @property
    def step(self) -> int:
        return self.adam.step

    def params(self) -> dict[str, torch.Tensor]:
        return dict(self.model.named_parameters())

    def next_batch(self):
        """Augmented batch and one plan per image, drawn in a fixed order."""
        cfg = self.cfg
        idx = [self.rng.integers(len(self.images)) for _ in range(cfg.batch_size)]
        batch = random_resize_crop_flip(self.images[idx], cfg.augment, self.rng)
        n = cfg.model.n_tokens
        if cfg.order == "raster":
            plans = [raster_plan(n)] * cfg.batch_size
        else:
            plans = [sample_plan(n, self.rng) for _ in range(cfg.batch_size)]
        return batch, plans

    def compute_loss(self, batch: np.ndarray, plans) -> torch.Tensor:
        cfg = self.cfg
        p = cfg.model.patch_size
        tgt = target(batch, cfg.loss, p).values
        patches = torch.from_numpy(np.ascontiguousarray(patchify(batch, p).values))
        content, query = plans_to_masks(plans)
        pred = self.model(patches, torch.from_numpy(content), torch.from_numpy(query))
        return loss_fn(pred, tgt, cfg.loss.kind)

    def train_step(self) -> float:
        step = self.step
        lr = lr_at(step, self.cfg)
        batch, plans = self.next_batch()
        loss = self.compute_loss(batch, plans)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"loss is {value} at step {step}")
        params = self.params()
        grads = backward(loss, params)
        adamw_step(params, grads, self.adam, lr, self.cfg)
        self.history.append((step, lr, value))
        return value

    # -- persistence -----------------------------------------------------------
    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        tensors = {k: v.detach().numpy().copy() for k, v in self.model.state_dict().items()}
        for name in self.params():
            if name in self.adam.m:
                tensors[f"opt.m.{name}"] = self.adam.m[name].numpy().copy()
                tensors[f"opt.v.{name}"] = self.adam.v[name].numpy().copy()
        meta = {
            "kind": "train",
            "config": self.cfg.to_dict(),
            "step": self.step,
            "rng": self.rng.get_state().hex(),
        }
        return ckpt_io.Checkpoint(tensors, meta)

    def save(self, path: str | Path) -> None:
        ckpt_io.save(path, self.to_checkpoint())

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, images: np.ndarray | None = None) -> "Trainer":
        if ck.meta.get("kind") != "train":
            raise ckpt_io.CheckpointError("not a training checkpoint")
        cfg = TrainConfig.from_dict(ck.meta["config"])
        tr = cls(cfg, images)
        load_model_tensors(tr.model, ck.tensors)
        tr.adam.step = int(ck.meta["step"])
        for name in tr.params():
            if f"opt.m.{name}" in ck.tensors:
                tr.adam.m[name] = torch.from_numpy(ck.tensors[f"opt.m.{name}"].copy())
                tr.adam.v[name] = torch.from_numpy(ck.tensors[f"opt.v.{name}"].copy())
        tr.rng.set_state(bytes.fromhex(ck.meta["rng"]))
        return tr

    @classmethod
    def load(cls, path: str | Path, images: np.ndarray | None = None) -> "Trainer":
        return cls.from_checkpoint(ckpt_io.load(path), images)


def load_model_tensors(model: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items() if not k.startswith("opt.")}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ckpt_io.CheckpointError(
            f"checkpoint does not match model: missing {missing}, unexpected {unexpected}"
        )


def model_from_checkpoint(ck: ckpt_io.Checkpoint) -> SAIM:
    if ck.meta.get("kind") != "train":
        raise ckpt_io.CheckpointError("not a training checkpoint")
    cfg = TrainConfig.from_dict(ck.meta["config"])
    model = SAIM(cfg.model)
    load_model_tensors(model, ck.tensors)
    return model


def format_metric(step: int, lr: float, loss: float) -> str:
    return f"{step}\t{lr!r}\t{loss!r}\n"


def pretrain(
    cfg: TrainConfig,
    out_dir: str | Path,
    images: np.ndarray | None = None,
    resume: str | Path | None = None,
) -> Trainer:
    """Run (or resume) pretraining, writing ``metrics.tsv`` and checkpoints to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        trainer = Trainer.load(resume, images)
        mode = "a"
    else:
        trainer = Trainer(cfg, images)
        mode = "w"
    metrics = out / "metrics.tsv"
    with metrics.open(mode, encoding="utf-8") as fh:
        while trainer.step < trainer.cfg.total_steps:
            loss = trainer.train_step()
            step, lr, _ = trainer.history[-1]
            fh.write(format_metric(step, lr, loss))
            if trainer.step % trainer.cfg.checkpoint_every == 0:
                trainer.save(out / f"step_{trainer.step:06d}.ckpt")
            if step % 50 == 0:
                log.info("step %d lr %.3g loss %.4f", step, lr, loss)
    trainer.save(out / "last.ckpt")
    return trainer


def read_metrics(path: str | Path) -> list[tuple[int, float, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        s, lr, loss = line.split("\t")
        rows.append((int(s), float(lr), float(loss)))
    return rows
