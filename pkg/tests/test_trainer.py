import math

import numpy as np
import pytest
import torch

from saim.config import toy_config
from saim.model import ModelConfig
from saim.numerics import NonFiniteError
from saim.trainer import AdamState, Trainer, adamw_step, lr_at, pretrain, read_metrics


def quick(**kw):
    model = ModelConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, n_heads=2)
    base = dict(model=model, batch_size=4, n_images=32, warmup_steps=2, total_steps=10, checkpoint_every=5)
    base.update(kw)
    return toy_config(**base)


def test_lr_schedule_examples():
    cfg = toy_config(base_lr=2e-4, warmup_steps=20, total_steps=300)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(20, cfg) == 2e-4
    assert lr_at(300, cfg) == 0.0
    assert lr_at(160, cfg) == pytest.approx(1e-4, abs=1e-18)
    assert lr_at(10, cfg) == pytest.approx(1e-4)
    # continuity at the boundary
    assert abs(lr_at(20, cfg) - lr_at(19, cfg)) < 2e-4 / 20 + 1e-18
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_lr_monotone_in_decay():
    cfg = toy_config()
    lrs = [lr_at(s, cfg) for s in range(cfg.warmup_steps, cfg.total_steps + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adamw_zero_grad_no_decay_is_identity():
    w = torch.randn(3, 3)
    before = w.clone()
    adamw_step({"w": w}, {"w": torch.zeros(3, 3)}, AdamState(), 0.1, toy_config(weight_decay=0.0))
    assert torch.equal(w, before)


def test_adamw_first_step_scalar():
    w = torch.ones(1, 1)
    adamw_step({"w": w}, {"w": torch.ones(1, 1)}, AdamState(), 0.1, toy_config(weight_decay=0.0))
    assert w.item() == pytest.approx(0.9, abs=1e-6)


def test_adamw_decoupled_decay():
    w, b = torch.ones(2, 2), torch.ones(2)
    adamw_step({"w": w, "b": b}, {"w": torch.zeros(2, 2), "b": torch.zeros(2)}, AdamState(), 0.1,
               toy_config(weight_decay=0.05))
    assert torch.allclose(w, torch.full((2, 2), 0.995))
    assert torch.equal(b, torch.ones(2))  # 1-d tensors are not decayed


def test_adamw_nan_names_tensor():
    with pytest.raises(NonFiniteError, match="enc.0.attn.qkv.weight"):
        adamw_step({"enc.0.attn.qkv.weight": torch.ones(2)},
                   {"enc.0.attn.qkv.weight": torch.tensor([1.0, math.nan])}, AdamState(), 0.1, toy_config())


def test_same_seed_same_losses():
    ta, tb = Trainer(quick()), Trainer(quick())
    la = [ta.train_step() for _ in range(6)]
    lb = [tb.train_step() for _ in range(6)]
    assert la == lb
    assert [Trainer(quick(seed=1)).train_step()] != la[:1]


def test_step_does_not_touch_position_table():
    tr = Trainer(quick())
    before = tr.model.pos_embed.clone()
    tr.train_step()
    assert torch.equal(before, tr.model.pos_embed)


def test_resume_reproduces_next_step(tmp_path):
    ref = Trainer(quick())
    ref_losses = [ref.train_step() for _ in range(6)]
    tr = Trainer(quick())
    for _ in range(5):
        tr.train_step()
    tr.save(tmp_path / "s5.ckpt")
    resumed = Trainer.load(tmp_path / "s5.ckpt")
    assert resumed.step == 5
    assert resumed.train_step() == ref_losses[5]
    for (n, p), (_, q) in zip(ref.model.named_parameters(), resumed.model.named_parameters()):
        assert torch.equal(p, q), n


def test_save_load_save_byte_identical(tmp_path):
    tr = Trainer(quick())
    tr.train_step()
    tr.save(tmp_path / "a.ckpt")
    Trainer.load(tmp_path / "a.ckpt").save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_pretrain_writes_metrics_and_checkpoints(tmp_path):
    cfg = quick()
    pretrain(cfg, tmp_path / "run")
    rows = read_metrics(tmp_path / "run" / "metrics.tsv")
    assert [r[0] for r in rows] == list(range(10))
    assert rows[0][1] == 0.0
    for name in ("step_000005.ckpt", "step_000010.ckpt", "last.ckpt"):
        assert (tmp_path / "run" / name).exists()
    # resuming midway completes the log identically
    (tmp_path / "part").mkdir()
    part = tmp_path / "part"
    short = Trainer(cfg)
    with (part / "metrics.tsv").open("w") as fh:
        for _ in range(5):
            loss = short.train_step()
            s, lr, _ = short.history[-1]
            fh.write(f"{s}\t{lr!r}\t{loss!r}\n")
    short.save(part / "mid.ckpt")
    pretrain(cfg, part, resume=part / "mid.ckpt")
    assert (part / "metrics.tsv").read_bytes() == (tmp_path / "run" / "metrics.tsv").read_bytes()


def test_frozen_batch_loss_strictly_decreases_and_both_streams_learn():
    cfg = toy_config(warmup_steps=0)
    tr = Trainer(cfg)
    batch, plans = tr.next_batch()
    params = tr.params()
    losses = []
    for step in range(20):
        loss = tr.compute_loss(batch, plans)
        losses.append(loss.item())
        grads = dict(zip(params, torch.autograd.grad(loss, list(params.values()))))
        if step == 0:
            for prefix in ("patch_embed.", "enc.", "dec.", "head."):
                assert any(g.abs().max() > 0 for n, g in grads.items() if n.startswith(prefix)), prefix
        adamw_step(params, grads, tr.adam, cfg.base_lr, cfg)
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_raster_order_trains():
    tr = Trainer(quick(order="raster"))
    assert np.isfinite(tr.train_step())
