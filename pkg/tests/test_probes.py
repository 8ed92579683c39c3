import numpy as np
import pytest
import torch

from saim.config import toy_config
from saim.imageio import AugmentConfig, generate_synthetic, normalize_colors
from saim.model import ModelConfig, build_model
from saim.objective import LossConfig
from saim.patching import patchify
from saim.permutation import sample_plan
from saim.probes import (
    attention_map,
    certify_no_leakage,
    grad_check,
    linear_probe,
    perturbation_deltas,
    permutation_distribution_test,
    reconstruct,
    reconstruction_mse,
    tiny_config,
)
from saim.rng import Xoshiro256
from saim.trainer import Trainer


def small(**kw):
    base = dict(image_size=16, patch_size=4, in_chans=3, embed_dim=16, depth=2, n_heads=4)
    base.update(kw)
    return ModelConfig(**base)


def test_healthy_model_certifies_exactly():
    report = certify_no_leakage(build_model(small(), 0), n_trials=6)
    assert report.passed and report.max_protected_delta == 0.0
    assert report.lines()[0].endswith("verdict=PASS")


@pytest.mark.parametrize("leak", ["query_diag", "content_full"])
def test_negative_controls_fail(leak):
    report = certify_no_leakage(build_model(small(leak=leak), 0), n_trials=6)
    assert not report.passed


def test_extreme_tokens():
    cfg = small()
    m = build_model(cfg, 1)
    rng = Xoshiro256(4)
    plan = sample_plan(cfg.n_tokens, rng)
    x = torch.from_numpy(rng.uniforms(cfg.n_tokens * cfg.patch_dim).reshape(1, cfg.n_tokens, -1)).float()
    last = perturbation_deltas(m, x, plan, int(plan.order[-1]))
    assert np.all(last == 0)
    first = int(plan.order[0])
    d = perturbation_deltas(m, x, plan, first, rng=rng)
    assert d[first] == 0
    assert np.all(np.delete(d, first) > 0)


def test_grad_check_zero_image_finite():
    cfg = tiny_config(depth=1, embed_dim=4)
    res = grad_check(cfg, image=np.zeros((1, 1, 8, 8)))
    assert res.all_finite and res.max_rel_error < 1e-4
    assert res.n_checked == sum(p.numel() for p in build_model(cfg, 0).parameters())


def test_perm_exact_small():
    r4 = permutation_distribution_test(4)
    assert r4.exact and r4.counts.tolist() == [6, 6, 6, 6] and r4.passed
    r2 = permutation_distribution_test(2)
    assert r2.counts.tolist() == [1, 1]
    with pytest.raises(ValueError):
        permutation_distribution_test(1)


def test_perm_sampled_passes():
    r = permutation_distribution_test(8, samples=8000, rng=Xoshiro256(1))
    assert not r.exact and r.counts.sum() == 8000 and r.passed


def _patches(cfg, seed=0):
    img, _ = generate_synthetic(1, cfg.image_size, seed, cfg.in_chans)
    return torch.from_numpy(patchify(normalize_colors(img, AugmentConfig()), cfg.patch_size).values)


def test_attention_map_normalized_and_pgm():
    cfg = small()
    amap = attention_map(build_model(cfg, 2), _patches(cfg), query_token=5)
    assert amap.weights.shape == (4, 4)
    assert np.all(amap.weights >= 0) and abs(amap.weights.sum() - 1) < 1e-6
    pgm = amap.to_pgm()
    assert pgm.startswith(b"P5\n4 4\n255\n") and len(pgm) == len(b"P5\n4 4\n255\n") + 16
    with pytest.raises(IndexError):
        attention_map(build_model(cfg, 2), _patches(cfg), query_token=16)


def test_attention_map_degenerate_input_is_uniform():
    cfg = small()
    m = build_model(cfg, 3)
    patches = torch.ones(1, cfg.n_tokens, cfg.patch_dim) * 0.3
    pos = torch.zeros(cfg.n_tokens, cfg.embed_dim)
    amap = attention_map(m, patches, 7, pos=pos)
    np.testing.assert_allclose(amap.weights, 1 / cfg.n_tokens, atol=1e-7)


def test_reconstruction_untrained_and_trained():
    cfg = toy_config(
        model=small(), batch_size=8, n_images=64, warmup_steps=5, total_steps=80, base_lr=2e-3
    )
    held, _ = generate_synthetic(8, 16, 123)
    held = normalize_colors(held, cfg.augment)
    plans = [sample_plan(16, Xoshiro256(i)) for i in range(8)]
    tr = Trainer(cfg)
    pic = reconstruct(tr.model, held[:1], plans[:1], cfg.loss)
    assert pic.shape == (1, 3, 16, 32) and np.isfinite(pic).all()
    assert pic.min() >= 0 and pic.max() <= 1
    before = reconstruction_mse(tr.model, held, plans, cfg.loss)
    for _ in range(cfg.total_steps):
        tr.train_step()
    assert reconstruction_mse(tr.model, held, plans, cfg.loss) < before


def test_reconstruct_left_half_is_input():
    cfg = small()
    img = normalize_colors(generate_synthetic(1, 16, 0)[0], AugmentConfig())
    pic = reconstruct(build_model(cfg, 0), img, [sample_plan(16, Xoshiro256(0))], LossConfig())
    np.testing.assert_allclose(pic[..., :16], generate_synthetic(1, 16, 0)[0], atol=1e-6)


def test_linear_probe_sanity():
    labels = np.arange(200) % 4
    assert linear_probe(np.eye(4)[labels], labels, 4) == 1.0
    const = np.zeros(200, dtype=np.int64)
    feats = np.random.default_rng(0).standard_normal((200, 5))
    assert linear_probe(feats, const, 4) == 1.0
    with pytest.raises(ValueError):
        linear_probe(feats, labels + 4, 4)
    with pytest.raises(ValueError):
        linear_probe(feats[:10], labels, 4)
