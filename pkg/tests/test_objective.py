import numpy as np
import pytest
import torch

from saim.objective import LossConfig, LossKind, loss, smoothed, target
from saim.patching import patchify


def test_defaults_are_normalized_pixels_with_smoothing():
    cfg = LossConfig()
    assert cfg.kind is LossKind.MSE_NORM_PIXEL and cfg.smoothing == (9, 1.0)


def test_rejects_even_kernel():
    with pytest.raises(ValueError):
        LossConfig(smoothing=(4, 1.0))


def test_plain_target_is_patchify():
    img = np.random.default_rng(0).random((2, 3, 16, 16)).astype(np.float32)
    t = target(img, LossConfig(LossKind.MSE, None), 4)
    np.testing.assert_array_equal(t.values, patchify(img, 4).values)


def test_smoothing_leaves_constant_image():
    img = np.full((1, 3, 16, 16), 0.37, dtype=np.float64)
    np.testing.assert_allclose(smoothed(img, LossConfig()), img, atol=1e-15)


def test_normalized_target_patches_have_zero_mean():
    img = np.random.default_rng(1).random((2, 3, 32, 32)).astype(np.float32)
    t = target(img, LossConfig(), 4).values
    assert np.abs(t.mean(axis=-1)).max() < 1e-6
    np.testing.assert_allclose(t.var(axis=-1), 1.0, atol=1e-3)


def test_pipeline_order_smooth_then_normalize():
    img = np.random.default_rng(2).random((1, 1, 16, 16))
    cfg = LossConfig()
    v = patchify(smoothed(img, cfg), 4).values
    expect = (v - v.mean(-1, keepdims=True)) / np.sqrt(v.var(-1, keepdims=True) + 1e-6)
    np.testing.assert_allclose(target(img, cfg, 4).values, expect, atol=1e-12)


@pytest.mark.parametrize("kind,expected", [(LossKind.MSE, 4.0), (LossKind.MSE_NORM_PIXEL, 4.0), (LossKind.L1, 2.0)])
def test_constant_offset(kind, expected):
    tgt = torch.randn(2, 5, 6)
    assert loss(tgt + 2, tgt, kind).item() == pytest.approx(expected)
    assert loss(tgt, tgt, kind).item() == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        loss(torch.zeros(1, 4, 3), torch.zeros(1, 4, 4))


def test_mse_gradient_matches_formula():
    pred = torch.randn(2, 3, 4, dtype=torch.float64, requires_grad=True)
    tgt = torch.randn(2, 3, 4, dtype=torch.float64)
    (g,) = torch.autograd.grad(loss(pred, tgt), pred)
    torch.testing.assert_close(g, 2 * (pred - tgt).detach() / pred.numel())
    # and by central differences on one element
    h = 1e-6
    p = pred.detach().clone()
    p[1, 2, 3] += h
    up = loss(p, tgt).item()
    p[1, 2, 3] -= 2 * h
    down = loss(p, tgt).item()
    assert (up - down) / (2 * h) == pytest.approx(g[1, 2, 3].item(), rel=1e-6)
