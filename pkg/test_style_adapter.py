"""Disentangler codes, training guards and latent style optimization."""

import copy
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import torch

from checkpoints import load_checkpoint, save_checkpoint
from errors import ConfigError, CorpusTooSmallError, ModelNotTrainedError
from imaging import EmotionReference, to_rgb
from style_adapter import (MIN_CORPUS, STYLE_DIM, DisentanglerTrainConfig, Disentangler, StyleObjective, decode,
                           encode_content, encode_style, optimize_style, psnr, reconstruct, train_disentangler)
from synthetic_corpus import shape_images


@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(0)
    model = Disentangler(image_size=16, content_channels=16, width=8, mlp_dim=32)
    model.eval()
    model.mark_trained()
    return model


def test_code_shapes(small_model, random_image):
    c = encode_content(small_model, random_image)
    s = encode_style(small_model, random_image)
    assert c.shape == (1, 16, 4, 4)
    assert s.shape == (1, STYLE_DIM)
    out = decode(small_model, c, s)
    assert out.shape == (1, 3, 16, 16)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_reconstruct_keeps_resolution(small_model, random_image):
    out = reconstruct(small_model, random_image)
    assert (out.height, out.width) == (random_image.height, random_image.width)


def test_untrained_model_rejected(random_image):
    with pytest.raises(ModelNotTrainedError):
        encode_style(Disentangler(image_size=16, content_channels=16, width=8), random_image)


def test_image_size_checked():
    with pytest.raises(ConfigError):
        Disentangler(image_size=18)
    with pytest.raises(ConfigError):
        DisentanglerTrainConfig(val_fraction=1.0)


def test_psnr_of_identical_tensors():
    x = torch.rand(2, 3, 8, 8)
    np.testing.assert_allclose(psnr(x, x).numpy(), 120.0, rtol=1e-5)
    assert float(psnr(x, 1.0 - x)[0]) < 20.0


def test_small_corpus_rejected(shapes):
    with pytest.raises(CorpusTooSmallError):
        train_disentangler(shapes, DisentanglerTrainConfig(epochs=1, image_size=16))


def test_training_reports_metrics():
    images = shape_images(MIN_CORPUS, size=16, seed=11)
    model = train_disentangler(images, DisentanglerTrainConfig(epochs=1, batch_size=50, image_size=16))
    m = model.metrics
    assert model.trained
    assert m["n_train"] + m["n_val"] == MIN_CORPUS and m["n_val"] == 10
    assert len(m["loss_trace"]) == 1
    assert np.isfinite(m["val_psnr"])
    assert 0.0 <= m["content_consistency"] <= m["content_consistency_max"]
    assert m["style_swap_fid"] >= 0.0


def test_checkpoint_round_trip(tmp_path, small_model, random_image):
    path = save_checkpoint(small_model, tmp_path / "disentangler.pt")
    loaded, _ = load_checkpoint(path, expected_kind="disentangler")
    torch.testing.assert_close(encode_style(loaded, random_image), encode_style(small_model, random_image))


def test_optimize_style(small_model, shapes, oracle):
    img = shapes[0]
    result = optimize_style(img, EmotionReference(0.2, 0.8), oracle, small_model, w1=1.0, w2=1.0, iters=12)
    assert result.method == "style"
    assert (result.adapted.height, result.adapted.width) == (img.height, img.width)
    assert result.loss_trace[result.best_iteration] == min(result.loss_trace)
    assert result.loss_trace[result.best_iteration] <= result.loss_trace[0]
    sidecar = result.to_sidecar()
    assert len(sidecar["params"]["style"]) == STYLE_DIM
    assert sidecar["style_shift_norm"] == pytest.approx(result.params_or_code.shift_norm)
    assert all(p.requires_grad for p in small_model.parameters())


def test_zero_iterations_rejected(small_model, shapes, oracle):
    with pytest.raises(ConfigError):
        optimize_style(shapes[0], EmotionReference(), oracle, small_model, 1.0, 1.0, iters=0)
    with pytest.raises(ConfigError):
        optimize_style(shapes[0], EmotionReference(), oracle, small_model, -1.0, 1.0, iters=5)


def test_concurrent_style_jobs_share_the_model(small_model, shapes, oracle):
    for p in small_model.parameters():
        p.grad = None
    ref = EmotionReference(0.3, 0.2)
    images = shapes[:4]
    sequential = [optimize_style(img, ref, oracle, small_model, 1.0, 1.0, iters=6) for img in images]
    with ThreadPoolExecutor(max_workers=4) as pool:
        parallel = list(pool.map(lambda img: optimize_style(img, ref, oracle, small_model, 1.0, 1.0, iters=6),
                                 images))
    for a, b in zip(sequential, parallel):
        np.testing.assert_allclose(a.loss_trace, b.loss_trace, rtol=1e-6)
        np.testing.assert_allclose(a.adapted.pixels, b.adapted.pixels, atol=1e-6)
    assert all(p.grad is None and p.requires_grad for p in small_model.parameters())


def test_style_objective_matches_central_differences(small_model, shapes, oracle):
    model = copy.deepcopy(small_model).double()
    gen = torch.Generator().manual_seed(2)
    for img in shapes[:10]:
        x = to_rgb(img).to_tensor(torch.float64)
        ref = EmotionReference(*torch.rand(2, generator=gen, dtype=torch.float64).tolist())
        objective = StyleObjective(model, x, ref, oracle, w1=1.0, w2=1.0)
        with torch.no_grad():
            s0 = model.style(x)
        s = (s0 + 0.1 * torch.randn(s0.shape, generator=gen, dtype=torch.float64)).requires_grad_(True)
        assert torch.autograd.gradcheck(objective, (s,), eps=1e-6, atol=1e-7, rtol=1e-3)
