"""
Desk-scale trend experiments on the synthetic shapes corpus with the exact
(value, saturation) labeler. Slow: run with `pytest --runslow`.
"""

import numpy as np
import pytest

from affect_regressor import TrainConfig, train_guidance_regressor, train_pixel_regressor
from denoiser import DenoiserTrainConfig, train_tiny_denoiser
from diffusion_adapter import GuidanceConfig, InversionCache, adapt_image_diffusion
from eval_harness import AdaptationContext, SweepConfig, run_bidirectional, run_weight_sweep
from imaging import EmotionReference, normalize_ratings
from semantic_services import ThumbnailEmbedder
from style_adapter import DisentanglerTrainConfig, train_disentangler
from synthetic_corpus import load_shapes_manifest, make_shapes

pytestmark = pytest.mark.slow

ADAPTATION_WEIGHTS = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
GUIDANCE_WEIGHTS = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4]


def _violations(values, increasing):
    diffs = np.diff(np.asarray(values, dtype=np.float64))
    bad = diffs < -1e-9 if increasing else diffs > 1e-9
    return int(bad.sum())


def _fit(result, target):
    return result.fits[result.fits["y"] == target].iloc[0]


def _assert_trends(result):
    s = result.summary
    assert result.complete
    assert _violations(s["reconstruction_l1"], increasing=True) <= 1
    assert _violations(s["emotion_distance"], increasing=False) <= 1
    arousal = _fit(result, "arousal")
    assert arousal["slope"] < 0.0 and arousal["p_value"] < 0.05


@pytest.fixture(scope="module")
def corpus50(tmp_path_factory):
    return normalize_ratings(load_shapes_manifest(tmp_path_factory.mktemp("c50"), n=50, size=32, seed=11))


@pytest.fixture(scope="module")
def corpus200(tmp_path_factory):
    return normalize_ratings(load_shapes_manifest(tmp_path_factory.mktemp("c200"), n=200, size=32, seed=12))


@pytest.fixture(scope="module")
def desk_disentangler(corpus200):
    return train_disentangler(corpus200, DisentanglerTrainConfig(epochs=30, image_size=32, seed=0))


@pytest.fixture(scope="module")
def desk_denoiser(corpus200, small_schedule):
    cfg = DenoiserTrainConfig(epochs=40, batch_size=32, image_size=16, base_channels=16, seed=0)
    return train_tiny_denoiser(corpus200, small_schedule, cfg)


@pytest.fixture(scope="module")
def desk_guidance(corpus200, desk_denoiser, small_schedule):
    cfg = TrainConfig(epochs=40, batch_size=32, input_size=16, seed=0, patience=10)
    return train_guidance_regressor(corpus200, desk_denoiser, small_schedule, cfg)


@pytest.fixture(scope="module")
def diffusion_ctx(tmp_path_factory, oracle, desk_denoiser, desk_guidance, small_schedule):
    cache = InversionCache(tmp_path_factory.mktemp("inversions"), maxsize=64)
    return AdaptationContext(regressor=oracle, denoiser=desk_denoiser, guidance=desk_guidance,
                             schedule=small_schedule, inversion_cache=cache)


def test_parametric_weight_sweep_trends(corpus50, oracle):
    ctx = AdaptationContext(regressor=oracle, embedder=ThumbnailEmbedder())
    cfg = SweepConfig("parametric", similarity_weight=1.0, weights=ADAPTATION_WEIGHTS, manifest=corpus50, iters=100)
    _assert_trends(run_weight_sweep(cfg, ctx))


def test_style_weight_sweep_trends(corpus50, oracle, desk_disentangler):
    ctx = AdaptationContext(regressor=oracle, disentangler=desk_disentangler)
    cfg = SweepConfig("style", similarity_weight=1.0, weights=ADAPTATION_WEIGHTS, manifest=corpus50, iters=100)
    _assert_trends(run_weight_sweep(cfg, ctx))


def test_diffusion_guidance_sweep_trends(corpus50, diffusion_ctx):
    cfg = SweepConfig("diffusion", weights=GUIDANCE_WEIGHTS, manifest=corpus50, ddim_steps=10, nto_inner_steps=5)
    _assert_trends(run_weight_sweep(cfg, diffusion_ctx))


def test_guidance_lowers_emotion_distance(corpus50, diffusion_ctx):
    base = dict(manifest=corpus50, ddim_steps=10, nto_inner_steps=5)
    plain = run_weight_sweep(SweepConfig("diffusion", weights=[0.0], **base), diffusion_ctx).summary
    guided = run_weight_sweep(SweepConfig("diffusion", weights=[0.2], **base), diffusion_ctx).summary
    assert guided["emotion_distance"].iloc[0] < plain["emotion_distance"].iloc[0]


def test_null_text_tuning_reconstructs_inputs(desk_denoiser, small_schedule):
    cfg = GuidanceConfig(cfg_scale=2.0, guidance_scale=0.0)
    tuned, fixed = [], []
    for s in make_shapes(10, size=16, seed=21):
        runs = [adapt_image_diffusion(s.image, s.caption, EmotionReference(), cfg, desk_denoiser, None,
                                      small_schedule, steps=25, inner_steps=10, optimize_nulls=flag)
                for flag in (True, False)]
        tuned.append(float(np.mean((runs[0].adapted.pixels - s.image.pixels) ** 2)))
        fixed.append(float(np.mean((runs[1].adapted.pixels - s.image.pixels) ** 2)))
    assert 10.0 * np.log10(1.0 / np.mean(tuned)) >= 25.0
    assert np.mean(tuned) <= 0.8 * np.mean(fixed)


def test_adaptation_moves_toward_reference(corpus50, oracle):
    ctx = AdaptationContext(regressor=oracle, embedder=ThumbnailEmbedder())
    cfg = SweepConfig("parametric", similarity_weight=1.0, weights=[0.2], manifest=corpus50, iters=100)
    adapted = run_weight_sweep(cfg, ctx).per_image
    baseline = run_weight_sweep(SweepConfig("original", weights=[0.0], manifest=corpus50), ctx).per_image
    closer = adapted["emotion_distance"].to_numpy() <= baseline["emotion_distance"].to_numpy() + 1e-9
    assert closer.mean() >= 0.9


def test_bidirectional_slopes_are_positive(corpus200, oracle):
    ctx = AdaptationContext(regressor=oracle, embedder=ThumbnailEmbedder())
    cfg = SweepConfig("parametric", similarity_weight=1.0, weights=[0.2], manifest=corpus200, iters=60, workers=4)
    result = run_bidirectional(cfg, ctx, offsets=[-0.2, -0.1, 0.1, 0.2])
    for target in ("valence", "arousal"):
        fit = _fit(result, target)
        assert fit["slope"] > 0.0 and fit["p_value"] < 0.05, target


def test_regressor_learns_value_and_saturation(corpus200):
    model = train_pixel_regressor(corpus200, TrainConfig(epochs=60, batch_size=32, input_size=32, seed=0,
                                                         patience=10))
    assert model.metrics["valence_mae"] <= 0.05
    assert model.metrics["arousal_mae"] <= 0.05
