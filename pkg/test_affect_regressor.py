"""Pixel and guidance regressors: training, inference and shape checks."""

import numpy as np
import pytest
import torch

from affect_regressor import (EmotionRating, GuidanceRegressor, PixelRegressor, TrainConfig, evaluate_mae,
                              images_to_batch, predict_batch, predict_emotion, predict_emotion_mid,
                              train_guidance_regressor, train_pixel_regressor)
from errors import ConfigError, ModelNotTrainedError, ShapeMismatchError
from noise_schedule import make_schedule
from synthetic_corpus import load_shapes_manifest


def test_emotion_rating_distance():
    r = EmotionRating(0.2, 0.6)
    assert r.as_tuple() == (0.2, 0.6)
    assert r.distance(0.5, 0.2) == pytest.approx(0.5)


@pytest.mark.parametrize("kwargs", [{"val_fraction": 0.0}, {"epochs": 0}, {"learning_rate": -1.0},
                                    {"input_size": 8}])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_untrained_model_refuses_inference(shapes):
    with pytest.raises(ModelNotTrainedError):
        predict_batch(PixelRegressor(input_size=32), shapes)


def test_predictions_are_in_unit_square(shapes):
    torch.manual_seed(0)
    model = PixelRegressor(input_size=32)
    model.mark_trained()
    model.eval()
    pred = predict_batch(model, shapes)
    assert pred.shape == (len(shapes), 2) and pred.dtype == np.float64
    assert pred.min() >= 0.0 and pred.max() <= 1.0
    single = predict_emotion(model, shapes[0])
    assert single.as_tuple() == pytest.approx(tuple(pred[0]), abs=1e-6)


def test_images_to_batch_resizes(shapes):
    x = images_to_batch(shapes[:3], size=16, dtype=torch.float64)
    assert x.shape == (3, 3, 16, 16) and x.dtype == torch.float64


def test_trained_regressor_metrics(tiny_regressor, shapes_manifest):
    m = tiny_regressor.metrics
    assert tiny_regressor.trained
    assert m["n_train"] + m["n_val"] == len(shapes_manifest)
    assert m["n_val"] == 4
    assert 1 <= m["best_epoch"] <= 3
    assert len(m["history"]["val_mae"]) <= 3
    assert 0.0 <= m["valence_mae"] <= 1.0 and 0.0 <= m["arousal_mae"] <= 1.0


def test_training_is_deterministic(shapes_manifest):
    cfg = TrainConfig(epochs=1, batch_size=16, input_size=32, seed=7)
    images = shapes_manifest.load_images()
    a = train_pixel_regressor(shapes_manifest, cfg, images=images)
    b = train_pixel_regressor(shapes_manifest, cfg, images=images)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_raw_manifest_rejected(tmp_path):
    raw = load_shapes_manifest(tmp_path, n=6, size=16, seed=0)
    with pytest.raises(ConfigError):
        train_pixel_regressor(raw, TrainConfig(epochs=1, input_size=16))


def test_oracle_matches_labels(oracle, shapes_manifest):
    v_mae, a_mae = evaluate_mae(oracle, shapes_manifest)
    assert v_mae < 1e-5 and a_mae < 1e-4


def test_guidance_regressor_shape_check():
    g = GuidanceRegressor(in_channels=16, spatial=(4, 4))
    g.mark_trained()
    with pytest.raises(ShapeMismatchError):
        predict_emotion_mid(g, torch.zeros(1, 8, 4, 4))
    with pytest.raises(ShapeMismatchError):
        predict_emotion_mid(g, torch.zeros(1, 16, 8, 8))


def test_guidance_prediction_is_differentiable():
    torch.manual_seed(0)
    g = GuidanceRegressor(in_channels=16, spatial=(4, 4))
    g.mark_trained()
    u = torch.randn(2, 16, 4, 4, requires_grad=True)
    out = predict_emotion_mid(g, u)
    assert out.shape == (2, 2)
    out.sum().backward()
    assert torch.all(torch.isfinite(u.grad)) and float(u.grad.abs().sum()) > 0.0


def test_train_guidance_regressor(tiny_denoiser, small_schedule, shapes_manifest):
    cfg = TrainConfig(epochs=1, batch_size=16, input_size=16, seed=0)
    g = train_guidance_regressor(shapes_manifest, tiny_denoiser, small_schedule, cfg, timestep=10)
    assert g.trained
    assert g.metrics["timestep"] == 10
    assert g.in_channels == 2 * tiny_denoiser.base
    assert g.spatial == (tiny_denoiser.image_size // 4, tiny_denoiser.image_size // 4)
    assert all(p.requires_grad for p in tiny_denoiser.parameters())


def test_guidance_training_checks_schedule(tiny_denoiser, shapes_manifest, small_schedule):
    cfg = TrainConfig(epochs=1, input_size=16)
    with pytest.raises(ShapeMismatchError):
        train_guidance_regressor(shapes_manifest, tiny_denoiser, make_schedule(20), cfg)
    with pytest.raises(ConfigError):
        train_guidance_regressor(shapes_manifest, tiny_denoiser, small_schedule, cfg, timestep=0)
