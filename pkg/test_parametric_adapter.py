"""Parametric adapter: projected optimizer, objective and sidecars."""

import json

import numpy as np
import pytest
import torch

from diff_transforms import CURVE_KNOTS, DEFAULT_PARAM_BOUNDS, TransformParams, identity_params
from errors import ConfigError
from imaging import ColorSpace, EmotionReference, Image
from parametric_adapter import (EARLY_STOP_WINDOW, PRESETS, AdaptationResult, ParametricObjective,
                                emotion_distance_tensor, manual_adapt, minimize_projected, optimize_params,
                                write_adaptation)
from semantic_services import ThumbnailEmbedder
from synthetic_corpus import bright_image


# ========== OPTIMIZER ==========

def test_projected_minimum_on_boundary():
    run = minimize_projected(lambda v: ((v - 3.0) ** 2).sum(), torch.zeros(1, dtype=torch.float64),
                             project=lambda v: v.clamp(-1.0, 1.0), iters=100)
    assert float(run.best) == pytest.approx(1.0)
    assert min(run.trace) == pytest.approx(4.0)
    assert run.trace[run.best_iteration] == min(run.trace)
    assert not run.aborted


def test_early_stop_on_flat_objective():
    run = minimize_projected(lambda v: 0.0 * v.sum(), torch.zeros(2), iters=500)
    assert run.iterations == EARLY_STOP_WINDOW + 1
    assert run.best_iteration == 0


def test_non_finite_objective_aborts_with_best_iterate():
    calls = {"n": 0}

    def objective(v):
        calls["n"] += 1
        if calls["n"] > 3:
            return v.sum() * float("nan")
        return (v - 1.0).square().sum()

    run = minimize_projected(objective, torch.zeros(1, dtype=torch.float64), iters=50)
    assert run.aborted
    assert run.iterations == 3
    assert np.all(np.isfinite(run.trace))
    assert torch.all(torch.isfinite(run.best))


# ========== OBJECTIVE ==========

def test_emotion_distance_tensor():
    pred = torch.tensor([[0.5, 0.0], [0.8, 0.4]], dtype=torch.float64)
    d = emotion_distance_tensor(pred, EmotionReference(0.5, 0.0))
    assert float(d[0]) == pytest.approx(0.0, abs=1e-5)
    assert float(d[1]) == pytest.approx(0.5)


def test_objective_at_identity_is_pure_emotion_term(random_image, oracle):
    x = random_image.to_tensor(torch.float64)
    ref = EmotionReference(0.1, 0.9)
    obj = ParametricObjective(x, ref, oracle, ThumbnailEmbedder(), w1=1.0, w2=0.5)
    value = float(obj(identity_params().values))
    expected = 0.5 * float(emotion_distance_tensor(oracle(x), ref)[0])
    assert value == pytest.approx(expected, abs=1e-6)


def test_objective_gradient_matches_central_differences(rng, oracle):
    for _ in range(10):
        x = torch.as_tensor(0.1 + 0.8 * rng.random((1, 3, 8, 8)))
        ref = EmotionReference(*rng.uniform(0.0, 1.0, 2))
        obj = ParametricObjective(x, ref, oracle, ThumbnailEmbedder(), w1=1.0, w2=1.0)
        p = identity_params().replace(exposure=rng.uniform(-0.4, 0.4), contrast=rng.uniform(0.85, 1.15),
                                      sharpen_amount=rng.uniform(0.1, 0.5), blur_sigma=rng.uniform(0.3, 0.8),
                                      translate=rng.uniform(-0.03, 0.03, 2), scale=rng.uniform(0.97, 1.03),
                                      tone_curve=rng.uniform(-0.3, 0.3, CURVE_KNOTS),
                                      color_curves=rng.uniform(-0.2, 0.2, 3 * CURVE_KNOTS))
        v = p.values.requires_grad_(True)
        assert torch.autograd.gradcheck(obj, (v,), eps=1e-6, atol=1e-7, rtol=1e-3)


@pytest.mark.parametrize("w1,w2,iters", [(-1.0, 1.0, 10), (1.0, -0.1, 10), (1.0, 1.0, 0)])
def test_invalid_settings(random_image, oracle, w1, w2, iters):
    with pytest.raises(ConfigError):
        optimize_params(random_image, EmotionReference(), oracle, ThumbnailEmbedder(), w1, w2, iters=iters)


def test_similarity_needs_embedder(random_image, oracle):
    with pytest.raises(ConfigError):
        optimize_params(random_image, EmotionReference(), oracle, None, 1.0, 1.0, iters=5)


# ========== END TO END ==========

def test_bright_image_is_darkened(oracle):
    img = bright_image(size=16, level=0.9, seed=0)
    ref = EmotionReference(0.2, 0.0)
    result = optimize_params(img, ref, oracle, None, w1=0.0, w2=1.0, iters=40)
    assert result.method == "parametric"
    assert not result.aborted
    assert DEFAULT_PARAM_BOUNDS.contains(result.params_or_code)
    assert result.emotion_after.valence < result.emotion_before.valence
    assert result.emotion_distance() < result.emotion_before.distance(0.2, 0.0)
    assert result.loss_trace[result.best_iteration] == min(result.loss_trace)


def test_similarity_weight_limits_change(oracle):
    img = bright_image(size=16, level=0.85, seed=1)
    ref = EmotionReference(0.2, 0.0)
    free = optimize_params(img, ref, oracle, ThumbnailEmbedder(), w1=0.0, w2=1.0, iters=30)
    held = optimize_params(img, ref, oracle, ThumbnailEmbedder(), w1=50.0, w2=1.0, iters=30)
    assert held.reconstruction_error(img) <= free.reconstruction_error(img)


def test_seeded_runs_are_identical(shapes, oracle):
    a = optimize_params(shapes[0], EmotionReference(0.3, 0.7), oracle, ThumbnailEmbedder(), *PRESETS["bidirectional"],
                        iters=15, seed=4)
    b = optimize_params(shapes[0], EmotionReference(0.3, 0.7), oracle, ThumbnailEmbedder(), *PRESETS["bidirectional"],
                        iters=15, seed=4)
    np.testing.assert_array_equal(a.adapted.pixels, b.adapted.pixels)
    assert a.loss_trace == b.loss_trace


def test_manual_identity_is_noop(random_image, oracle):
    result = manual_adapt(random_image, identity_params(), oracle)
    assert result.method == "manual"
    assert result.reconstruction_error(random_image) < 1e-9
    assert result.loss_trace == []


def test_result_rejects_non_finite_trace(random_image):
    with pytest.raises(ValueError):
        AdaptationResult(random_image, identity_params(), [1.0, float("inf")], None, None)


def test_write_adaptation_sidecar(tmp_path, oracle):
    img = bright_image(size=16, seed=2)
    result = manual_adapt(img, TransformParams.from_dict({"exposure": -0.5}), oracle, EmotionReference(0.2, 0.1))
    png, sidecar = write_adaptation(result, tmp_path / "adapted.png")
    assert png.exists() and sidecar.name == "adapted.json"
    data = json.loads(sidecar.read_text())
    assert data["method"] == "manual"
    assert data["reference"] == [0.2, 0.1]
    assert data["params"]["exposure"] == -0.5
    assert data["emotion_after"][0] < data["emotion_before"][0]


def test_gray_input_is_adapted_as_rgb():
    gray = Image(np.full((12, 12, 1), 0.5), ColorSpace.GRAY)
    result = manual_adapt(gray, identity_params().replace(exposure=0.5))
    assert result.adapted.channels == 3
    assert result.reconstruction_error(gray) > 0.0
