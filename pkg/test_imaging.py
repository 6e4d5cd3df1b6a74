"""Image I/O, color conversion and manifest ingestion."""

import logging

import numpy as np
import pandas as pd
import pytest
import torch
from PIL import Image as PILImage

from errors import ImageLoadError, ManifestError
from imaging import (AffectiveSample, ColorSpace, EmotionReference, Image, content_hash, convert_color,
                     ingest_manifest, load_image, normalize_ratings, resize_image, save_image, to_rgb,
                     write_manifest)


def _png(path, array):
    PILImage.fromarray(array).save(path, format="PNG")
    return path


# ========== IMAGE / LOAD ==========

def test_white_and_black_png(tmp_path):
    white = load_image(_png(tmp_path / "w.png", np.full((10, 12, 3), 255, np.uint8)))
    black = load_image(_png(tmp_path / "b.png", np.zeros((10, 12, 3), np.uint8)))
    assert white.color_space == ColorSpace.RGB
    assert np.all(white.pixels == 1.0)
    assert np.all(black.pixels == 0.0)


def test_gradient_matches_reference_decoder(tmp_path):
    grad = (np.arange(16 * 16 * 3) % 256).astype(np.uint8).reshape(16, 16, 3)
    path = _png(tmp_path / "g.png", grad)
    img = load_image(path)
    with PILImage.open(path) as ref:
        expected = np.asarray(ref.convert("RGB"), dtype=np.float64) / 255.0
    np.testing.assert_array_equal(img.pixels, expected)


def test_grayscale_png_loads_as_gray(tmp_path):
    img = load_image(_png(tmp_path / "l.png", np.full((9, 9), 128, np.uint8)))
    assert img.color_space == ColorSpace.GRAY
    assert img.channels == 1
    assert to_rgb(img).channels == 3


def test_missing_and_corrupt_files(tmp_path):
    with pytest.raises(ImageLoadError):
        load_image(tmp_path / "nope.png")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"definitely not a png")
    with pytest.raises(ImageLoadError):
        load_image(bad)


def test_unsupported_channel_count(tmp_path):
    rgba = _png(tmp_path / "a.png", np.zeros((10, 10, 4), np.uint8))
    with pytest.raises(ImageLoadError):
        load_image(rgba)


@pytest.mark.parametrize("pixels", [
    np.full((8, 8, 3), 1.5),
    np.full((8, 8, 3), np.nan),
    np.zeros((4, 8, 3)),
    np.zeros((8, 8, 2)),
])
def test_image_invariants_rejected(pixels):
    with pytest.raises(ImageLoadError):
        Image(pixels)


def test_fuzzed_rasters_stay_in_bounds(tmp_path, rng):
    for i in range(10):
        arr = rng.integers(0, 256, (int(rng.integers(8, 20)), int(rng.integers(8, 20)), 3), dtype=np.uint8)
        img = load_image(_png(tmp_path / f"f{i}.png", arr))
        assert np.all(np.isfinite(img.pixels))
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0


def test_save_quantizes_only_on_write(tmp_path, random_image):
    path = save_image(random_image, tmp_path / "x.png")
    back = load_image(path)
    assert np.abs(back.pixels - random_image.pixels).max() <= 0.5 / 255 + 1e-12
    assert content_hash(back) == content_hash(random_image)


def test_tensor_bridge(random_image):
    t = random_image.to_tensor(torch.float64)
    assert t.shape == (1, 3, 24, 24)
    np.testing.assert_array_equal(Image.from_tensor(t).pixels, random_image.pixels)


def test_resize_image(random_image):
    out = resize_image(random_image, (12, 16))
    assert (out.height, out.width) == (12, 16)


# ========== COLOR ==========

def test_pure_red_to_hsv():
    red = Image(np.tile([1.0, 0.0, 0.0], (8, 8, 1)))
    hsv = convert_color(red, ColorSpace.HSV)
    np.testing.assert_allclose(hsv.pixels[0, 0], [0.0, 1.0, 1.0])


def test_gray_to_hsv_has_no_saturation():
    gray = Image(np.full((8, 8, 3), 0.5))
    hsv = convert_color(gray, ColorSpace.HSV).pixels
    assert np.all(hsv[:, :, 1] == 0.0)
    np.testing.assert_allclose(hsv[:, :, 2], 0.5)


def test_rgb_hsv_round_trip(random_image):
    back = convert_color(convert_color(random_image, ColorSpace.HSV), ColorSpace.RGB)
    assert np.abs(back.pixels - random_image.pixels).max() < 1e-6


def test_convert_to_same_space_rejected(random_image):
    with pytest.raises(ValueError):
        convert_color(random_image, ColorSpace.RGB)


def test_emotion_reference_bounds_and_parse():
    assert EmotionReference() == EmotionReference(0.5, 0.0)
    assert EmotionReference.parse("-1, 1") == EmotionReference(-1.0, 1.0)
    with pytest.raises(ValueError):
        EmotionReference(1.5, 0.0)
    with pytest.raises(ValueError):
        EmotionReference.parse("0.5")


# ========== MANIFESTS ==========

def _corpus(tmp_path, rows, scales=None, n_images=4):
    for i in range(n_images):
        save_image(Image(np.full((8, 8, 3), i / 10)), tmp_path / f"img{i}.png")
    samples = [AffectiveSample(f"img{i}.png", v, a, ds) for i, v, a, ds in rows]
    return write_manifest(samples, tmp_path / "manifest.csv", scales)


def test_ingest_keeps_raw_ratings(tmp_path):
    path = _corpus(tmp_path, [(0, 5.0, 1.0, "naps"), (1, 9.0, 3.0, "naps")], {"naps": (1.0, 9.0)})
    m = ingest_manifest(path)
    assert not m.normalized
    assert m.labels().tolist() == [[5.0, 1.0], [9.0, 3.0]]
    assert m.scale_origin["naps"] == "published"


def test_normalize_with_published_scale(tmp_path):
    path = _corpus(tmp_path, [(0, 5.0, 1.0, "naps"), (1, 9.0, 3.0, "naps")], {"naps": (1.0, 9.0)})
    m = normalize_ratings(ingest_manifest(path))
    np.testing.assert_allclose(m.labels(), [[0.5, 0.0], [1.0, 0.25]])
    again = normalize_ratings(m)
    np.testing.assert_allclose(again.labels(), m.labels())


def test_two_sources_monotone(tmp_path):
    rows = [(0, 2.0, 2.0, "a"), (1, 4.0, 3.0, "a"), (2, -50.0, 10.0, "b"), (3, 50.0, 90.0, "b")]
    m = normalize_ratings(ingest_manifest(_corpus(tmp_path, rows, {"a": (1.0, 5.0), "b": (-100.0, 100.0)})))
    labels = m.labels()
    assert labels.min() >= 0.0 and labels.max() <= 1.0
    np.testing.assert_allclose(labels[:, 0], [0.25, 0.75, 0.25, 0.75])
    assert labels[0, 1] < labels[1, 1] and labels[2, 1] < labels[3, 1]


def test_empirical_fallback(tmp_path):
    m = ingest_manifest(_corpus(tmp_path, [(0, 2.0, 4.0, "x"), (1, 6.0, 3.0, "x")]))
    assert m.scale_origin["x"] == "empirical"
    assert m.scale_metadata["x"] == (2.0, 6.0)


def test_malformed_row_reports_line(tmp_path):
    path = _corpus(tmp_path, [(0, 5.0, 1.0, "naps"), (1, 9.0, 3.0, "naps")], {"naps": (1.0, 9.0)})
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    df.loc[1, "valence"] = "high"
    df.to_csv(path, index=False)
    with pytest.raises(ManifestError) as exc:
        ingest_manifest(path)
    assert exc.value.line == 3


def test_unknown_dataset_in_scale_table(tmp_path):
    path = _corpus(tmp_path, [(0, 5.0, 1.0, "naps"), (1, 4.0, 2.0, "oasis")], {"naps": (1.0, 9.0)})
    with pytest.raises(ManifestError, match="oasis"):
        ingest_manifest(path)


def test_unused_scale_rows_only_warn(tmp_path, caplog):
    path = _corpus(tmp_path, [(0, 5.0, 1.0, "naps")], {"naps": (1.0, 9.0), "oasis": (1.0, 7.0)})
    with caplog.at_level(logging.WARNING, logger="imaging"):
        m = ingest_manifest(path)
    assert set(m.scale_metadata) == {"naps"}
    assert m.scale_origin["naps"] == "published"
    assert "oasis" in caplog.text


def test_degenerate_scale(tmp_path):
    path = _corpus(tmp_path, [(0, 5.0, 1.0, "naps")], {"naps": (3.0, 3.0)})
    with pytest.raises(ManifestError):
        normalize_ratings(ingest_manifest(path))


def test_missing_image_rejected(tmp_path):
    path = _corpus(tmp_path, [(0, 5.0, 1.0, "naps"), (7, 5.0, 1.0, "naps")], {"naps": (1.0, 9.0)})
    with pytest.raises(ManifestError):
        ingest_manifest(path)
