"""Embedders and caption providers (the HTTP endpoint is faked at the session level)."""

from unittest.mock import MagicMock

import numpy as np
import pytest
import requests
import torch
from PIL import Image as PILImage
from PIL.PngImagePlugin import PngInfo

import settings
from errors import CaptionError, ConfigError, ProviderUnavailableError
from imaging import Image, save_image
from semantic_services import (AutoencoderEmbedder, EmbedderTrainConfig, HttpCaptionProvider,
                               ManifestCaptionProvider, RegressorFeatureEmbedder, SemanticEmbedding,
                               ThumbnailEmbedder, caption_image, cosine_similarity, cosine_similarity_tensor,
                               embed_image, embed_images, make_caption_provider, train_autoencoder_embedder)


def _response(status=200, payload=None, text=""):
    resp = MagicMock()
    resp.status_code = status
    resp.text = text
    if isinstance(payload, Exception):
        resp.json.side_effect = payload
    else:
        resp.json.return_value = payload
    return resp


# ========== EMBEDDINGS ==========

def test_embedding_invariants():
    with pytest.raises(ValueError):
        SemanticEmbedding(np.zeros(4))
    with pytest.raises(ValueError):
        SemanticEmbedding(np.array([1.0, np.nan]))
    assert SemanticEmbedding([1, 2, 3]).dim == 3


def test_thumbnail_embedder_never_zero():
    emb = ThumbnailEmbedder()
    black = Image(np.zeros((16, 16, 3)))
    vec = embed_image(emb, black)
    assert vec.dim == emb.dim == 52
    assert vec.vector[-1] == 1.0


def test_embed_images_matrix(shapes):
    feats = embed_images(ThumbnailEmbedder(), shapes, batch_size=5)
    assert feats.shape == (len(shapes), 52) and feats.dtype == np.float64


def test_cosine_similarity(shapes):
    emb = ThumbnailEmbedder()
    a, b = embed_image(emb, shapes[0]), embed_image(emb, shapes[1])
    assert cosine_similarity(a, a) == pytest.approx(1.0)
    assert -1.0 <= cosine_similarity(a, b) <= 1.0
    with pytest.raises(ValueError):
        cosine_similarity(a, SemanticEmbedding(np.ones(3)))
    ta = torch.as_tensor(np.stack([a.vector, b.vector]))
    tb = torch.as_tensor(np.stack([b.vector, b.vector]))
    sims = cosine_similarity_tensor(ta, tb)
    assert float(sims[0]) == pytest.approx(cosine_similarity(a, b))
    assert float(sims[1]) == pytest.approx(1.0)


def test_untrained_autoencoder_unavailable(shapes):
    with pytest.raises(ProviderUnavailableError):
        embed_image(AutoencoderEmbedder(), shapes[0])
    with pytest.raises(ProviderUnavailableError):
        embed_images(None, shapes)


def test_autoencoder_input_size_checked():
    with pytest.raises(ConfigError):
        AutoencoderEmbedder(input_size=20)


def test_train_autoencoder_embedder(shapes):
    model = train_autoencoder_embedder(shapes, EmbedderTrainConfig(epochs=2, batch_size=8, dim=16))
    assert model.ready and len(model.metrics["loss_trace"]) == 2
    assert embed_images(model, shapes).shape == (len(shapes), 16)
    x = shapes[0].to_tensor(torch.float32).requires_grad_(True)
    model.embed_tensor(x).sum().backward()
    assert float(x.grad.abs().sum()) > 0.0
    with pytest.raises(ConfigError):
        train_autoencoder_embedder(shapes[:1], EmbedderTrainConfig(epochs=1))


def test_regressor_feature_embedder(tiny_regressor, shapes):
    emb = RegressorFeatureEmbedder(tiny_regressor)
    assert emb.ready
    feats = embed_images(emb, shapes)
    assert feats.shape == (len(shapes), tiny_regressor.hidden + 1)
    assert np.all(feats[:, -1] == 1.0)


# ========== CAPTIONS ==========

def test_manifest_captions(shapes_manifest):
    provider = ManifestCaptionProvider(shapes_manifest)
    entry = shapes_manifest.entries[0]
    record = caption_image(provider, entry.image_path)
    assert record.caption == entry.caption and record.provider == "manifest"
    with pytest.raises(CaptionError):
        provider.caption("not/in/manifest.png")


def test_caption_provider_factory(shapes_manifest):
    assert isinstance(make_caption_provider("manifest", shapes_manifest), ManifestCaptionProvider)
    with pytest.raises(ConfigError):
        make_caption_provider("manifest")
    with pytest.raises(ConfigError):
        make_caption_provider("oracle")
    with pytest.raises(ProviderUnavailableError):
        caption_image(None, "x.png")


@pytest.fixture
def image_file(tmp_path, random_image):
    return save_image(random_image, tmp_path / "img.png")


def test_http_provider_caches_by_content(tmp_path, image_file):
    provider = HttpCaptionProvider(url="http://captioner.test/v1", cache_dir=tmp_path / "cache")
    provider.session.post = MagicMock(return_value=_response(payload={"caption": " a noisy square "}))
    assert provider.caption(image_file) == "a noisy square"
    assert provider.caption(image_file) == "a noisy square"
    assert provider.remote_calls == 1
    _, kwargs = provider.session.post.call_args
    assert kwargs["timeout"] == HttpCaptionProvider.TIMEOUT
    assert set(kwargs["json"]) == {"image", "instruction"}

    fresh = HttpCaptionProvider(url="http://captioner.test/v1", cache_dir=tmp_path / "cache")
    fresh.session.post = MagicMock(side_effect=AssertionError("should be served from disk"))
    assert fresh.caption(image_file) == "a noisy square"
    assert fresh.remote_calls == 0


def test_http_cache_keyed_on_file_bytes(tmp_path, random_image):
    q = np.round(random_image.pixels * 255.0).astype(np.uint8)
    plain, tagged = tmp_path / "plain.png", tmp_path / "tagged.png"
    PILImage.fromarray(q).save(plain)
    info = PngInfo()
    info.add_text("source", "second export")
    PILImage.fromarray(q).save(tagged, pnginfo=info)
    assert plain.read_bytes() != tagged.read_bytes()

    provider = HttpCaptionProvider(url="http://captioner.test/v1", cache_dir=tmp_path / "cache")
    provider.session.post = MagicMock(side_effect=[_response(payload={"caption": "first file"}),
                                                   _response(payload={"caption": "second file"})])
    assert provider.caption(plain) == "first file"
    assert provider.caption(tagged) == "second file"
    assert provider.remote_calls == 2


@pytest.mark.parametrize("behaviour", [
    {"return_value": _response(status=503, text="busy")},
    {"return_value": _response(payload=ValueError("not json"))},
    {"return_value": _response(payload={"text": "wrong key"})},
    {"return_value": _response(payload={"caption": "   "})},
    {"side_effect": requests.ConnectionError("down")},
])
def test_http_provider_failures(tmp_path, image_file, behaviour):
    provider = HttpCaptionProvider(url="http://captioner.test/v1", cache_dir=tmp_path / "cache")
    provider.session.post = MagicMock(**behaviour)
    with pytest.raises(CaptionError):
        provider.caption(image_file)


def test_http_provider_needs_endpoint(monkeypatch):
    monkeypatch.setattr(settings, "CAPTION_URL", "")
    with pytest.raises(ProviderUnavailableError):
        HttpCaptionProvider()


def test_http_session_sends_bearer_token(tmp_path):
    provider = HttpCaptionProvider(url="http://captioner.test/v1", api_key="k-123", cache_dir=tmp_path)
    assert provider.session.headers["Authorization"] == "Bearer k-123"
