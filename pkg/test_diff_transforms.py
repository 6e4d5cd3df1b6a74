"""Differentiable transform chain: identity, bounds, monotonicity and gradients."""

import numpy as np
import pytest
import torch

from diff_transforms import (CURVE_KNOTS, DEFAULT_PARAM_BOUNDS, SLICES, VECTOR_SIZE, ParamBounds, TransformParams,
                             _apply_curve, apply_to_frames, apply_transforms, apply_transforms_tensor, clamp_params,
                             identity_params)
from errors import ParamBoundsError
from imaging import Image


@pytest.fixture
def textured(rng):
    return Image(0.05 + 0.9 * rng.random((12, 12, 3)))


def test_identity_is_exact(random_image):
    out = apply_transforms(random_image, identity_params())
    np.testing.assert_allclose(out.pixels, random_image.pixels, atol=1e-9)


def test_out_of_bounds_rejected(random_image):
    with pytest.raises(ParamBoundsError):
        apply_transforms(random_image, identity_params().replace(exposure=3.0))
    with pytest.raises(ParamBoundsError):
        apply_transforms(random_image, identity_params().replace(scale=0.5))


def test_exposure_brightens(textured):
    means = [apply_transforms(textured, identity_params().replace(exposure=e)).pixels.mean()
             for e in (-1.0, 0.0, 1.0)]
    assert means[0] < means[1] < means[2]


def test_contrast_spreads_about_mid_gray(textured):
    low = apply_transforms(textured, identity_params().replace(contrast=0.6)).pixels
    high = apply_transforms(textured, identity_params().replace(contrast=1.8)).pixels
    assert low.std() < textured.pixels.std() < high.std()


def test_blur_reduces_variation(textured):
    stds = [apply_transforms(textured, identity_params().replace(blur_sigma=s)).pixels.std()
            for s in (0.0, 0.5, 1.5, 4.0)]
    assert all(a > b for a, b in zip(stds, stds[1:]))


def test_curves_are_monotone_with_fixed_ends(rng):
    x = torch.linspace(0.0, 1.0, 101, dtype=torch.float64).view(1, 1, 1, -1).expand(1, 3, 1, 101)
    for _ in range(5):
        offsets = torch.as_tensor(rng.uniform(-1, 1, (3, CURVE_KNOTS)))
        y = _apply_curve(x, offsets)
        assert torch.all(y[..., 1:] >= y[..., :-1])
        torch.testing.assert_close(y[..., 0], torch.zeros(1, 3, 1, dtype=torch.float64))
        torch.testing.assert_close(y[..., -1], torch.ones(1, 3, 1, dtype=torch.float64))


def test_feasible_params_keep_range(textured, rng):
    lo, hi = DEFAULT_PARAM_BOUNDS.lo.numpy(), DEFAULT_PARAM_BOUNDS.hi.numpy()
    for _ in range(8):
        p = TransformParams(torch.as_tensor(rng.uniform(lo, hi)))
        out = apply_transforms(textured, p).pixels
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_unclamped_output_can_leave_range(textured):
    raw = apply_transforms(textured, identity_params().replace(exposure=2.0), clamp=False)
    assert isinstance(raw, torch.Tensor)
    assert float(raw.max()) > 1.0


def test_constant_image_survives_geometry():
    flat = Image(np.full((10, 10, 3), 0.4))
    out = apply_transforms(flat, identity_params().replace(translate=[0.1, -0.05], scale=1.05))
    np.testing.assert_allclose(out.pixels, 0.4, atol=1e-12)


def test_gradcheck_at_interior_point(rng):
    x = torch.as_tensor(0.1 + 0.8 * rng.random((1, 3, 8, 8)))
    v = identity_params().replace(exposure=0.3, contrast=1.1, sharpen_amount=0.4, blur_sigma=0.5,
                                  translate=[0.013, -0.021], scale=1.02).values
    v[1:1 + CURVE_KNOTS] = torch.as_tensor(rng.uniform(-0.3, 0.3, CURVE_KNOTS))
    v.requires_grad_(True)
    assert torch.autograd.gradcheck(lambda vec: apply_transforms_tensor(x, TransformParams(vec)), (v,))


def test_every_field_receives_gradient(rng):
    x = torch.as_tensor(0.1 + 0.8 * rng.random((1, 3, 10, 10)))
    v = identity_params().replace(translate=[0.02, 0.02], scale=1.03).values.requires_grad_(True)
    apply_transforms_tensor(x, TransformParams(v)).square().sum().backward()
    assert torch.all(torch.isfinite(v.grad))
    p = TransformParams(v.grad)
    for name in ("exposure", "contrast", "sharpen_amount", "blur_sigma", "scale"):
        assert float(p.field(name).abs().sum()) > 0.0, name


def test_param_dict_and_json(tmp_path):
    p = TransformParams.from_dict({"exposure": -0.5, "translate": [0.01, 0.02]})
    assert p.to_dict()["contrast"] == 1.0
    path = tmp_path / "p.json"
    p.to_json(path)
    torch.testing.assert_close(TransformParams.from_json(path).values, p.values)
    torch.testing.assert_close(TransformParams.from_json(p.to_json()).values, p.values)
    with pytest.raises(ValueError):
        TransformParams.from_dict({"gamma": 2.0})
    with pytest.raises(ValueError):
        TransformParams.from_dict({"translate": [0.1]})


def test_clamp_params_projects_into_box():
    p = identity_params().replace(exposure=5.0, contrast=0.1)
    q = clamp_params(p)
    assert DEFAULT_PARAM_BOUNDS.contains(q)
    assert float(q.exposure) == 2.0 and float(q.contrast) == 0.5


def test_bounds_must_contain_identity():
    with pytest.raises(ValueError):
        ParamBounds.from_fields({"contrast": (1.2, 2.0)})
    assert ParamBounds.from_fields({"exposure": (-1.0, 1.0)}).lo.shape == (VECTOR_SIZE,)


def test_frames_share_parameters(textured, random_image):
    p = identity_params().replace(exposure=0.5)
    frames = apply_to_frames([textured, random_image], p)
    np.testing.assert_array_equal(frames[0].pixels, apply_transforms(textured, p).pixels)


def test_default_bounds_admit_one_sided_fields():
    ident = identity_params()
    assert DEFAULT_PARAM_BOUNDS.contains(ident)
    assert float(DEFAULT_PARAM_BOUNDS.lo[SLICES["blur_sigma"]]) == 0.0
    assert float(DEFAULT_PARAM_BOUNDS.lo[SLICES["sharpen_amount"]]) == 0.0
    bounds = ParamBounds.from_fields({"sharpen_amount": (0.0, 1.0), "blur_sigma": (0.0, 3.0)})
    assert bounds.contains(ident)


def test_adapters_and_cli_import():
    import affectctl
    import eval_harness
    import parametric_adapter
    import style_adapter

    assert callable(affectctl.main)
    assert parametric_adapter.DEFAULT_PARAM_BOUNDS is DEFAULT_PARAM_BOUNDS
    assert style_adapter.optimize_style and eval_harness.run_weight_sweep


def test_tone_curve_keeps_channel_ratios():
    px = np.empty((8, 8, 3))
    px[...] = (0.6, 0.3, 0.1)
    x = Image(px).to_tensor(torch.float64)
    offsets = torch.linspace(-0.8, 0.8, CURVE_KNOTS, dtype=torch.float64)
    v = identity_params().values.clone()
    v[1:1 + CURVE_KNOTS] = offsets
    y = apply_transforms_tensor(x, TransformParams(v), clamp=False)
    assert not torch.allclose(y, x)
    torch.testing.assert_close(y[:, 0] / y[:, 1], torch.full_like(y[:, 0], 2.0))
    torch.testing.assert_close(y[:, 1] / y[:, 2], torch.full_like(y[:, 0], 3.0))


def test_tone_curve_is_identity_on_black():
    x = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
    v = identity_params().values.clone()
    v[1:1 + CURVE_KNOTS] = torch.linspace(-0.5, 0.5, CURVE_KNOTS, dtype=torch.float64)
    torch.testing.assert_close(apply_transforms_tensor(x, TransformParams(v)), x)
