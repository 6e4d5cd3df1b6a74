"""Run configuration parsing."""

import json

import pytest

from errors import ConfigError
from settings import RunConfig, load_config, parse_config


def test_defaults():
    run = load_config(None)
    assert run == RunConfig()
    assert run.diffusion.nto_scale is None
    assert run.adapt.reference == [0.5, 0.0]
    assert run.metrics.contrast_sigmas == [1.0, 2.0, 4.0, 8.0]


def test_partial_sections_override(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 5, "diffusion": {"cfg_scale": 3.0}, "metrics": {"wavelet": "haar"}}))
    run = load_config(str(path))
    assert run.seed == 5
    assert run.diffusion.cfg_scale == 3.0 and run.diffusion.ddim_steps == 50
    assert run.metrics.wavelet == "haar"
    assert run.to_dict()["diffusion"]["cfg_scale"] == 3.0


@pytest.mark.parametrize("raw", [[1, 2], {"optimizer": {}}, {"train": {"epochs": 3, "momentum": 0.9}},
                                 {"adapt": 5}])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(bad))
