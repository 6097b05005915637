import math

import pytest

from toss.config import ConfigError, PipelineConfig, config_from_dict, load_config


def test_shipped_config_matches_defaults():
    assert load_config() == PipelineConfig()


def test_degrees_become_radians():
    cfg = config_from_dict({"projection": {"f_up_deg": 10.0, "f_down_deg": 2.0}, "ground": {"max_slope_deg": 20}})
    assert cfg.projection.f_up == pytest.approx(math.radians(10))
    assert cfg.projection.f_down == pytest.approx(math.radians(2))
    assert cfg.ground.max_slope == pytest.approx(math.radians(20))


@pytest.mark.parametrize("doc, key", [
    ({"tracking": {"bogus": 1}}, "tracking.bogus"),
    ({"tracking": {"noise": {"q_spin": 1}}}, "tracking.noise.q_spin"),
    ({"projection": {"f_up": 0.4}}, "projection.f_up"),
    ({"map": {"voxel": 0.1}}, "map.voxel"),
    ({"extras": {}}, "extras"),
    ({"ds_voting": {"tau_x": 3}}, "ds_voting.tau_x"),
])
def test_unknown_key_names_path(doc, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        config_from_dict(doc)


@pytest.mark.parametrize("doc", [
    {"ds_voting": {"tau_d": 60}},
    {"ds_voting": {"mode": "sideways"}},
    {"tracking": {"associator": "hungarian"}},
    {"map": {"voxel_size": 0}},
    {"projection": {"f_up_deg": "up"}},
])
def test_invalid_values(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_load_errors_name_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("tracking: {k: 0}\n")
    with pytest.raises(ConfigError, match="c.yaml"):
        load_config(p)
    p.write_text("- a list\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_overrides():
    cfg = PipelineConfig().with_overrides(associator="exhaustive", refine=False)
    assert cfg.tracking.associator == "exhaustive" and not cfg.refine.enabled
    assert PipelineConfig().with_overrides() == PipelineConfig()
