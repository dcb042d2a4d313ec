import pytest

from demoseg.config import Config, load_config, parse_override
from demoseg.errors import ConfigError


def test_defaults():
    cfg = Config()
    assert cfg["keystates"]["theta"] == 0.25 and cfg["keystates"]["window"] == 8
    assert cfg["eval"]["tolerances"] == [8, 16] and cfg.min_conf == 6.0


@pytest.mark.parametrize("values, key", [
    ({"keystates": {"thetta": 0.3}}, "keystates.thetta"),
    ({"nonsense": {}}, "nonsense"),
    ({"keystates": {"theta": 1.5}}, "keystates.theta"),
    ({"keystates": {"weights": {"gripper_close": 0.7}}}, "keystates.weights"),
    ({"keystates": {"enabled": {h: False for h in ("gripper_close", "gripper_near", "object_movement",
                                                  "relation_change", "state_change")}}}, "keystates.enabled"),
    ({"run": {"workers": 0}}, "run.workers"),
])
def test_bad_values_name_the_key(values, key):
    with pytest.raises(ConfigError) as err:
        Config(values)
    assert err.value.key == key


def test_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("keystates:\n  theta: 0.4\n  window: 4\n")
    cfg = load_config(p, {"keystates.theta": 0.6})
    assert cfg["keystates"]["theta"] == 0.6 and cfg["keystates"]["window"] == 4


def test_yaml_errors(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("keystates: [\n")
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_config(p)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")


def test_parse_override():
    assert parse_override("keystates.theta=0.3") == ("keystates.theta", 0.3)
    assert parse_override("client.mock=true") == ("client.mock", True)
    with pytest.raises(ConfigError):
        parse_override("theta")


def test_digest_tracks_values():
    a, b = Config(), Config()
    assert a.digest() == b.digest()
    b.set("keystates.theta", 0.3)
    assert a.digest() != b.digest()
    assert Config({"keystates": {"theta": 1}})["keystates"]["theta"] == 1.0


def test_noisy_mode_drops_gate():
    assert Config({"labeler": {"noisy": True}}).min_conf is None
