import json

import pytest

from mvssm.config import KNOWN_KEYS, config_from_dict, dump_config, parse_config
from mvssm.errors import ConfigError
from mvssm.model import ModelConfig
from mvssm.train import TrainConfig


def test_empty_gives_defaults():
    m, t = config_from_dict({})
    assert m == ModelConfig() and t == TrainConfig()


def test_values_routed():
    m, t = config_from_dict({"c1": 8, "lr": 0.01, "seed": 4, "depths": [1, 1, 1, 1]})
    assert m.c1 == 8 and m.depths == (1, 1, 1, 1) and t.lr == 0.01
    assert m.seed == t.seed == 4


def test_variant_preset_with_override():
    m, _ = config_from_dict({"variant": "tiny", "state": 4})
    assert (m.c1, m.depths, m.state) == (96, (2, 2, 9, 2), 4)


@pytest.mark.parametrize("raw,key", [
    ({"lrr": 0.1}, "lrr"),
    ({"lr": -1}, "lr"),
    ({"lr": "fast"}, "lr"),
    ({"epochs": True}, "epochs"),
    ({"epochs": 2.5}, "epochs"),
    ({"use_cvsm": 1}, "use_cvsm"),
    ({"depths": [1, 1, "x", 1]}, "depths[2]"),
    ({"depths": 4}, "depths"),
    ({"variant": "huge"}, "variant"),
    ({"fusion_mode": "mid"}, "fusion_mode"),
    ([], "<root>"),
])
def test_errors_name_the_key(raw, key):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.key == key


def test_grad_clip_accepts_null_and_number():
    assert config_from_dict({"grad_clip": None})[1].grad_clip is None
    assert config_from_dict({"grad_clip": 1})[1].grad_clip == 1


def test_parse_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 3}))
    assert parse_config(tmp_path / "c.json")[1].epochs == 3


def test_parse_errors(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_config(tmp_path / "missing.json")
    assert exc.value.key == "<file>"
    (tmp_path / "bad.json").write_text('{"lr": 0.1,\n "epochs": }')
    with pytest.raises(ConfigError, match="line 2") as exc:
        parse_config(tmp_path / "bad.json")
    assert exc.value.key == "<json>"


def test_dump_roundtrip():
    m, t = ModelConfig(c1=8, fusion_mode="late"), TrainConfig(lr=0.5, runs=2)
    dumped = dump_config(m, t)
    assert set(dumped) <= KNOWN_KEYS
    assert config_from_dict(json.loads(json.dumps(dumped))) == (m, t)
