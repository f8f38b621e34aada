import json

import pytest

from casplab.config import ConfigError, apply_toggles, default_config, load_config, merge_config, resolve


def test_defaults_resolve():
    res = resolve(default_config(), 4)
    assert res.seed == 4 and res.train.seed == 4
    assert res.protocol.classes_needed == 80
    assert res.train.epochs == 30 and res.train.learning_rate == 1e-2 and res.train.batch_size == 64
    assert res.train.mtm and res.mixup.enabled


def test_merge_precedence_and_int_to_float():
    cfg = merge_config(default_config(), {"train": {"learning_rate": 1}})
    assert cfg["train"]["learning_rate"] == 1.0 and isinstance(cfg["train"]["learning_rate"], float)
    assert default_config()["train"]["learning_rate"] == 1e-2


@pytest.mark.parametrize(
    "override",
    [
        {"nope": {}},
        {"train": {"nope": 1}},
        {"train": {"epochs": "3"}},
        {"train": {"cagp": 1}},
        {"train": {"epochs": True}},
        {"train": 3},
    ],
)
def test_rejects(override):
    with pytest.raises(ConfigError):
        merge_config(default_config(), override)


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"epochs": 3}, "mtm": {"lambda_mix": 0.05}}))
    cfg = load_config(p)
    assert cfg["train"]["epochs"] == 3 and cfg["mtm"]["lambda_mix"] == 0.05
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)
    p.write_text("[]")
    with pytest.raises(ConfigError):
        load_config(p)


def test_toggles():
    cfg = apply_toggles(default_config(), "cagp=off, mtm=off")
    assert cfg["train"]["cagp"] is False and cfg["mtm"]["enabled"] is False
    assert cfg["train"]["pcap"] is True
    for bad in ("cagp", "foo=off", "cagp=maybe"):
        with pytest.raises(ConfigError):
            apply_toggles(default_config(), bad)


def test_invalid_values():
    with pytest.raises(ConfigError):
        resolve(merge_config(default_config(), {"train": {"epochs": 0}}), 0)
    with pytest.raises(ConfigError):
        resolve(merge_config(default_config(), {"mtm": {"split_layer": 9}}), 0)
    # an out-of-range split layer is fine while mixing is off
    resolve(merge_config(default_config(), {"mtm": {"split_layer": 9, "enabled": False}}), 0)
