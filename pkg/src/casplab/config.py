"""Run configuration: a nested JSON-shaped dict with strict keys.

Sections: data, protocol, model, pretrain, train, mtm. The component
switches live in ``train.cagp``, ``train.pcap``, ``train.cdap`` and
``mtm.enabled``. Precedence, lowest to highest: built-in defaults, the
``--config`` file, then command-line flags. Unknown sections or keys are an
error.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path

from .harness.data import GlyphSpec
from .harness.sessions import Protocol
from .harness.training import PretrainConfig, TrainConfig
from .mixup import MixupConfig
from .vit import VitConfig

__all__ = ["ConfigError", "default_config", "merge_config", "load_config", "resolve", "Resolved", "apply_toggles"]


class ConfigError(ValueError):
    pass


def _defaults(cls, drop=()) -> dict:
    return {k: v for k, v in asdict(cls()).items() if k not in drop}


def default_config() -> dict:
    # run-level seed comes from --seed, not from the file
    return {
        "data": {"seed": 0, **_defaults(GlyphSpec)},
        "protocol": _defaults(Protocol),
        "model": _defaults(VitConfig),
        "pretrain": _defaults(PretrainConfig),
        "train": _defaults(TrainConfig, drop=("seed", "mtm")),
        "mtm": _defaults(MixupConfig),
    }


def merge_config(base: dict, override: dict, where: str = "config") -> dict:
    """Deep-merge ``override`` into a copy of ``base``; reject unknown keys and type changes."""
    out = copy.deepcopy(base)
    for section, values in override.items():
        if section not in out:
            raise ConfigError(f"{where}: unknown section {section!r} (known: {', '.join(out)})")
        if not isinstance(values, dict):
            raise ConfigError(f"{where}: section {section!r} must be an object")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"{where}: unknown key {section}.{key}")
            old = out[section][key]
            if isinstance(old, bool) != isinstance(value, bool):
                raise ConfigError(f"{where}: {section}.{key} expects {type(old).__name__}, got {value!r}")
            if isinstance(old, float) and isinstance(value, int):
                value = float(value)
            elif not isinstance(value, type(old)):
                raise ConfigError(f"{where}: {section}.{key} expects {type(old).__name__}, got {value!r}")
            out[section][key] = value
    return out


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return merge_config(default_config(), raw, where=str(path))


def apply_toggles(config: dict, spec: str) -> dict:
    """Apply ``cagp=off,mtm=on`` style component switches."""
    flags = {}
    for item in filter(None, (s.strip() for s in spec.split(","))):
        name, sep, state = item.partition("=")
        if not sep or name not in ("cagp", "pcap", "cdap", "mtm"):
            raise ConfigError(f"bad toggle {item!r}; expected one of cagp/pcap/cdap/mtm=on|off")
        if state not in ("on", "off"):
            raise ConfigError(f"bad toggle state {state!r} for {name}")
        flags[name] = state == "on"
    override = {"train": {k: v for k, v in flags.items() if k != "mtm"}}
    if "mtm" in flags:
        override["mtm"] = {"enabled": flags["mtm"]}
    return merge_config(config, override, where="--toggle")


class Resolved:
    """Typed views of a config dict for one run seed."""

    def __init__(self, config: dict, seed: int):
        self.config = config
        self.seed = int(seed)
        c = config
        try:
            data = dict(c["data"])
            self.data_seed = data.pop("seed")
            self.glyphs = GlyphSpec(**data)
            self.protocol = Protocol(**c["protocol"])
            self.model = VitConfig(**c["model"])
            self.pretrain = PretrainConfig(**c["pretrain"])
            self.mixup = MixupConfig(**c["mtm"])
            self.train = TrainConfig(seed=self.seed, mtm=self.mixup.enabled, **c["train"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.train.mtm:
            try:
                self.mixup.validate(self.model.depth)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc


def resolve(config: dict, seed: int) -> Resolved:
    return Resolved(config, seed)
