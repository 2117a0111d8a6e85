"""Strict JSON run configuration shared by every subcommand.

A config file is a JSON object with optional sections ``train``,
``encoder``, ``augment``, ``synth``, ``eval``, ``ablate`` and an
optional top-level ``out``. Unknown keys anywhere are errors: a typo
must never silently fall back to a default. The fully resolved
configuration (defaults included) is echoed into the output directory
so every run carries its own provenance.
"""

from __future__ import annotations

import dataclasses
import json
import os

from .augment import AugmentConfig
from .data import SynthConfig
from .encoder import EncoderConfig
from .evaluate import EvalConfig
from .trainer import MIXUP_MODES, TrainConfig


class ConfigError(ValueError):
    """Malformed run configuration."""


ABLATE_DEFAULTS = {
    "mixup_modes": list(MIXUP_MODES),
    "queue_sizes": [2048],
    "augment_disable": [],
    "seeds": [0],
    "epochs": 15,
}


def _build_section(cls, data, where, **forced):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; "
                          f"valid keys: {sorted(fields)}")
    kwargs = {}
    for key, value in data.items():
        f = fields[key]
        has_tuple_default = isinstance(f.default, tuple)
        if isinstance(value, list) and has_tuple_default:
            value = tuple(value)
        kwargs[key] = value
    kwargs.update(forced)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


class RunConfig:
    """Resolved sections plus the output directory."""

    def __init__(self, train, synth, eval_cfg, ablate, out=None,
                 explicit=()):
        self.train = train  # TrainConfig, encoder/augment embedded
        self.synth = synth
        self.eval = eval_cfg
        self.ablate = ablate
        self.out = out
        # Sections actually present in the file. Commands that have
        # their own defaults (fine-tune) only honor eval when spelled out.
        self.explicit = frozenset(explicit)

    def resolved(self):
        """Every field, defaults included, as plain JSON data.

        The output directory is deliberately omitted so the echoed
        file is location independent: identical runs written to two
        places leave byte-identical trees.
        """
        def plain(obj):
            if dataclasses.is_dataclass(obj):
                return {k: plain(v) for k, v in
                        dataclasses.asdict(obj).items()}
            if isinstance(obj, tuple):
                return [plain(v) for v in obj]
            if isinstance(obj, dict):
                return {k: plain(v) for k, v in obj.items()}
            return obj
        train = plain(self.train)
        encoder = train.pop("encoder")
        augment = train.pop("augment")
        return {"train": train, "encoder": encoder, "augment": augment,
                "synth": plain(self.synth), "eval": plain(self.eval),
                "ablate": plain(self.ablate)}

    def echo(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "config.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.resolved(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


_SECTIONS = ("train", "encoder", "augment", "synth", "eval", "ablate", "out")


def load_run_config(path=None, seed=None, out=None):
    """Parse a config file; ``seed``/``out`` override file values."""
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"{path}: unknown sections {unknown}; "
                          f"valid sections: {sorted(_SECTIONS)}")
    train_raw = dict(raw.get("train", {}))
    for embedded in ("encoder", "augment"):
        if embedded in train_raw:
            raise ConfigError(f"train.{embedded}: move this into the "
                              f"top-level {embedded!r} section")
    encoder = _build_section(EncoderConfig, raw.get("encoder", {}), "encoder")
    augment = _build_section(AugmentConfig, raw.get("augment", {}), "augment")
    forced = {"encoder": encoder, "augment": augment}
    if seed is not None:
        forced["seed"] = seed
    train = _build_section(TrainConfig, train_raw, "train", **forced)
    synth_forced = {"seed": seed} if seed is not None else {}
    synth = _build_section(SynthConfig, raw.get("synth", {}), "synth",
                           **synth_forced)
    eval_forced = {"seed": seed} if seed is not None else {}
    eval_cfg = _build_section(EvalConfig, raw.get("eval", {}), "eval",
                              **eval_forced)
    ablate_raw = raw.get("ablate", {})
    unknown = sorted(set(ablate_raw) - set(ABLATE_DEFAULTS))
    if unknown:
        raise ConfigError(f"ablate: unknown keys {unknown}; "
                          f"valid keys: {sorted(ABLATE_DEFAULTS)}")
    ablate = dict(ABLATE_DEFAULTS)
    ablate.update(ablate_raw)
    bad_modes = [m for m in ablate["mixup_modes"] if m not in MIXUP_MODES]
    if bad_modes:
        raise ConfigError(f"ablate.mixup_modes: unknown modes {bad_modes}")
    out_dir = out if out is not None else raw.get("out")
    return RunConfig(train, synth, eval_cfg, ablate, out=out_dir,
                     explicit=set(raw) - {"out"})
