"""Run configuration: file parsing, validation, and run directories.

A config file is either a JSON object or `key = value` lines (blank lines
and `#` comments allowed; values are JSON literals where they parse, raw
strings otherwise). Flags override file values, which override defaults.
Every key is validated against the command's schema; unknown keys and
out-of-range values are rejected naming the offending key.

A run directory has a fixed layout the tests can rely on:

    out/
      config.resolved     fully-resolved config + tool version
      checkpoints/
      reports/
      figures/
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .errors import ConfigError

PRESET_NAMES = ("ti", "s", "b", "micro")


@dataclass(frozen=True)
class Field:
    kind: str  # "str" | "int" | "float" | "bool" | "choice"
    default: object = None
    required: bool = False
    choices: tuple = ()
    lo: float | None = None  # numeric range, inclusive unless *_open
    hi: float | None = None
    lo_open: bool = False
    hi_open: bool = False


def _num(kind: str, key: str, raw) -> float | int:
    if isinstance(raw, bool):
        raise ConfigError(f"{key} must be a number, got a boolean")
    if kind == "int":
        if isinstance(raw, float) and not raw.is_integer():
            raise ConfigError(f"{key} must be an integer, got {raw}")
        try:
            return int(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be an integer, got {raw!r}") from None
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be a number, got {raw!r}") from None


def _check_range(key: str, field: Field, value) -> None:
    if field.lo is not None:
        if value < field.lo or (field.lo_open and value == field.lo):
            raise ConfigError(f"{key} out of range: {value}")
    if field.hi is not None:
        if value > field.hi or (field.hi_open and value == field.hi):
            raise ConfigError(f"{key} out of range: {value}")


def _coerce(key: str, field: Field, raw):
    if raw is None:
        return None
    if field.kind == "str":
        return str(raw)
    if field.kind == "choice":
        val = str(raw)
        if val not in field.choices:
            raise ConfigError(f"{key} must be one of {field.choices}, got {val!r}")
        return val
    if field.kind == "bool":
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        raise ConfigError(f"{key} must be true or false, got {raw!r}")
    value = _num(field.kind, key, raw)
    _check_range(key, field, value)
    return value


def _common() -> dict[str, Field]:
    return {
        "seed": Field("int", default=0, lo=0),
        "threads": Field("int", default=1, lo=1),
    }


def _data_keys() -> dict[str, Field]:
    return {
        "manifest": Field("str", required=True),
        "data_fraction": Field("float", default=1.0, lo=0.0, hi=1.0, lo_open=True),
        "image_size": Field("int", lo=16),
        "uncertain_label": Field("choice", default="one", choices=("one", "zero")),
    }


SCHEMAS: dict[str, dict[str, Field]] = {
    "pretrain": {
        **_common(),
        **_data_keys(),
        "tokenizer_ckpt": Field("str", required=True),
        "preset": Field("choice", default="s", choices=PRESET_NAMES),
        "epochs": Field("int", default=1, lo=1),
        "batch_size": Field("int", default=128, lo=1),
        "mask_ratio": Field("float", default=0.3, lo=0.0, hi=1.0, lo_open=True, hi_open=True),
        "crop_scale_min": Field("float", default=0.2, lo=0.0, hi=1.0, lo_open=True),
        "base_lr": Field("float", default=3e-4, lo=0.0, lo_open=True),
        "min_lr": Field("float", default=0.0, lo=0.0),
        "weight_decay": Field("float", default=0.0, lo=0.0),
        "augment": Field("bool", default=True),
    },
    "finetune-cls": {
        **_common(),
        **_data_keys(),
        "ckpt": Field("str"),
        "preset": Field("choice", default="s", choices=PRESET_NAMES),
        "task": Field("choice", default="multi", choices=("multi", "single")),
        "epochs": Field("int", default=10, lo=1),
        "batch_size": Field("int", default=128, lo=1),
        "lr": Field("float", default=1e-3, lo=0.0, lo_open=True),
        "llrd_decay": Field("float", default=0.55, lo=0.0, hi=1.0, lo_open=True),
        "dropout": Field("float", default=0.2, lo=0.0, hi=1.0, hi_open=True),
        "weight_decay": Field("float", default=0.0, lo=0.0),
        "crop_scale_min": Field("float", default=0.2, lo=0.0, hi=1.0, lo_open=True),
        "augment": Field("bool", default=True),
    },
    "finetune-seg": {
        **_common(),
        **_data_keys(),
        "ckpt": Field("str"),
        "preset": Field("choice", default="s", choices=PRESET_NAMES),
        "iterations": Field("int", default=1000, lo=1),
        "batch_size": Field("int", default=8, lo=1),
        "num_classes": Field("int", default=2, lo=2),
        "decoder_dim": Field("int", default=256, lo=8),
        "lr": Field("float", default=2e-4, lo=0.0, lo_open=True),
        "llrd_decay": Field("float", default=0.85, lo=0.0, hi=1.0, lo_open=True),
        "weight_decay": Field("float", default=0.0, lo=0.0),
        "eval_every": Field("int", lo=1),
    },
    "eval-cls": {
        **_common(),
        "manifest": Field("str", required=True),
        "ckpt": Field("str", required=True),
        "split": Field("choice", default="test", choices=("train", "val", "test")),
        "batch_size": Field("int", default=64, lo=1),
        "uncertain_label": Field("choice", default="one", choices=("one", "zero")),
    },
    "eval-seg": {
        **_common(),
        "manifest": Field("str", required=True),
        "ckpt": Field("str", required=True),
        "split": Field("choice", default="test", choices=("train", "val", "test")),
        "batch_size": Field("int", default=4, lo=1),
    },
    "cam": {
        **_common(),
        "manifest": Field("str", required=True),
        "ckpt": Field("str", required=True),
        "split": Field("choice", default="test", choices=("train", "val", "test")),
        # negative means: use each row's own label as the heatmap target
        "target_class": Field("int", default=-1, lo=-1),
        "alpha": Field("float", default=0.5, lo=0.0, hi=1.0),
        "figures": Field("bool", default=True),
    },
    "attn": {
        **_common(),
        "ckpt": Field("str", required=True),
        "image": Field("str", required=True),
        "points": Field("str", required=True),  # "y,x" pairs joined by ";"
        "block": Field("int", default=-1),
        "alpha": Field("float", default=0.5, lo=0.0, hi=1.0),
    },
    "synth": {
        **_common(),
        "task": Field("choice", default="cls", choices=("cls", "seg", "loc")),
        "count": Field("int", default=8, lo=1),
        "size": Field("int", default=64, lo=16),
        "noise": Field("float", default=0.08, lo=0.0),
    },
    "stats": {
        **_common(),
        "manifest": Field("str", required=True),
    },
}

# The segmentation path and the crop-based paths want different resolutions.
IMAGE_SIZE_DEFAULTS = {"pretrain": 224, "finetune-cls": 224, "finetune-seg": 512}


@dataclass(frozen=True)
class RunConfig:
    command: str
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)


def parse_config_file(path) -> dict:
    """JSON object or `key = value` lines; values parsed as JSON when possible."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: JSON config must be an object")
        return data
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw  # unquoted strings (paths, names)
    return out


def resolve_config(command: str, file_values: dict, flag_values: dict) -> RunConfig:
    """Merge defaults < file < flags and validate against the schema."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    schema = SCHEMAS[command]
    for key in file_values:
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} for command {command}")
    merged = {key: field.default for key, field in schema.items()}
    if command in IMAGE_SIZE_DEFAULTS:
        merged["image_size"] = IMAGE_SIZE_DEFAULTS[command]
    merged.update(file_values)
    for key, val in flag_values.items():
        if val is None:
            continue
        if key not in schema:
            raise ConfigError(f"flag {key!r} does not apply to command {command}")
        merged[key] = val
    values = {}
    for key, field in schema.items():
        val = _coerce(key, field, merged[key])
        if val is None and field.required:
            raise ConfigError(f"{command} requires {key}")
        values[key] = val
    return RunConfig(command, values)


def render_config(cfg: RunConfig) -> str:
    lines = [f"command = {cfg.command}", f"version = {__version__}"]
    for key in sorted(cfg.values):
        lines.append(f"{key} = {json.dumps(cfg.values[key])}")
    return "\n".join(lines) + "\n"


def make_run_dir(out, cfg: RunConfig) -> Path:
    """Create the fixed layout and record the resolved config."""
    out = Path(out)
    for sub in ("checkpoints", "reports", "figures"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(render_config(cfg))
    return out
