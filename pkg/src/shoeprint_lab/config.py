"""Flat ``section.key = value`` configuration files and run records."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

SEED_ENV = "SHOEPRINT_LAB_SEED"
RECORD_NAME = "resolved_config.txt"


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key or not all(key.split(".")):
            raise ConfigError(f"line {lineno}: key {key!r} must look like section.key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(values: dict) -> str:
    return "".join(f"{k} = {format_value(values[k])}\n" for k in sorted(values))


def coerce(text: str, like):
    """Convert ``text`` to the type of the default value ``like``."""
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if like and isinstance(like[0], bool):
                return tuple(coerce(t, True) for t in items)
            if like and isinstance(like[0], int):
                return tuple(int(t) for t in items)
            if like and isinstance(like[0], float):
                return tuple(float(t) for t in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"cannot read {text!r} as {type(like).__name__}") from None
    return text


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def dump(self) -> str:
        return dump_config({"run.command": self.command, **self.values})

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dump(), encoding="utf-8")
        return path


def resolve(command: str, defaults: dict, file_values: dict | None = None,
            flags: dict | None = None, env=None) -> RunConfig:
    """Merge defaults < config file < command-line flags.

    ``run.seed`` falls back to the environment seed when neither the file
    nor a flag sets it.
    """
    env = os.environ if env is None else env
    file_values = dict(file_values or {})
    recorded = file_values.pop("run.command", None)
    if recorded is not None and recorded != command:
        raise ConfigError(f"config was recorded for {recorded!r}, not {command!r}")
    unknown = sorted(set(file_values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    values = dict(defaults)
    for k, v in file_values.items():
        values[k] = coerce(v, defaults[k])
    if "run.seed" in values and "run.seed" not in file_values and env.get(SEED_ENV):
        values["run.seed"] = coerce(env[SEED_ENV], defaults["run.seed"])
    for k, v in (flags or {}).items():
        if v is None:
            continue
        if k not in defaults:
            raise ConfigError(f"unknown setting {k!r}")
        values[k] = coerce(v, defaults[k]) if isinstance(v, str) else v
    return RunConfig(command, values)


def load_file(path) -> dict:
    return parse_config(Path(path).read_text(encoding="utf-8"))
