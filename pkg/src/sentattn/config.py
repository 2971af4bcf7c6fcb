"""Flat ``key = value`` config files with environment and flag overrides.

Precedence, lowest first: built-in defaults, config file, ``SENTATTN_<KEY>``
environment variables, command-line flags.
"""
from __future__ import annotations

import os
from pathlib import Path

ENV_PREFIX = "SENTATTN_"


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key.replace("-", "_").lower()] = value
    return out


def read_config(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return parse_config_text(p.read_text(encoding="utf-8"), str(p))


def env_overrides(keys, environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for key in keys:
        name = ENV_PREFIX + key.upper()
        if name in environ:
            out[key] = environ[name]
    return out


def coerce(value, like):
    """Convert a string to the type of the default ``like``."""
    if not isinstance(value, str):
        return value
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if like is None:
        low = value.lower()
        if low in ("", "none", "null"):
            return None
        try:
            return int(value)
        except ValueError:
            return value
    return value


def resolve(defaults: dict, file_values: dict, flags: dict, environ=None) -> dict:
    """Merge the four layers; unknown file or env keys are rejected."""
    unknown = sorted(set(file_values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(defaults)
    for layer in (file_values, env_overrides(defaults, environ),
                  {k: v for k, v in flags.items() if v is not None and k in defaults}):
        for k, v in layer.items():
            try:
                merged[k] = coerce(v, defaults[k])
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {v!r}") from exc
    return merged


def dump_config(values: dict) -> str:
    return "".join(f"{k} = {'' if v is None else v}\n" for k, v in sorted(values.items()))
