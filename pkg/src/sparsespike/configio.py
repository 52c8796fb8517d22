"""Key-value config files and environment overrides for the CLI.

Format: one `dotted.key = value` per line, `#` starts a full-line comment.
Values parse as fractions (2/255), ints, floats, booleans, comma lists, or
strings. Dotted keys nest; `SPARSESPIKE_A__B=v` environment variables map to
`a.b = v` and win over the file.
"""

from __future__ import annotations

import os

ENV_PREFIX = "SPARSESPIKE_"


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    if "/" in text:
        num, _, den = text.partition("/")
        try:
            return float(int(num)) / float(int(den))
        except ValueError:
            return text
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text: str) -> dict:
    flat: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = parse_value(value)
    return nest(flat)


def load_config(path) -> dict:
    with open(path) as f:
        return parse_config_text(f.read())


def nest(flat: dict) -> dict:
    root: dict = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = root
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"key {key!r} conflicts with a scalar value")
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"key {key!r} conflicts with a nested section")
        node[parts[-1]] = value
    return root


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    flat = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX) :].lower().replace("__", ".")
        flat[key] = parse_value(value)
    return nest(flat)


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out
