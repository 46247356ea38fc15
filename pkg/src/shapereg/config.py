"""
Central configuration: environment variables from .env or the environment, plus the
YAML configuration files that carry algorithm parameters.

Parameter files are deep-merged over the shipped ``defaults.yaml``, so a user file only
needs the keys it changes.
"""

import dataclasses
import os
from importlib import resources
from pathlib import Path
from typing import Any

import toolz as tz
import yaml
from dotenv import load_dotenv

from shapereg.error import ConfigError

load_dotenv()

SEED = int(os.environ.get('SHAPEREG_SEED', '0'))
WORKERS = int(os.environ.get('SHAPEREG_WORKERS', '1'))
OUT_DIR = os.environ.get('SHAPEREG_OUT', 'out')
LOG_LEVEL = os.environ.get('SHAPEREG_LOG_LEVEL', 'DEBUG')

# sections read as plain mappings; the others are checked by ``build``
PLAIN_SECTIONS = ('normals', 'pipeline')


def deep_merge(*dicts: dict) -> dict:
    """Merge nested dicts, later values winning. Non-dict values are replaced wholesale."""

    def _combine(values):
        if all(isinstance(v, dict) for v in values):
            return deep_merge(*values)
        return values[-1]

    return tz.merge_with(_combine, *dicts)


def load_yaml(path: str | Path) -> dict:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f'Cannot read config file {path}: {e}') from e
    except yaml.YAMLError as e:
        raise ConfigError(f'Malformed config file {path}: {e}') from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f'Config file {path} must hold a mapping at the top level')
    return data


def dump_yaml(data: dict, path: str | Path) -> None:
    with open(path, 'w') as f:
        yaml.safe_dump(data, f, sort_keys=False)


def defaults() -> dict:
    """The shipped algorithm defaults."""
    text = resources.files('shapereg').joinpath('defaults.yaml').read_text()
    return yaml.safe_load(text)


def load_config(path: str | Path | None = None) -> dict:
    """Shipped defaults with the user's file (if any) merged on top."""
    base = defaults()
    if path is None:
        return base
    user = load_yaml(path)
    unknown = set(user) - set(base)
    if unknown:
        raise ConfigError(f'Unknown config sections: {sorted(unknown)}')
    for section in PLAIN_SECTIONS:
        values = user.get(section) or {}
        if not isinstance(values, dict):
            raise ConfigError(f'Config section {section} must be a mapping')
        extra = set(values) - set(base[section])
        if extra:
            raise ConfigError(f'Unknown keys in {section}: {sorted(extra)}')
    return deep_merge(base, user)


def build(cls, data: dict | None, **overrides) -> Any:
    """
    Instantiate a parameter dataclass from a plain dict.

    Unknown keys raise ConfigError; values the dataclass rejects in ``__post_init__`` are
    re-raised as ConfigError too, so callers only ever see one kind of config failure.
    """
    data = dict(data or {}) | {k: v for k, v in overrides.items() if v is not None}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f'Unknown keys for {cls.__name__}: {sorted(unknown)}')
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f'Invalid {cls.__name__}: {e}') from e
