import dataclasses
import hashlib
import json
import os
import typing

import yaml

from src.utils.errors import ConfigError

DEFAULT_CONFIG_PATH = "detnet_config.yaml"


def load_config(path):
    """
    Loads a YAML (or JSON) configuration file into a plain dictionary.

    Args:
        path (str): Path to a .yaml/.yml/.json file.

    Returns:
        dict: The parsed mapping. An empty file yields an empty dict.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Configuration file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        data = yaml.safe_load(f)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping, got {type(data).__name__}")
    return data


def _convert(tp, value, field_name):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp) and isinstance(value, dict):
        return from_dict(tp, value)
    if origin is tuple and isinstance(value, (list, tuple)):
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, field_name) for v in value)
        if args and len(args) == len(value):
            return tuple(_convert(a, v, field_name) for a, v in zip(args, value))
        return tuple(value)
    if origin is typing.Union:
        for arg in typing.get_args(tp):
            if arg is type(None):
                if value is None:
                    return None
                continue
            try:
                return _convert(arg, value, field_name)
            except (TypeError, ValueError):
                continue
        return value
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def from_dict(cls, mapping):
    """
    Builds a (possibly nested) dataclass from a mapping, converting lists to tuples.

    Unknown keys raise ConfigError so typos in config files never pass silently.
    """
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{cls.__name__}: expected a mapping, got {type(mapping).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _convert(hints.get(k, object), v, k) for k, v in mapping.items()}
    return cls(**kwargs)


def to_plain(obj):
    """Converts dataclasses / tuples / numpy scalars into JSON- and YAML-safe values."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if hasattr(obj, 'item') and callable(obj.item):
        return obj.item()
    return obj


def config_hash(*objs):
    """Stable 12-hex-digit identifier of one or more configuration objects."""
    payload = json.dumps([to_plain(o) for o in objs], sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:12]
