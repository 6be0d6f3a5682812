"""YAML config files and dotted overrides for :class:`SimConfig`.

Sections are ``sim``, ``protocol``, ``radio``, ``timing``, ``traffic``,
``channel`` and ``phy``. Values resolve as file < ``--set`` overrides <
``--seed``. Every key is checked against the schema below.
"""

from __future__ import annotations

import dataclasses
import functools
import typing
import warnings
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

import yaml

from .engine import ChannelConfig, PhyConfig, RadioConfig, SimConfig, TimingConfig
from .protocols import BackoffParams
from .traffic import TrafficConfig


class ConfigError(ValueError):
    """Bad key, value or file content."""


# section -> key -> (target object, field name)
_SIM_KEYS = {
    "n_nodes": "n_nodes",
    "n_freq_channels": "n_freq_channels",
    "max_cycles": "max_cycles",
    "warmup_cycles": "warmup_cycles",
    "seed": "seed",
    "drain": "drain",
    "drain_limit": "drain_limit",
}
_PROTOCOL_KEYS = {
    "name": ("sim", "protocol"),
    "npt": ("sim", "npt"),
    "initial_window": ("backoff", "initial_window"),
    "max_exponent": ("backoff", "max_exponent"),
    "backoff_cap": ("backoff", "cap"),
}
_NESTED = {
    "radio": RadioConfig,
    "timing": TimingConfig,
    "channel": ChannelConfig,
    "phy": PhyConfig,
}
# the traffic seed and size follow the simulation
_TRAFFIC_EXCLUDED = ("n_nodes", "seed")


def valid_keys() -> List[str]:
    keys = [f"sim.{k}" for k in _SIM_KEYS] + [f"protocol.{k}" for k in _PROTOCOL_KEYS]
    keys += [f"traffic.{f.name}" for f in dataclasses.fields(TrafficConfig) if f.name not in _TRAFFIC_EXCLUDED]
    for section, cls in _NESTED.items():
        keys += [f"{section}.{f.name}" for f in dataclasses.fields(cls)]
    return keys


def _unknown(key: str) -> ConfigError:
    return ConfigError(f"unknown config key {key!r}; valid keys are: {', '.join(valid_keys())}")


def _flatten(doc: Mapping, where: str = "") -> Dict[str, Any]:
    out = {}
    if not isinstance(doc, Mapping):
        raise ConfigError(f"expected a mapping{' at ' + where if where else ''}")
    for section, body in doc.items():
        if not isinstance(body, Mapping):
            raise ConfigError(f"section {section!r} must be a mapping of keys to values")
        for k, v in body.items():
            out[f"{section}.{k}"] = v
    return out


def parse_override(text: str) -> Tuple[str, Any]:
    """``section.key=value`` with the value parsed as a YAML scalar."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of {key!r}: {exc}") from None
    return key, value


def _check_hurst(value) -> float:
    try:
        h = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"traffic.hurst must be a number, got {value!r}") from None
    if not 0.0 < h <= 1.0:
        raise ConfigError(f"traffic.hurst={h} is outside (0, 1]")
    if h < 0.5:
        warnings.warn(f"traffic.hurst={h} is below 0.5; the generator cannot produce anti-persistent traffic, using 0.5")
        h = 0.5
    return h


@functools.lru_cache(maxsize=None)
def _field_types(cls) -> Dict[str, Any]:
    return typing.get_type_hints(cls)


def _coerce(cls, name: str, key: str, value):
    """Convert a parsed value to the field's declared type (YAML reads ``1e-6`` as a string)."""
    hint = _field_types(cls)[name]
    args = typing.get_args(hint)
    optional = type(None) in args
    if optional:
        hint = next(a for a in args if a is not type(None))
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key} cannot be empty")
    try:
        if hint is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise ValueError
        if isinstance(value, bool):
            raise ValueError
        if hint is int:
            if isinstance(value, float):
                if not value.is_integer():
                    raise ValueError
                return int(value)
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} expects {hint.__name__}, got {value!r}") from None
    return value


def build_config(values: Mapping[str, Any], base: Optional[SimConfig] = None) -> SimConfig:
    """Apply flat ``section.key`` values on top of ``base`` (default SimConfig)."""
    base = base or SimConfig()
    sim: Dict[str, Any] = {}
    backoff: Dict[str, Any] = {}
    nested: Dict[str, Dict[str, Any]] = {s: {} for s in list(_NESTED) + ["traffic"]}
    allowed = set(valid_keys())
    for key, value in values.items():
        if key not in allowed:
            raise _unknown(key)
        section, name = key.split(".", 1)
        if section == "sim":
            sim[_SIM_KEYS[name]] = _coerce(SimConfig, _SIM_KEYS[name], key, value)
        elif section == "protocol":
            target, field = _PROTOCOL_KEYS[name]
            if target == "sim":
                sim[field] = _coerce(SimConfig, field, key, value)
            else:
                backoff[field] = _coerce(BackoffParams, field, key, value)
        else:
            if key == "traffic.hurst":
                value = _check_hurst(value)
            cls = TrafficConfig if section == "traffic" else _NESTED[section]
            nested[section][name] = _coerce(cls, name, key, value)
    try:
        kwargs = dict(sim)
        for section in _NESTED:
            if nested[section]:
                kwargs[section] = dataclasses.replace(getattr(base, section), **nested[section])
        if nested["traffic"]:
            kwargs["traffic"] = dataclasses.replace(base.traffic, **nested["traffic"])
        if backoff:
            kwargs["backoff"] = dataclasses.replace(base.backoff, **backoff)
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(
    path: Optional[str] = None, overrides: Iterable[str] = (), seed: Optional[int] = None
) -> SimConfig:
    values: Dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            try:
                doc = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: not valid YAML: {exc}") from None
        values.update(_flatten(doc or {}))
    for text in overrides:
        k, v = parse_override(text)
        values[k] = v
    if seed is not None:
        values["sim.seed"] = seed
    return build_config(values)


def config_to_dict(cfg: SimConfig) -> Dict[str, Dict[str, Any]]:
    """Nested dict in the file schema; round-trips through :func:`build_config`."""
    out: Dict[str, Dict[str, Any]] = {"sim": {k: getattr(cfg, f) for k, f in _SIM_KEYS.items()}}
    proto = {}
    for k, (target, f) in _PROTOCOL_KEYS.items():
        proto[k] = getattr(cfg if target == "sim" else cfg.backoff, f)
    out["protocol"] = proto
    out["traffic"] = {
        f.name: getattr(cfg.traffic, f.name) for f in dataclasses.fields(TrafficConfig) if f.name not in _TRAFFIC_EXCLUDED
    }
    for section in _NESTED:
        obj = getattr(cfg, section)
        out[section] = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    return out


def flat_items(cfg: SimConfig) -> List[Tuple[str, Any]]:
    return [(f"{s}.{k}", v) for s, body in config_to_dict(cfg).items() for k, v in body.items()]


def header_lines(cfg: SimConfig, extra: Iterable[str] = ()) -> List[str]:
    """Reproducibility header: one ``key=value`` per resolved config entry."""
    return list(extra) + [f"{k}={v!r}" for k, v in flat_items(cfg)]


def dump_yaml(cfg: SimConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
