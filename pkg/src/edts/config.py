"""Flat key-value configuration shared by the CLI and experiment runners.

Files hold one `key = value` pair per line with `#` comments; every key has
an identically named CLI flag (dashes for underscores) that overrides it.
"""

from __future__ import annotations

from .dts import DtsAttributes
from .moo import ATTRIBUTE_ORDER, OptimizerConfig, default_bounds
from .netsim import Scenario, Topology

__all__ = [
    "ConfigError",
    "parse_kv_text",
    "parse_kv_file",
    "SCENARIO_KEYS",
    "ATTRIBUTE_KEYS",
    "OPTIMIZER_KEYS",
    "LOADER_KEYS",
    "ALL_KEYS",
    "scenario_from_config",
    "attrs_from_config",
    "optimizer_from_config",
]


class ConfigError(Exception):
    """Bad configuration input (unknown key, unparsable value, bad file)."""


def parse_kv_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def parse_kv_file(path) -> dict[str, str]:
    try:
        with open(path) as fh:
            return parse_kv_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _bool(text):
    t = str(text).strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"expected boolean, got {text!r}")


def _int(text):
    return int(float(text))


SCENARIO_KEYS = {
    "node_count": _int,
    "run_blocks": _int,
    "block_interval_ms": float,
    "tx_rate_per_s": float,
    "block_size": _int,
    "tx_size_bytes": _int,
    "amount_log_mean": float,
    "amount_log_sigma": float,
    "fee_cycle_amplitude": float,
    "fee_cycle_period_blocks": _int,
    "blocks_per_period": _int,
    "filter_epsilon": float,
    "filter_alpha": float,
    "degree": _int,
    "regions_file": str,
    "search_cap": _int,
}

ATTRIBUTE_KEYS = dict.fromkeys(ATTRIBUTE_ORDER, str)

OPTIMIZER_KEYS = {
    "population": _int,
    "generations": _int,
    "direction_count": _int,
    "sbx_eta": float,
    "sbx_prob": float,
    "pm_eta": float,
    "pm_prob": float,
}
for _attr in ATTRIBUTE_ORDER:
    OPTIMIZER_KEYS[f"{_attr}_min"] = float
    OPTIMIZER_KEYS[f"{_attr}_max"] = float

LOADER_KEYS = {
    "amount_column": str,
    "timestamp_column": str,
    "timestamp_unit": str,  # "s" or "ms"
}

ALL_KEYS = {**SCENARIO_KEYS, **ATTRIBUTE_KEYS, **OPTIMIZER_KEYS, **LOADER_KEYS}


def typed_config(raw: dict[str, str]) -> dict:
    """Validate keys and convert values to their declared types."""
    out = {}
    for key, text in raw.items():
        if key not in ALL_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = ALL_KEYS[key](text)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc
    return out


def scenario_from_config(cfg: dict, *, tx_stream=None) -> Scenario:
    kwargs = {}
    mapping = {
        "node_count": "node_count",
        "run_blocks": "run_blocks",
        "block_interval_ms": "block_interval_ms",
        "tx_rate_per_s": "tx_rate_per_s",
        "block_size": "block_size_cap",
        "tx_size_bytes": "tx_size_bytes",
        "amount_log_mean": "amount_log_mean",
        "amount_log_sigma": "amount_log_sigma",
        "fee_cycle_amplitude": "fee_cycle_amplitude",
        "fee_cycle_period_blocks": "fee_cycle_period_blocks",
        "blocks_per_period": "blocks_per_period",
        "filter_epsilon": "filter_epsilon",
        "filter_alpha": "filter_alpha",
        "degree": "degree",
        "search_cap": "search_cap",
    }
    for key, field_name in mapping.items():
        if key in cfg:
            kwargs[field_name] = cfg[key]
    if "regions_file" in cfg:
        kwargs["topology"] = Topology.from_file(cfg["regions_file"])
    if tx_stream is not None:
        times, amounts = tx_stream
        kwargs["tx_times_ms"] = tuple(int(t) for t in times)
        kwargs["tx_amounts"] = tuple(float(a) for a in amounts)
    try:
        return Scenario(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def attrs_from_config(cfg: dict) -> DtsAttributes:
    values = {k: cfg[k] for k in ATTRIBUTE_ORDER if k in cfg}
    try:
        return DtsAttributes.from_dict(values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def optimizer_from_config(cfg: dict, seed: int) -> OptimizerConfig:
    lower, upper = (list(b) for b in default_bounds())
    for i, attr in enumerate(ATTRIBUTE_ORDER):
        if f"{attr}_min" in cfg:
            lower[i] = cfg[f"{attr}_min"]
        if f"{attr}_max" in cfg:
            upper[i] = cfg[f"{attr}_max"]
    kwargs = {
        "lower_bounds": tuple(lower),
        "upper_bounds": tuple(upper),
        "seed": seed,
    }
    for key in ("population", "generations", "direction_count", "sbx_eta",
                "sbx_prob", "pm_eta", "pm_prob"):
        if key in cfg:
            kwargs[key] = cfg[key]
    try:
        return OptimizerConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
