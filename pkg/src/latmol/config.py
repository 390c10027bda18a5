"""Run configuration with a flat key = value config-file format.

Grammar (one assignment per line):

    file    := (line NEWLINE)*
    line    := '' | '#' comment | key WS* '=' WS* value
    key     := [a-z_]+          # a RunConfig field name
    value   := int | float | bool ('true'/'false') | bare string

Unknown keys are rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .data import DEFAULT_VOCABULARY


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    timesteps: int = 1000
    k: int = 1
    hidden_width: int = 32
    encoder_layers: int = 1
    decoder_layers: int = 2
    denoiser_layers: int = 3
    batch_size: int = 16
    lr: float = 1e-4
    iterations: int = 1000
    regularizer: str = "es"  # "es" | "kl"
    kl_weight: float = 0.01
    es_warmup: int = 1000
    conditional: bool = False
    sigma0: float = 0.01
    schedule: str = "polynomial"
    jitter: float = 0.02
    vocabulary: tuple = DEFAULT_VOCABULARY

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.sigma0 <= 0:
            raise ConfigError("sigma0 must be positive")
        if self.regularizer not in ("es", "kl"):
            raise ConfigError(f"unknown regularizer '{self.regularizer}'")


def _coerce(name, kind, raw):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        if kind is tuple or kind == "tuple":
            return tuple(raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"config key '{name}': cannot parse {raw!r}") from None


_KINDS = {"int": int, "float": float, "bool": bool, "tuple": tuple, "str": str}


def parse_config(text, **overrides):
    """Parse config text into a RunConfig; overrides win over file values."""
    values = {}
    known = {f.name: _KINDS.get(str(f.type), str) for f in fields(RunConfig)}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {ln}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ConfigError(f"config line {ln}: unknown key '{key}'")
        values[key] = _coerce(key, known[key], value)
    values.update(overrides)
    return RunConfig(**values)


def load_config(path, **overrides):
    with open(path) as fh:
        return parse_config(fh.read(), **overrides)
