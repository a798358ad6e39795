"""Layered run configuration: defaults <- config file <- command-line flags.

Config files hold ``key = value`` lines; ``#`` starts a comment. Keys may use
dashes or underscores.
"""

import os
from dataclasses import fields

from .errors import ConfigError
from .training import TrainingConfig

DATA_ROOT_ENV = "SEQLAB_DATA_ROOT"

# settings outside TrainingConfig, with their defaults
EXTRA_DEFAULTS = {
    "data": None,
    "decimation": None,
    "standardize": True,
    "workers": 1,
}


def _training_defaults():
    cfg = TrainingConfig()
    return {f.name: getattr(cfg, f.name) for f in fields(TrainingConfig)}


def _normalize_key(key):
    return key.strip().replace("-", "_")


def _coerce(key, raw, default):
    if raw is None or isinstance(raw, (int, float, bool)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    if text.lower() in ("none", "null", ""):
        return None
    try:
        if isinstance(default, bool) or key == "standardize":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if key in ("grad_clip", "learning_rate", "dropout_p", "init_scale", "forget_bias"):
            return float(text)
        if key in ("data", "mode", "cell", "reduction"):
            return text
        if isinstance(default, int) or key in ("decimation",):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def read_config_file(path):
    values = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            values[_normalize_key(key)] = value.strip()
    return values


class RunConfig:
    """Effective settings plus where each one came from."""

    def __init__(self, file_path=None, flags=None, environ=None):
        environ = os.environ if environ is None else environ
        defaults = dict(_training_defaults(), **EXTRA_DEFAULTS)
        self.values = dict(defaults)
        self.sources = {k: "default" for k in defaults}
        if environ.get(DATA_ROOT_ENV):
            self.values["data"] = environ[DATA_ROOT_ENV]
            self.sources["data"] = "env"
        layers = []
        if file_path is not None:
            layers.append(("file", read_config_file(file_path)))
        layers.append(("flag", {_normalize_key(k): v for k, v in (flags or {}).items() if v is not None}))
        for source, values in layers:
            for key, raw in values.items():
                if key not in defaults:
                    raise ConfigError(f"unknown setting {key!r} ({source})")
                self.values[key] = _coerce(key, raw, defaults[key])
                self.sources[key] = source

    def __getitem__(self, key):
        return self.values[key]

    def training_config(self):
        names = {f.name for f in fields(TrainingConfig)}
        return TrainingConfig(**{k: v for k, v in self.values.items() if k in names})

    def provenance_lines(self):
        return [f"{k} = {self.values[k]!r} ({self.sources[k]})" for k in sorted(self.values)]
