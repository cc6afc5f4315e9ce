"""Declarative TOML configuration for scenarios and multi-split runs.

A file holds a ``[scenario]`` table, a ``[multisplit]`` table, or both.  Keys
mirror the fields of :class:`~distsi.sim.ScenarioConfig` and
:class:`~distsi.multisplit.MultisplitConfig`; unknown tables or keys are
rejected.  Every failure is raised as :class:`ConfigError` with the offending
field named as ``table.key``.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, InvalidInputError
from .multisplit import MultisplitConfig
from .sim import ScenarioConfig

_INT, _FLOAT, _STR = "integer", "number", "string"

SCENARIO_KEYS = {
    "family": _STR,
    "n_k": (_INT, "list of integers"),
    "n0": _INT,
    "K": _INT,
    "p": _INT,
    "ar_rho": _FLOAT,
    "s": _INT,
    "c": _FLOAT,
    "reps": _INT,
    "seed": _INT,
    "methods": "list of strings",
    "rule": _STR,
    "group_size": _INT,
    "design": _STR,
    "group_rho": _FLOAT,
    "lambda_grid": "list of numbers",
    "lambda_scale": _FLOAT,
    "n_tune": _INT,
    "alpha": _FLOAT,
    "dispersion": _STR,
}

MULTISPLIT_KEYS = {
    "B": _INT,
    "K": _INT,
    "n1": _INT,
    "gamma_min": _FLOAT,
    "alpha": _FLOAT,
    "seed": _INT,
    "lambda_scale": _FLOAT,
}

TABLES = {"scenario": (SCENARIO_KEYS, ScenarioConfig), "multisplit": (MULTISPLIT_KEYS, MultisplitConfig)}


@dataclass(frozen=True)
class LoadedConfig:
    scenario: Optional[ScenarioConfig] = None
    multisplit: Optional[MultisplitConfig] = None


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _matches(value, kind):
    if kind == _INT:
        return _is_int(value)
    if kind == _FLOAT:
        return _is_int(value) or isinstance(value, float)
    if kind == _STR:
        return isinstance(value, str)
    if not isinstance(value, list) or not value:
        return False
    elem = {"list of integers": _INT, "list of numbers": _FLOAT, "list of strings": _STR}[kind]
    return all(_matches(v, elem) for v in value)


def _check_table(name, table):
    keys, cls = TABLES[name]
    if not isinstance(table, dict):
        raise ConfigError(f"{name}: expected a table")
    for key, value in table.items():
        if key not in keys:
            raise ConfigError(f"{name}.{key}: unknown key")
        kinds = keys[key] if isinstance(keys[key], tuple) else (keys[key],)
        if not any(_matches(value, k) for k in kinds):
            raise ConfigError(f"{name}.{key}: expected {' or '.join(kinds)}, got {value!r}")
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in table.items()}
    try:
        return cls(**kwargs)
    except InvalidInputError as exc:
        field = next((k for k in table if str(exc).startswith(k)), None)
        prefix = f"{name}.{field}" if field else name
        raise ConfigError(f"{prefix}: {exc}") from exc


def parse_config(text: str) -> LoadedConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # the decoder reports line and column
        raise ConfigError(f"malformed config: {exc}") from exc
    for name in doc:
        if name not in TABLES:
            raise ConfigError(f"{name}: unknown table (expected scenario or multisplit)")
    if not doc:
        raise ConfigError("config defines neither [scenario] nor [multisplit]")
    return LoadedConfig(**{name: _check_table(name, table) for name, table in doc.items()})


def load_config(path) -> LoadedConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text)


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``scenario1.toml``."""
    path = Path(__file__).parent / "configs" / name
    if not path.is_file():
        raise ConfigError(f"no bundled config named {name}")
    return path
