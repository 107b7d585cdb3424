"""Run configuration: TOML files merged under command-line flags, and resolved-config snapshots."""

import json
import tomllib
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .errors import ConfigError

RUN_CONFIG_NAME = "run_config.json"
# argparse bookkeeping that never belongs in a snapshot
_INTERNAL_KEYS = {"func", "config", "command"}


def _normalize(key: str) -> str:
    return key.replace("-", "_")


def load_config_file(path: str | Path, command: str, known: dict[str, set[str]]) -> dict:
    """
    Option values for ``command`` from a TOML file.

    Top-level keys apply to every subcommand that has the option; a table named after a subcommand
    applies to that subcommand only and wins over top-level keys. Keys use option names with ``-`` or
    ``_``.

    Args:
        path: TOML file
        command: Subcommand being run
        known: Subcommand name -> option destinations it accepts

    Raises:
        ConfigError: Unreadable file, invalid TOML, or keys no subcommand accepts
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from e

    every_option = set().union(*known.values())
    top_level, section = {}, {}
    unknown = []
    for key, value in data.items():
        if isinstance(value, dict):
            table = _normalize(key)
            if table not in {_normalize(name) for name in known}:
                unknown.append(key)
                continue
            for sub_key, sub_value in value.items():
                name = _normalize(sub_key)
                if name not in known[_command_key(table, known)]:
                    unknown.append(f"{key}.{sub_key}")
                elif table == _normalize(command):
                    section[name] = sub_value
            continue
        name = _normalize(key)
        if name not in every_option:
            unknown.append(key)
        elif name in known[command]:
            top_level[name] = value
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {sorted(unknown)}")
    return {**top_level, **section}


def _command_key(table: str, known: dict[str, set[str]]) -> str:
    return next(name for name in known if _normalize(name) == table)


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


@dataclass(frozen=True)
class RunConfig:
    """Resolved options of one invocation; written next to its outputs."""

    command: str
    options: dict
    config_file: str | None = None

    @classmethod
    def from_namespace(cls, command: str, namespace) -> "RunConfig":
        options = {k: _jsonable(v) for k, v in sorted(vars(namespace).items()) if k not in _INTERNAL_KEYS}
        config_file = getattr(namespace, "config", None)
        return cls(command, options, str(config_file) if config_file else None)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "version": __version__,
            "config_file": self.config_file,
            "options": self.options,
        }

    def write(self, path: str | Path) -> Path:
        """Write to ``path``; a directory gets ``run_config.json`` inside it."""
        path = Path(path)
        if path.is_dir():
            path = path / RUN_CONFIG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path
