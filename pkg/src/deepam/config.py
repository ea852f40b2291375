"""Key-value run configuration.

Config files are plain ``key = value`` lines (``#`` comments allowed).
Every CLI run resolves its options as defaults < config file < explicit
flags and writes the result to ``config.resolved``, which can be fed back
via ``--config`` to re-execute the run exactly.
"""

from __future__ import annotations

from dataclasses import dataclass


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    name: str  # underscore form; the CLI flag is --with-dashes
    type: type = str
    default: object = None
    help: str = ""
    required: bool = False
    choices: tuple = ()

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def parse_kv_file(path) -> dict:
    out = {}
    with open(path, "r") as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def coerce(opt: Opt, raw: str):
    if raw == "":
        return None
    try:
        if opt.type is int:
            return int(raw)
        if opt.type is float:
            return float(raw)
        value = raw
    except ValueError as e:
        raise ConfigError(f"option {opt.name}: cannot parse {raw!r} as {opt.type.__name__}") from e
    if opt.choices and value not in opt.choices:
        raise ConfigError(f"option {opt.name}: {value!r} not among {opt.choices}")
    return value


def resolve(command: str, schema: list[Opt], provided: dict, config_path=None) -> dict:
    """defaults <- config file <- explicit flags; validates required keys."""
    resolved = {opt.name: opt.default for opt in schema}
    by_name = {opt.name: opt for opt in schema}
    if config_path:
        for key, raw in parse_kv_file(config_path).items():
            if key == "command":
                if raw != command:
                    raise ConfigError(
                        f"config file was written by command {raw!r}, not {command!r}"
                    )
                continue
            if key not in by_name:
                raise ConfigError(f"unknown config key {key!r} for command {command!r}")
            resolved[key] = coerce(by_name[key], raw)
    for key, value in provided.items():
        if key in by_name:
            if by_name[key].choices and value not in by_name[key].choices:
                raise ConfigError(f"option {key}: {value!r} not among {by_name[key].choices}")
            resolved[key] = value
    for opt in schema:
        if opt.required and resolved[opt.name] in (None, ""):
            raise ConfigError(f"missing required option {opt.flag}")
    return resolved


def write_resolved(path, command: str, resolved: dict) -> None:
    lines = [f"command = {command}"]
    for key in sorted(resolved):
        lines.append(f"{key} = {format_value(resolved[key])}")
    tmp = str(path) + ".partial"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    import os

    os.replace(tmp, path)
