"""Key=value run configuration shared by the CLI subcommands.

A file is plain ``key = value`` lines, optionally grouped under ``[section]``
headers (sections are merged). Recognised keys::

    preset          production | toy
    n q p sigma error_bound smudging_bound
    clients threshold rounds dim dropout seed mode clock deadline input_bound

Command-line flags override file values, which override the preset.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ParameterError
from .ring import RingParams
from .protocol.runner import MODES, RunConfig

SEED_ENV = "RSA_AGG_SEED"
PRESETS = ("production", "toy")

_RING_KEYS = {"n": int, "q": int, "p": int, "sigma": float, "error_bound": int, "smudging_bound": int}


def _int(text: str) -> int:
    # accept 2**20 style powers as well as plain integers
    text = text.strip().replace("_", "")
    if "**" in text:
        base, exp = text.split("**", 1)
        return int(base) ** int(exp)
    if "^" in text:
        base, exp = text.split("^", 1)
        return int(base) ** int(exp)
    return int(text, 0)


_RUN_KEYS = {
    "clients": _int,
    "threshold": _int,
    "rounds": _int,
    "dim": _int,
    "dropout": float,
    "seed": _int,
    "mode": str,
    "clock": str,
    "deadline": float,
    "input_bound": _int,
    "preset": str,
}


@dataclass
class Settings:
    preset: str = "production"
    clients: int = 8
    threshold: int = 6
    rounds: int = 20
    dim: int = 1000
    dropout: float = 0.0
    seed: int = 0
    mode: str = "rsa"
    clock: str = "simulated"
    deadline: float = 5.0
    input_bound: int | None = None
    ring: dict | None = None

    def ring_params(self) -> RingParams:
        if self.preset not in PRESETS:
            raise ParameterError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        base = RingParams.production if self.preset == "production" else RingParams.toy
        return base(**(self.ring or {}))

    def run_config(self, **extra) -> RunConfig:
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}")
        return RunConfig(
            self.clients,
            self.threshold,
            self.rounds,
            self.dim,
            self.ring_params(),
            seed=self.seed,
            dropout=self.dropout,
            mode=self.mode,
            clock=self.clock,
            input_bound=self.input_bound,
            **extra,
        )


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    text = Path(path).read_text()
    if not any(line.strip().startswith("[") for line in text.splitlines()):
        text = "[run]\n" + text
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ParameterError(f"cannot parse {path}: {exc}") from exc
    out: dict[str, str] = {}
    for section in parser.sections():
        out.update(parser[section])
    return out


def parse_values(raw: Mapping[str, str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, text in raw.items():
        key = key.strip().lower().replace("-", "_")
        try:
            if key in _RING_KEYS:
                conv = _int if _RING_KEYS[key] is int else float
                out.setdefault("ring", {})[key] = conv(text)
            elif key in _RUN_KEYS:
                out[key] = _RUN_KEYS[key](text.strip())
            else:
                raise ParameterError(f"unknown configuration key {key!r}")
        except ValueError as exc:
            raise ParameterError(f"bad value for {key!r}: {text!r}") from exc
    return out


def default_seed() -> int:
    text = os.environ.get(SEED_ENV)
    if text is None or text == "":
        return 0
    try:
        return int(text, 0)
    except ValueError as exc:
        raise ParameterError(f"{SEED_ENV} must be an integer, got {text!r}") from exc


def resolve(path: str | None, overrides: Mapping[str, Any]) -> Settings:
    """File values, then non-None ``overrides``; the seed falls back to the environment."""
    values: dict[str, Any] = parse_values(read_config_file(path)) if path else {}
    ring = dict(values.pop("ring", {}))
    for key, val in overrides.items():
        if val is None:
            continue
        if key in _RING_KEYS:
            ring[key] = val
        else:
            values[key] = val
    if "seed" not in values:
        values["seed"] = default_seed()
    known = {f.name for f in fields(Settings)}
    s = Settings(**{k: v for k, v in values.items() if k in known})
    s.ring = ring
    return s
