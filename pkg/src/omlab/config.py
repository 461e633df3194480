"""Experiment configuration files.

Configs are INI-style text read with :mod:`configparser`::

    [space]
    kind = grid                  ; grid | atoms | paths | csv
    lower = -2, -2
    upper = 2, 2
    resolution = 401

    [fields]
    U = 0.3*sin(x1)              ; expression, or csv:<column>
    V = 0.5*(x1^2 + x2^2)

    [schedule]
    r_max = 0.2
    ratio = 0.85
    count = 8

    [pairs]
    pairs = 0, 0 -> 1, 0; 0, 0 -> 0.5, 0.5

    [run]
    p = 2

Every section and key is optional unless a subcommand needs it; unknown
sections or keys are rejected. Point lists separate points with ``;`` and
coordinates with ``,``; on path lattices and atom sets a point may also be
a label or an index.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

SCHEMA: dict[str, dict[str, type]] = {
    "space": {
        "kind": str,
        "lower": list,
        "upper": list,
        "resolution": list,
        "atoms": str,
        "masses": list,
        "labels": str,
        "csv": str,
        "steps": int,
        "terminal_time": float,
        "centers": str,
    },
    "fields": {"U": str, "U2": str, "V": str, "f": str, "h": str},
    "measure": {
        "samples": int,
        "seed": int,
        "partitions": int,
        "workers": int,
        "method": str,
    },
    "schedule": {
        "r_max": float,
        "ratio": float,
        "count": int,
        "multipliers": list,
        "outer": float,
    },
    "pairs": {"pairs": str},
    "run": {
        "p": float,
        "c": float,
        "anchor": str,
        "anchor2": str,
        "window": list,
        "alpha_grid": list,
        "tolerance": float,
        "sign": float,
        "threshold": float,
    },
    "output": {"dir": str},
}

POSITIVE = {
    ("space", "steps"),
    ("space", "terminal_time"),
    ("measure", "samples"),
    ("measure", "partitions"),
    ("measure", "workers"),
    ("schedule", "r_max"),
    ("schedule", "count"),
    ("schedule", "outer"),
    ("run", "tolerance"),
    ("run", "threshold"),
}

# workers never change results, so they stay out of the digest
_DIGEST_EXCLUDE = {("measure", "workers"), ("output", "dir")}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, dict[str, object]]
    base_dir: Path

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    def require(self, section: str, key: str):
        v = self.get(section, key)
        if v is None:
            raise ConfigError(f"missing required key {section}.{key}")
        return v

    def canonical(self) -> dict:
        """Values that determine results (worker count and output dir dropped)."""
        clean = {
            s: {k: v for k, v in kv.items() if (s, k) not in _DIGEST_EXCLUDE}
            for s, kv in self.values.items()
        }
        return {s: kv for s, kv in clean.items() if kv}

    @property
    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.values, sort_keys=True))


def _convert(section: str, key: str, raw: str):
    kind = SCHEMA[section][key]
    name = f"{section}.{key}"
    raw = raw.strip()
    try:
        if kind is int:
            v = int(raw)
        elif kind is float:
            v = float(raw)
        elif kind is list:
            v = [float(x) for x in raw.split(",") if x.strip()]
            if not v:
                raise ValueError("empty list")
        else:
            v = raw
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} ({exc})") from None
    if (section, key) in POSITIVE and not v > 0:
        raise ConfigError(f"{name}: must be positive, got {raw}")
    if section == "schedule" and key == "ratio" and not 0 < v < 1:
        raise ConfigError(f"{name}: must lie in (0, 1), got {raw}")
    if section == "schedule" and key == "multipliers" and any(c <= 0 for c in v):
        raise ConfigError(f"{name}: multipliers must be positive")
    if section == "run" and key == "window" and (len(v) != 2 or not 0 < v[0] < v[1]):
        raise ConfigError(f"{name}: need two radii 0 < lo < hi")
    if section == "space" and key == "resolution" and any(r < 2 or r != int(r) for r in v):
        raise ConfigError(f"{name}: need integers >= 2")
    if section == "space" and key == "kind" and v not in ("grid", "atoms", "paths", "csv"):
        raise ConfigError(f"{name}: unknown space kind {v!r}")
    if section == "measure" and key == "method" and v not in ("monte-carlo", "transfer"):
        raise ConfigError(f"{name}: unknown method {v!r}")
    return v


def parse_override(text: str) -> tuple[str, str, str]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    lhs, value = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    return section, key, value


def load_config(
    path: str | Path | None,
    overrides: list[str] = (),
    *,
    text: str | None = None,
) -> ExperimentConfig:
    """Parse, apply ``section.key=value`` overrides, and validate."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str
    base = Path(".")
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file {p} not found")
            parser.read_string(p.read_text(), source=str(p))
            base = p.parent
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    raw: dict[str, dict[str, str]] = {s: dict(parser[s]) for s in parser.sections()}
    for o in overrides:
        s, k, v = parse_override(o)
        raw.setdefault(s, {})[k] = v

    values: dict[str, dict[str, object]] = {}
    for section, items in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, val in items.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            values.setdefault(section, {})[key] = _convert(section, key, val)
    return ExperimentConfig(values, base)


def parse_point(text: str):
    """A point: comma-separated coordinates, an integer index, or a label."""
    t = text.strip()
    if "," in t:
        try:
            return [float(c) for c in t.split(",")]
        except ValueError:
            raise ConfigError(f"bad point {t!r}") from None
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return [float(t)]
    except ValueError:
        return t


def parse_pairs(text: str) -> list[tuple]:
    pairs = []
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        if "->" not in chunk:
            raise ConfigError(f"pairs.pairs: {chunk.strip()!r} lacks '->'")
        a, b = chunk.split("->", 1)
        pairs.append((parse_point(a), parse_point(b)))
    if not pairs:
        raise ConfigError("pairs.pairs: no pairs given")
    return pairs
