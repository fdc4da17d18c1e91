"""Per-CPU cache-level descriptions and the leakage table built from them."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .flush import FlushBehavior
from .leakage import leakage_for_cache_level
from .policy import PolicyConfig, PolicyError, parse_kind

LEVELS = ("L1", "L2", "L3")
TABLE_HEADER = ["cpu", "microarch", "level", "assoc", "policy", "flush_preserves_control", "leakage_bits"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CacheLevel:
    level: str
    assoc: int
    policy: str
    flush_preserves_control: bool

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig.of(self.policy, self.assoc)

    @property
    def behavior(self) -> FlushBehavior:
        return FlushBehavior.PRESERVES_CONTROL if self.flush_preserves_control else FlushBehavior.RESETS_CONTROL


@dataclass(frozen=True)
class CpuConfig:
    name: str
    microarch: str
    levels: tuple[CacheLevel, ...]


def _require(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise ConfigError(f"{where}: missing field {key!r}")
    value = obj[key]
    # bool is an int subclass; keep the two apart
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"{where}: field {key!r} must be {kind.__name__}")
    return value


def parse_cpu_config(data: object, where: str = "<config>") -> CpuConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: top level must be an object")
    name = _require(data, "name", str, where)
    microarch = _require(data, "microarch", str, where)
    raw_levels = _require(data, "levels", list, where)
    levels = []
    for i, lv in enumerate(raw_levels):
        at = f"{where}: levels[{i}]"
        if not isinstance(lv, dict):
            raise ConfigError(f"{at} must be an object")
        level = _require(lv, "level", str, at)
        if level not in LEVELS:
            raise ConfigError(f"{at}: level must be one of {', '.join(LEVELS)}")
        assoc = _require(lv, "assoc", int, at)
        policy = _require(lv, "policy", str, at)
        preserves = _require(lv, "flush_preserves_control", bool, at)
        try:
            parse_kind(policy)
            PolicyConfig.of(policy, assoc)
        except PolicyError as e:
            raise ConfigError(f"{at}: {e}") from None
        levels.append(CacheLevel(level, assoc, policy, preserves))
    return CpuConfig(name, microarch, tuple(levels))


def load_cpu_config(path: str | Path) -> CpuConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON: {e}") from None
    return parse_cpu_config(data, str(path))


def bundled_config_dir() -> Path:
    return Path(str(resources.files("flushleak") / "data" / "cpus"))


def load_config_dir(path: str | Path | None = None) -> list[CpuConfig]:
    directory = bundled_config_dir() if path in (None, "bundled", "bundled/") else Path(path)
    if not directory.is_dir():
        raise ConfigError(f"{directory} is not a directory")
    configs = [load_cpu_config(p) for p in sorted(directory.glob("*.json"))]
    if not configs:
        raise ConfigError(f"no *.json configs in {directory}")
    return sorted(configs, key=lambda c: c.name)


@dataclass(frozen=True)
class TableRow:
    cpu: str
    microarch: str
    level: str
    assoc: int
    policy: str
    flush_preserves_control: bool
    leakage_bits: float


def leakage_table(configs: list[CpuConfig]) -> list[TableRow]:
    rows = []
    for cfg in sorted(configs, key=lambda c: c.name):
        for lv in sorted(cfg.levels, key=lambda lv: lv.level):
            bits = leakage_for_cache_level(lv.policy_config(), lv.behavior)
            rows.append(TableRow(cfg.name, cfg.microarch, lv.level, lv.assoc, lv.policy, lv.flush_preserves_control, bits))
    return rows


def table_csv(rows: list[TableRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for r in rows:
        w.writerow([r.cpu, r.microarch, r.level, r.assoc, r.policy, str(r.flush_preserves_control).lower(), f"{r.leakage_bits:.3f}"])
    return buf.getvalue()
