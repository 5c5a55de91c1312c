"""Flat, typed ``section.key = value`` run configuration.

Example::

    # base settings
    include "base.cfg"
    seed = 3
    schedule.T = 1000
    train.lr = 0.002
    sweep.w_cont = [5.0, 7.0, 9.0]
    clients.asr_primary = "replay:fixtures/primary.json"

Values are Python literals (numbers, quoted strings, lists, booleans).  Later
assignments win; ``include`` paths are relative to the including file.
"""
from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_origin, get_type_hints

from .datapipe.curate import CurationRules
from .oracle import WorldSpec
from .scorenet import NetConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 128
    lr: float = 2e-3
    dropout_p: float = 0.1
    log_every: int = 250
    eval_samples: int = 4000


@dataclass(frozen=True)
class GuidanceConfig:
    w_desc: float = 7.0
    w_cont: float = 7.0


@dataclass(frozen=True)
class SampleConfig:
    mode: str = "oracle"  # or "checkpoint"
    desc: str = "d0"
    cont: str = "c2"
    n_samples: int = 1000
    n_steps: int = 100
    eta: float = 0.0
    svg: bool = True


@dataclass(frozen=True)
class SweepConfig:
    mode: str = "oracle"
    desc: str = "d0"
    cont: str = "c2"
    w_desc: tuple = (5.0, 7.0, 9.0)
    w_cont: tuple = (5.0, 7.0, 9.0)
    n_samples: int = 2000
    n_steps: int = 100
    workers: int = 1


@dataclass(frozen=True)
class PathsConfig:
    manifest: str = ""
    base_dir: str = ""
    checkpoint: str = ""
    out: str = "out"


@dataclass(frozen=True)
class ClientsConfig:
    asr_primary: str = ""
    asr_secondary: str = ""
    embedder: str = "synthetic:16"
    timeout_s: float = 60.0
    retries: int = 1
    workers: int = 1


@dataclass(frozen=True)
class CurateConfig:
    mix: bool = True
    mix_seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    transcripts: str = ""
    audio_manifest: str = ""
    real_embeddings: str = ""
    gen_embeddings: str = ""
    real_probs: str = ""
    gen_probs: str = ""
    text_embeddings: str = ""
    audio_embeddings: str = ""


@dataclass(frozen=True)
class OracleCheckConfig:
    samples: int = 1000
    tol: float = 1e-9


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    world: WorldSpec = field(default_factory=WorldSpec)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    clients: ClientsConfig = field(default_factory=ClientsConfig)
    rules: CurationRules = field(default_factory=CurationRules)
    curate: CurateConfig = field(default_factory=CurateConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    oracle: OracleCheckConfig = field(default_factory=OracleCheckConfig)


def _coerce(value: Any, typ, key: str):
    if typ is bool:
        if isinstance(value, bool):
            return value
    elif typ is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif typ is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif typ is str:
        if isinstance(value, str):
            return value
    elif typ is tuple or get_origin(typ) is tuple:
        if isinstance(value, (list, tuple)):
            return tuple(value)
    raise ConfigError(f"{key}: expected {getattr(typ, '__name__', typ)}, got {value!r}")


def _literal(text: str, where: str):
    """Parse a literal, tolerating a trailing ``# comment``."""
    cuts = [len(text)] + [i for i, ch in enumerate(text) if ch == "#"]
    for cut in cuts:
        try:
            return ast.literal_eval(text[:cut].strip())
        except (ValueError, SyntaxError):
            continue
    raise ConfigError(f"{where}: cannot parse value {text!r} (strings need quotes)")


def parse_lines(text: str, origin: Path, seen: frozenset = frozenset()) -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{origin}:{lineno}"
        if line.startswith("include ") or line.startswith("include\t"):
            target = _literal(line[len("include"):].strip(), where)
            path = (origin.parent / str(target)).resolve()
            if path in seen:
                raise ConfigError(f"{where}: include cycle through {path}")
            if not path.exists():
                raise ConfigError(f"{where}: included file not found: {path}")
            out.update(parse_lines(path.read_text(), path, seen | {path}))
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        out[key] = _literal(val, where)
    return out


def build(values: dict, base: RunConfig = RunConfig()) -> RunConfig:
    top_hints = get_type_hints(RunConfig)
    sections: dict = {}
    top: dict = {}
    for key, value in values.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in top_hints or not dataclasses.is_dataclass(top_hints[sec]):
                raise ConfigError(f"unknown section in {key!r}")
            hints = get_type_hints(top_hints[sec])
            if name not in hints:
                raise ConfigError(f"unknown key {key!r}")
            sections.setdefault(sec, {})[name] = _coerce(value, hints[name], key)
        else:
            if key not in top_hints or dataclasses.is_dataclass(top_hints[key]):
                raise ConfigError(f"unknown key {key!r}")
            top[key] = _coerce(value, top_hints[key], key)
    try:
        updates = {sec: dataclasses.replace(getattr(base, sec), **kv) for sec, kv in sections.items()}
        return dataclasses.replace(base, **top, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path=None, overrides: dict | None = None) -> RunConfig:
    values: dict = {}
    if path is not None:
        p = Path(path).resolve()
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_lines(p.read_text(), p, frozenset({p})))
    values.update(overrides or {})
    return build(values)


def parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, val = (s.strip() for s in item.split("=", 1))
    try:
        return key, ast.literal_eval(val)
    except (ValueError, SyntaxError):
        return key, val  # bare strings are allowed on the command line


def dump(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            for sf in fields(v):
                lines.append(f"{f.name}.{sf.name} = {getattr(v, sf.name)!r}")
        else:
            lines.append(f"{f.name} = {v!r}")
    return "\n".join(lines) + "\n"
