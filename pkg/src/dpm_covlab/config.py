"""Experiment configuration: JSON loading with line-numbered errors and model construction."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .gmm import GmmSpec
from .schedule import DDIM, DDPM, ProcessKind, Schedule, ScheduleError, VPSDE


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


def _key_line(text: str, keys: tuple[str, ...]) -> int | None:
    """Line of the innermost key in ``keys``, searching each key after its parent."""
    pos = 0
    for k in keys:
        m = re.compile(r'"%s"\s*:' % re.escape(str(k))).search(text, pos)
        if m is None:
            break
        pos = m.start()
    else:
        return text.count("\n", 0, pos) + 1
    return text.count("\n", 0, pos) + 1 if pos else None


@dataclass
class ExperimentConfig:
    raw: dict
    text: str = ""
    path: str | None = None
    seed: int | None = None
    out: Path = Path("results")
    threads: int = 0
    spec: GmmSpec | None = None
    schedule: Schedule | None = None
    kind: ProcessKind = DDPM
    sde: VPSDE | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    def error(self, message: str, *keys: str) -> ConfigError:
        return ConfigError(message, self.path, _key_line(self.text, keys) if keys else None)

    def section(self, name: str) -> dict:
        sec = self.raw.get(name, {})
        if not isinstance(sec, dict):
            raise self.error(f"'{name}' must be an object", name)
        return sec

    def get(self, section: str, key: str, default, kind=None):
        val = self.section(section).get(key, default)
        if kind is not None and val is not None and not isinstance(val, kind):
            raise self.error(f"'{section}.{key}' has the wrong type ({type(val).__name__})",
                             section, key)
        return val

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q


def _parse_kind(cfg: ExperimentConfig, value) -> ProcessKind:
    if value in (None, "ddpm"):
        return DDPM
    if value == "ddim":
        return DDIM
    if isinstance(value, dict) and "custom" in value:
        try:
            return ProcessKind("custom", tuple(float(v) for v in value["custom"]))
        except (TypeError, ValueError) as exc:
            raise cfg.error(f"bad custom process: {exc}", "process") from exc
    raise cfg.error(f"unknown process {value!r} (ddpm, ddim or {{\"custom\": [...]}})", "process")


def load_config(path: str | None, seed: int | None = None, out: str | None = None,
                threads: int | None = None) -> ExperimentConfig:
    text, raw, base = "{}", {}, Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("config file does not exist", str(path))
        text = p.read_text()
        base = p.parent
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", str(path), exc.lineno) from exc
        if not isinstance(raw, dict):
            raise ConfigError("top level must be an object", str(path), 1)
    cfg = ExperimentConfig(raw, text, None if path is None else str(path), base_dir=base)

    cfg.seed = seed if seed is not None else raw.get("seed")
    if cfg.seed is None:
        raise cfg.error("a seed is required (config 'seed' or --seed)")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or cfg.seed < 0:
        raise cfg.error("seed must be a non-negative integer", "seed")
    cfg.out = Path(out) if out is not None else cfg.resolve(raw.get("out", "results"))
    cfg.threads = threads if threads is not None else int(raw.get("threads", 0))
    if cfg.threads < 0:
        raise cfg.error("threads must be >= 0", "threads")

    spec_obj = raw.get("spec", {"weights": [1.0], "means": [[0.0]], "var": 1.0})
    if isinstance(spec_obj, str):
        sp = cfg.resolve(spec_obj)
        if not sp.exists():
            raise cfg.error(f"spec file {spec_obj} does not exist", "spec")
        spec_obj = json.loads(sp.read_text())
    try:
        cfg.spec = GmmSpec.from_json(spec_obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise cfg.error(f"invalid data spec: {exc}", "spec") from exc

    sched = raw.get("schedule", {"kind": "linear", "N": 100})
    try:
        if not isinstance(sched, dict):
            raise ValueError("schedule must be an object")
        if sched.get("kind") == "vp":
            cfg.sde = VPSDE(float(sched.get("beta0", 0.1)), float(sched.get("beta1", 20.0)))
            cfg.schedule = cfg.sde.to_schedule(int(sched["N"]))
        else:
            cfg.schedule = Schedule.from_json(sched)
    except (KeyError, TypeError, ValueError, ScheduleError) as exc:
        raise cfg.error(f"invalid schedule: {exc}", "schedule") from exc

    cfg.kind = _parse_kind(cfg, raw.get("process"))
    try:
        cfg.kind.validate(cfg.schedule)
    except ValueError as exc:
        raise cfg.error(str(exc), "process") from exc
    return cfg
