"""Run configuration: one JSON file, sectioned, with dotted-key overrides.

Schema (every key optional; defaults shown by ``tailsearch show-config``)::

    {
      "seed": 0,
      "scenario": {ScenarioConfig fields},
      "hyper":    {HyperParams fields},
      "train":    {TrainConfig fields except hyper and seed},
      "eval":     {"k": 10},
      "ablate":   {"seeds": [0, 1, 2, 3, 4], "arms": [...]},
      "paths":    {"out_root": "runs"}
    }
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

from .encoder import HyperParams
from .synthgen import ScenarioConfig
from .training import TrainConfig

ARMS = ("full", "wo_se", "wo_ig", "wo_all", "shared")


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    k: int = 10


@dataclass
class AblateConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    arms: list[str] = field(default_factory=lambda: list(ARMS))


@dataclass
class PathsConfig:
    out_root: str = "runs"


_TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig) if f.name not in ("hyper", "seed"))


@dataclass
class RunConfig:
    seed: int = 0
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    hyper: HyperParams = field(default_factory=HyperParams)
    train: dict[str, Any] = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def train_config(self, **overrides) -> TrainConfig:
        cfg = TrainConfig(hyper=replace(self.hyper), seed=self.seed, **self.train)
        return replace(cfg, **overrides)

    def scenario_config(self) -> ScenarioConfig:
        """Scenario settings with the seed taken from the root seed."""
        return replace(self.scenario, seed=self.seed)

    def validate(self) -> None:
        try:
            self.scenario_config().validate()
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.eval.k < 1:
            raise ConfigError("eval.k must be >= 1")
        bad = [a for a in self.ablate.arms if a not in ARMS]
        if bad:
            raise ConfigError(f"unknown ablation arms {bad}; choose from {list(ARMS)}")
        if not self.ablate.seeds:
            raise ConfigError("ablate.seeds must be non-empty")

    def as_dict(self) -> dict:
        out = asdict(self)
        out["train"] = {k: getattr(self.train_config(), k) for k in _TRAIN_FIELDS}
        out["scenario"].pop("seed")
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()


def _section(cls, values: dict, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    return cls(**values)


def from_dict(raw: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    scenario = dict(raw.get("scenario", {}))
    if "seed" in scenario:
        raise ConfigError("set the root 'seed' instead of 'scenario.seed'")
    train = dict(raw.get("train", {}))
    bad = sorted(set(train) - set(_TRAIN_FIELDS))
    if bad:
        raise ConfigError(f"unknown keys in 'train': {bad}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    try:
        cfg = RunConfig(
            seed=seed,
            scenario=_section(ScenarioConfig, scenario, "scenario"),
            hyper=_section(HyperParams, raw.get("hyper", {}), "hyper"),
            train=train,
            eval=_section(EvalConfig, raw.get("eval", {}), "eval"),
            ablate=_section(AblateConfig, raw.get("ablate", {}), "ablate"),
            paths=_section(PathsConfig, raw.get("paths", {}), "paths"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def _set_dotted(raw: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key!r}: {p!r} is not a section")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """``section.key=value``; the value is read as JSON when it parses, else as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (),
                seed: int | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: expected {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be an object")
    for item in overrides:
        _set_dotted(raw, *parse_override(item))
    if seed is not None:
        raw["seed"] = seed
    return from_dict(raw)


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> None:
    text = json.dumps(cfg.as_dict(), indent=2, sort_keys=True) + "\n"
    (Path(out_dir) / "config.resolved").write_text(text, encoding="utf-8")
