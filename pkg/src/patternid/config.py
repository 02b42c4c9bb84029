"""Run configuration: one JSON document covering the whole lifecycle.

The schema is strict: unknown keys are rejected with their dotted path so
typos fail fast. Precedence is CLI flags > config file > defaults, with
PATTERNID_SEED as the master-seed fallback for sections that leave their
seed unset.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from patternid.corpus import CorpusConfig
from patternid.errors import ConfigError
from patternid.metrics import EvalProtocolConfig
from patternid.mining import MiningConfig
from patternid.net import ModelConfig
from patternid.train import TrainConfig

SEED_ENV_VAR = "PATTERNID_SEED"


@dataclass(frozen=True)
class PathsConfig:
    dataset_root: str = "data/corpus"
    checkpoint: str = "runs/model.pidm"
    database: str = "runs/db.pidb"
    train_log: str = "runs/train_log.ndjson"
    reports_dir: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    eval: EvalProtocolConfig = field(default_factory=EvalProtocolConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        self.corpus.validate()
        self.train.validate()
        self.eval.validate()


_SECTION_TYPES = {
    "corpus": CorpusConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "mining": MiningConfig,
    "eval": EvalProtocolConfig,
    "paths": PathsConfig,
}


def _coerce(value, target_type, path: str):
    origin = typing.get_origin(target_type)
    if dataclasses.is_dataclass(target_type):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build_dataclass(target_type, value, path)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(target_type)
        elem = args[0] if args else float
        return tuple(_coerce(v, elem, f"{path}[{i}]") for i, v in enumerate(value))
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported config field type {target_type!r}")


def _build_dataclass(cls, doc: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    if cls is TrainConfig:
        # Model and mining arrive from their own top-level sections.
        names.discard("model")
        names.discard("mining")
    kwargs = {}
    for key, value in doc.items():
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
        kwargs[key] = _coerce(value, hints[key], f"{path}.{key}")
    return cls(**kwargs)


def _nested_get(doc: dict, dotted: str):
    node = doc
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def _nested_set(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: cannot override inside a non-object")
    node[parts[-1]] = value


def load_run_config(
    config_path: Path | None = None,
    overrides: dict[str, object] | None = None,
) -> RunConfig:
    """Build a RunConfig from (file, env fallback, overrides).

    `overrides` maps dotted paths like "train.steps" to raw values and wins
    over the file; PATTERNID_SEED fills any unset section seed.
    """
    doc: dict = {}
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{config_path}: top level must be an object")

    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from exc
        for dotted in ("corpus.seed", "train.seed", "eval.seed"):
            if _nested_get(doc, dotted) is None:
                _nested_set(doc, dotted, seed)

    for dotted, value in (overrides or {}).items():
        _nested_set(doc, dotted, value)

    for key in doc:
        if key not in _SECTION_TYPES:
            raise ConfigError(f"{key}: unknown section")

    sections = {}
    for name, cls in _SECTION_TYPES.items():
        sections[name] = _build_dataclass(cls, doc.get(name, {}), name)

    train = dataclasses.replace(
        sections["train"], model=sections["model"], mining=sections["mining"]
    )
    run = RunConfig(
        corpus=sections["corpus"],
        model=sections["model"],
        train=train,
        mining=sections["mining"],
        eval=sections["eval"],
        paths=sections["paths"],
    )
    run.validate()
    return run
