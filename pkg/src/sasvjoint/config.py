"""Nested JSON run configuration. Every section maps onto one of the
package's config dataclasses; unknown keys are rejected and the effective
configuration is written next to every output."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .asv_encoder import AsvConfig, AsvTrainConfig
from .backend import BackendConfig
from .cm_encoder import CmConfig, CmTrainConfig
from .synth_corpus import CorpusConfig
from .trainer import TrainingConfig


class ConfigError(ValueError):
    pass


@dataclass
class AblationConfig:
    counts: tuple = (4, 8, 12, 16, 20)
    modes: tuple = ("fixed", "joint")
    epochs: int = 2


# n_speakers of the ASV head follows the training data, and the corpus and
# training seeds follow the top-level seed, so they are not configurable here.
_DERIVED = {"asv": {"n_speakers"}, "corpus": {"seed"}, "training": {"seed", "mode"}}

SECTIONS = {
    "corpus": CorpusConfig,
    "asv": AsvConfig,
    "asv_train": AsvTrainConfig,
    "cm": CmConfig,
    "cm_train": CmTrainConfig,
    "backend": BackendConfig,
    "training": TrainingConfig,
    "ablation": AblationConfig,
}


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, (list, tuple)) else v


def _listify(v):
    return [_listify(x) for x in v] if isinstance(v, (list, tuple)) else v


def _build(name: str, cls, overrides: dict):
    if not isinstance(overrides, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name: f for f in fields(cls)}
    for key in overrides:
        if key not in allowed or key in _DERIVED.get(name, ()):
            raise ConfigError(f"unknown key {name}.{key}")
    kwargs = {}
    for key, value in overrides.items():
        default = allowed[key].default
        kwargs[key] = _tuplify(value) if isinstance(default, tuple) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section {name!r}: {e}") from e


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    asv: AsvConfig = field(default_factory=AsvConfig)
    asv_train: AsvTrainConfig = field(default_factory=AsvTrainConfig)
    cm: CmConfig = field(default_factory=CmConfig)
    cm_train: CmTrainConfig = field(default_factory=CmTrainConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        for key in d:
            if key != "seed" and key not in SECTIONS:
                raise ConfigError(f"unknown key {key!r}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        built = {name: _build(name, c, d.get(name, {})) for name, c in SECTIONS.items()}
        return cls(seed=seed, **built).with_seed(seed)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self, seed=seed,
            corpus=dataclasses.replace(self.corpus, seed=seed),
            training=dataclasses.replace(self.training, seed=seed),
        )

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            for key in _DERIVED.get(name, ()):
                section.pop(key, None)
            out[name] = {k: _listify(v) for k, v in section.items()}
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, directory, name: str = "config.json") -> Path:
        path = Path(directory) / name
        path.write_text(self.dumps())
        return path


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides``
    (``{section: {key: value}}`` or ``{"seed": n}``)."""
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: configuration must be a JSON object")
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            d.setdefault(key, {})
            if not isinstance(d[key], dict):
                raise ConfigError(f"section {key!r} must be an object")
            d[key].update(value)
        else:
            d[key] = value
    return RunConfig.from_dict(d)
