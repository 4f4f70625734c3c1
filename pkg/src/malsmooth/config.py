"""Run configuration: a JSON document with model, corpus, attack, smoothing and harness sections.

Unspecified values fall back to the desk preset. Unknown keys are rejected and
every validation error names its ``section.key`` path. Relative paths are
resolved against the directory holding the config file.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .corpus import SyntheticSpec
from .errors import ConfigError, MalsmoothError
from .model import PRESETS, TRAINING_PRESETS, ModelConfig, TrainingConfig


@dataclass(frozen=True)
class ModelSection:
    preset: str = "desk"
    input_length: int | None = None
    conv_window: int | None = None
    conv_stride: int | None = None
    num_filters: int | None = None
    embed_dim: int | None = None
    decision_threshold: float | None = None
    epochs: int | None = None
    batch_size: int | None = None
    learning_rate: float | None = None
    validation_fraction: float | None = None
    checkpoint: str | None = None

    def model_config(self) -> ModelConfig:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}", "model.preset")
        overrides = {
            k: getattr(self, k)
            for k in ("input_length", "conv_window", "conv_stride", "num_filters", "embed_dim", "decision_threshold")
            if getattr(self, k) is not None
        }
        return replace(PRESETS[self.preset], **overrides)

    def training_config(self) -> TrainingConfig:
        base = TRAINING_PRESETS[self.preset]
        overrides = {
            k: getattr(self, k)
            for k in ("epochs", "batch_size", "learning_rate", "validation_fraction")
            if getattr(self, k) is not None
        }
        try:
            return replace(base, **overrides)
        except MalsmoothError as exc:
            raise ConfigError(str(exc), "model.training") from None


@dataclass(frozen=True)
class CorpusSection:
    path: str | None = None
    synthetic: dict = field(default_factory=dict)
    test_fraction: float = 0.2

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        data = {"seed": seed, **self.synthetic}
        try:
            return SyntheticSpec.from_dict(data)
        except TypeError as exc:
            raise ConfigError(str(exc), "corpus.synthetic") from None
        except MalsmoothError as exc:
            raise ConfigError(str(exc), "corpus.synthetic") from None


@dataclass(frozen=True)
class AttackSection:
    pad_percent: float = 5.0
    epsilon: float = 0.5
    iterations: int = 10
    uap_bytes: int | None = None
    uap_percent_of_mean: float = 4.0
    uap_num_files: int = 200
    uap_generation_fraction: float = 0.75
    max_files: int | None = None


@dataclass(frozen=True)
class SmoothingSection:
    window_size: int | None = None
    patch_size: int | None = None
    window_sizes: list = field(default_factory=list)
    patch_sizes: list = field(default_factory=list)
    model_dir: str | None = None


@dataclass(frozen=True)
class HarnessSection:
    experiment: str = "desk"
    export_features: bool = True


SECTIONS = {
    "model": ModelSection,
    "corpus": CorpusSection,
    "attack": AttackSection,
    "smoothing": SmoothingSection,
    "harness": HarnessSection,
}
TOP_LEVEL = {"seed", "out", "jobs", "deterministic"} | set(SECTIONS)
PATH_KEYS = {("model", "checkpoint"), ("corpus", "path"), ("smoothing", "model_dir")}
DEFAULT_WINDOWS = 8


@dataclass(frozen=True)
class CliConfig:
    model: ModelSection = field(default_factory=ModelSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    attack: AttackSection = field(default_factory=AttackSection)
    smoothing: SmoothingSection = field(default_factory=SmoothingSection)
    harness: HarnessSection = field(default_factory=HarnessSection)
    seed: int = 0
    out: str = "out"
    jobs: int | None = None
    deterministic: bool = False

    @property
    def effective_jobs(self) -> int:
        if self.deterministic:
            return 1
        return self.jobs if self.jobs else (os.cpu_count() or 1)

    @property
    def window_size(self) -> int:
        if self.smoothing.window_size is not None:
            return self.smoothing.window_size
        return self.model.model_config().input_length // DEFAULT_WINDOWS

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        d.update(seed=self.seed, out=self.out, jobs=self.jobs, deterministic=self.deterministic)
        return d

    def validate(self) -> "CliConfig":
        _check_type(self.seed, int, "seed")
        if self.jobs is not None and (not isinstance(self.jobs, int) or self.jobs < 1):
            raise ConfigError("must be a positive integer", "jobs")
        if not 0.0 < self.corpus.test_fraction < 1.0:
            raise ConfigError("must lie in (0, 1)", "corpus.test_fraction")
        L = self.model.input_length if self.model.input_length is not None else _preset_length(self.model.preset)
        for w in [self.smoothing.window_size, *self.smoothing.window_sizes]:
            if w is None:
                continue
            if not isinstance(w, int) or w < 1:
                raise ConfigError(f"must be a positive integer, got {w!r}", "smoothing.window_size")
            if L % w:
                raise ConfigError(f"input length {L} is not divisible by window size {w}", "smoothing.window_size")
        for p in [self.smoothing.patch_size, *self.smoothing.patch_sizes]:
            if p is not None and (not isinstance(p, int) or p < 1):
                raise ConfigError(f"must be a positive integer, got {p!r}", "smoothing.patch_size")
        a = self.attack
        if not a.pad_percent > 0:
            raise ConfigError("must be positive", "attack.pad_percent")
        if not a.epsilon > 0:
            raise ConfigError("must be positive", "attack.epsilon")
        if not isinstance(a.iterations, int) or a.iterations < 1:
            raise ConfigError("must be a positive integer", "attack.iterations")
        if a.uap_bytes is not None and (not isinstance(a.uap_bytes, int) or a.uap_bytes < 1):
            raise ConfigError("must be a positive integer", "attack.uap_bytes")
        if not 0.0 < a.uap_generation_fraction < 1.0:
            raise ConfigError("must lie in (0, 1)", "attack.uap_generation_fraction")
        if not isinstance(a.uap_num_files, int) or a.uap_num_files < 2:
            raise ConfigError("must be an integer >= 2", "attack.uap_num_files")
        self.model.model_config()
        self.model.training_config()
        self.corpus.synthetic_spec(self.seed)
        return self


def _preset_length(preset: str) -> int:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}", "model.preset")
    return PRESETS[preset].input_length


def _check_type(value, kind, key):
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"expected {kind.__name__}, got {value!r}", key)


def _build_section(name: str, raw, base_dir: Path | None):
    cls = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError("section must be an object", name)
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError("unknown key", f"{name}.{key}")
    values = dict(raw)
    for section, key in PATH_KEYS:
        if section == name and values.get(key) is not None and base_dir is not None:
            values[key] = str((base_dir / values[key]).resolve()) if not Path(values[key]).is_absolute() else values[key]
    return cls(**values)


def config_from_dict(data: dict, base_dir: Path | None = None) -> CliConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be an object", "<root>")
    for key in data:
        if key not in TOP_LEVEL:
            raise ConfigError("unknown key", key)
    kwargs = {name: _build_section(name, data[name], base_dir) for name in SECTIONS if name in data}
    for key in ("seed", "out", "jobs", "deterministic"):
        if key in data:
            kwargs[key] = data[key]
    if "out" in kwargs and base_dir is not None and not Path(kwargs["out"]).is_absolute():
        kwargs["out"] = str((base_dir / kwargs["out"]).resolve())
    return CliConfig(**kwargs).validate()


def load_config(path) -> CliConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}", "<root>") from None
    return config_from_dict(data, base_dir=path.parent.resolve())


def dump_config(config: CliConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


def with_overrides(config: CliConfig, **sections) -> CliConfig:
    """Replace individual keys: ``with_overrides(cfg, smoothing={"window_size": 512}, seed=3)``."""
    kwargs = {}
    for name, value in sections.items():
        if name in SECTIONS:
            values = {k: v for k, v in value.items() if v is not None}
            known = {f.name for f in fields(SECTIONS[name])}
            for key in values:
                if key not in known:
                    raise ConfigError("unknown key", f"{name}.{key}")
            kwargs[name] = replace(getattr(config, name), **values)
        elif name in TOP_LEVEL:
            if value is not None:
                kwargs[name] = value
        else:
            raise ConfigError("unknown key", name)
    return replace(config, **kwargs).validate()
