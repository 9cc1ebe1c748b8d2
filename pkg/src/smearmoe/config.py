"""Experiment configuration: YAML schema, validation and the effective-config echo."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .projectors import Dims
from .synthtask import CorpusConfig
from .trainer import TrainConfig
from .zoo import ARCHITECTURES, HARD_MOE

# fields owned by the top-level seed; they may not be set inside a section
_DERIVED = {"train": {"seed"}}


@dataclass
class ExperimentConfig:
    architecture: str = "smear"
    k: int | None = None
    renormalize: bool = False
    seed: int = 0
    output_dir: str | None = None
    save_corpus: bool = False
    dims: Dims = field(default_factory=Dims)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError("architecture", f"unknown architecture {self.architecture!r}; "
                                              f"expected one of {', '.join(ARCHITECTURES)}")
        if self.architecture in HARD_MOE:
            if self.k is None:
                raise ConfigError("k", f"required for {self.architecture}")
            if not 1 <= self.k <= self.dims.num_experts:
                raise ConfigError("k", f"must lie in [1, {self.dims.num_experts}]")
        else:
            if self.k is not None:
                raise ConfigError("k", f"only valid for hard MoE architectures, not {self.architecture}")
            if self.renormalize:
                raise ConfigError("renormalize", "only valid for hard MoE architectures")
        if self.architecture in ("language_specific", "tied") and \
                self.dims.num_experts != self.corpus.num_languages:
            raise ConfigError("dims.num_experts",
                              f"{self.architecture} needs one projector per language "
                              f"({self.corpus.num_languages})")
        if self.dims.d_enc != self.corpus.d_enc:
            raise ConfigError("dims.d_enc", f"must equal corpus.d_enc ({self.corpus.d_enc})")
        if self.dims.d_llm != self.corpus.d_llm:
            raise ConfigError("dims.d_llm", f"must equal corpus.d_llm ({self.corpus.d_llm})")
        if self.dims.total_stride != self.corpus.stride:
            raise ConfigError("corpus.stride", f"must equal the model stride ({self.dims.total_stride})")
        if self.corpus.t_min < self.dims.mono_width:
            raise ConfigError("corpus.t_min", f"must be >= the conv width {self.dims.mono_width}")
        _prefixed("train", self.train.validate)
        _prefixed("corpus", self.corpus.validate)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["dims"]["ds_strides"] = list(self.dims.ds_strides)
        del d["train"]["seed"]
        return d


def _prefixed(section: str, fn) -> None:
    try:
        fn()
    except ConfigError as exc:
        raise ConfigError(f"{section}.{exc.field}", str(exc).split(": ", 1)[-1]) from None


def _check(name: str, value, annotation: str):
    """Coerce ``value`` to the annotated type or raise a ConfigError for ``name``."""
    optional = annotation.endswith("| None")
    base = annotation.replace("| None", "").strip()
    if value is None:
        if optional:
            return None
        raise ConfigError(name, "must not be null")
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true/false, got {value!r}")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if base in ("list[int]", "tuple[int, int]"):
        if not isinstance(value, (list, tuple)) or any(
                isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise ConfigError(name, f"expected a list of integers, got {value!r}")
        if base.startswith("tuple"):
            if len(value) != 2:
                raise ConfigError(name, "expected exactly two integers")
            return tuple(value)
        return list(value)
    raise TypeError(f"unsupported annotation {annotation!r}")


def _build(cls, section: str, data: Mapping[str, Any] | None):
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(section, "expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = f"{section}.{key}"
        if key not in known:
            raise ConfigError(name, "unknown field")
        if key in _DERIVED.get(section, ()):
            raise ConfigError(name, "set the top-level seed instead")
        kwargs[key] = _check(name, value, known[key].type)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(section, str(exc)) from None


def from_dict(data: Mapping[str, Any] | None, seed: int | None = None,
              output_dir: str | None = None) -> ExperimentConfig:
    """Build and validate a config; ``seed``/``output_dir`` override the file."""
    data = dict(data or {})
    sections = {"dims": Dims, "train": TrainConfig, "corpus": CorpusConfig}
    top = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name not in sections}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in sections:
            continue
        if key not in top:
            raise ConfigError(key, "unknown field")
        kwargs[key] = _check(key, value, top[key].type)
    if seed is not None:
        kwargs["seed"] = seed
    if output_dir is not None:
        kwargs["output_dir"] = str(output_dir)
    cfg = ExperimentConfig(**kwargs)
    cfg.dims = _build(Dims, "dims", data.get("dims"))
    cfg.train = _build(TrainConfig, "train", data.get("train"))
    corpus_data = data.get("corpus")
    cfg.corpus = _build(CorpusConfig, "corpus", corpus_data)
    # every random stream descends from the top-level seed; a pinned
    # corpus.seed keeps the data fixed across model seeds
    cfg.train.seed = cfg.seed
    if not corpus_data or "seed" not in corpus_data:
        cfg.corpus.seed = cfg.seed
    cfg.validate()
    return cfg


def load(path, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"invalid YAML: {exc}") from None
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError("config", "top level must be a mapping")
    return from_dict(data, seed, output_dir)


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
