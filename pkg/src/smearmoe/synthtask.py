"""Synthetic multilingual corpus with a planted language-family structure.

Each language owns a feature generator ``A`` (latent -> encoder features) and
a target map ``B`` (encoder features -> output embedding). Languages in one
family mix a shared family matrix with a private one:
``A_lang = alpha * A_family + (1 - alpha) * A_private`` and likewise for ``B``.
Targets are ``box_downsample(features) @ B`` where ``box_downsample`` is a
parameter-free strided average whose length mapping matches the model
downsampler, so every architecture can represent the exact solution.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError
from .numcore import Node
from .projectors import LanguageTag
from .routing import load_balance_loss

CORPUS_FORMAT = "smearmoe-corpus"
CORPUS_VERSION = 1

_SPLITS = {"train": 0, "dev": 1, "test": 2}


@dataclass
class LanguageSpec:
    id: int
    family: int
    name: str
    A: np.ndarray  # (d_latent, d_enc)
    B: np.ndarray  # (d_enc, d_llm)
    alpha: float

    @property
    def tag(self) -> LanguageTag:
        return LanguageTag(self.id, self.family)


@dataclass
class CorpusConfig:
    num_languages: int = 4
    num_families: int = 2
    alpha: float = 0.8
    d_latent: int = 12
    d_enc: int = 32
    d_llm: int = 24
    sigma: float = 0.05
    n_train: int = 400
    n_dev: int = 50
    n_test: int = 100
    t_min: int = 30
    t_max: int = 60
    stride: int = 4
    latent_mean: float = 0.0
    target_gain: float = 1.0
    seed: int = 0
    # per-language seed for the private component; None derives it from ``seed``
    private_seeds: list[int] | None = None

    def validate(self) -> None:
        if self.t_min < 1:
            raise ConfigError("t_min", "must be >= 1")
        if self.t_max < self.t_min:
            raise ConfigError("t_max", f"must be >= t_min ({self.t_min})")
        if self.sigma < 0:
            raise ConfigError("sigma", "must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", "must lie in [0, 1]")
        if self.num_languages < 1:
            raise ConfigError("num_languages", "must be >= 1")
        if not 1 <= self.num_families <= self.num_languages:
            raise ConfigError("num_families", "must lie in [1, num_languages]")
        for name in ("d_latent", "d_enc", "d_llm", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.private_seeds is not None and len(self.private_seeds) != self.num_languages:
            raise ConfigError("private_seeds", "needs one entry per language")
        for name in ("n_train", "n_dev", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")

    def family_of(self, lang: int) -> int:
        # contiguous blocks: 4 languages in 2 families -> [0, 0, 1, 1]
        return lang * self.num_families // self.num_languages


@dataclass
class Utterance:
    features: np.ndarray  # (T, d_enc)
    target: np.ndarray  # (T', d_llm)
    language: LanguageTag
    index: int = 0


@dataclass
class Corpus:
    config: CorpusConfig
    languages: list[LanguageSpec]
    train: list[Utterance] = field(default_factory=list)
    dev: list[Utterance] = field(default_factory=list)
    test: list[Utterance] = field(default_factory=list)

    @property
    def language_names(self) -> list[str]:
        return [spec.name for spec in self.languages]

    @property
    def families(self) -> list[int]:
        return [spec.family for spec in self.languages]

    def split(self, name: str) -> list[Utterance]:
        return getattr(self, name)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def make_languages(cfg: CorpusConfig) -> list[LanguageSpec]:
    cfg.validate()
    fam_rng = _rng(cfg.seed, 1)
    fam_A = [fam_rng.normal(0, 1 / np.sqrt(cfg.d_latent), (cfg.d_latent, cfg.d_enc))
             for _ in range(cfg.num_families)]
    fam_B = [fam_rng.normal(0, cfg.target_gain / np.sqrt(cfg.d_enc), (cfg.d_enc, cfg.d_llm))
             for _ in range(cfg.num_families)]
    specs = []
    for lang in range(cfg.num_languages):
        fam = cfg.family_of(lang)
        pseed = cfg.private_seeds[lang] if cfg.private_seeds is not None else None
        prng = _rng(pseed, 7) if pseed is not None else _rng(cfg.seed, 2, lang)
        priv_A = prng.normal(0, 1 / np.sqrt(cfg.d_latent), (cfg.d_latent, cfg.d_enc))
        priv_B = prng.normal(0, cfg.target_gain / np.sqrt(cfg.d_enc), (cfg.d_enc, cfg.d_llm))
        a = cfg.alpha
        specs.append(LanguageSpec(
            lang, fam, f"lang{lang}",
            a * fam_A[fam] + (1 - a) * priv_A,
            a * fam_B[fam] + (1 - a) * priv_B,
            a,
        ))
    return specs


def output_length(n: int, stride: int) -> int:
    return -(-n // stride)


def box_downsample(x: np.ndarray, stride: int) -> np.ndarray:
    """Row t is ``sum(x[stride*t : stride*t + stride]) / stride`` (zero-padded)."""
    n, c = x.shape
    n_out = output_length(n, stride)
    padded = np.zeros((n_out * stride, c))
    padded[:n] = x
    return padded.reshape(n_out, stride, c).sum(axis=1) / stride


def make_utterance(spec: LanguageSpec, cfg: CorpusConfig, split: str, index: int) -> Utterance:
    rng = _rng(cfg.seed, 3, _SPLITS[split], spec.id, index)
    n = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    latent = rng.normal(size=(n, cfg.d_latent)) + cfg.latent_mean
    noise = rng.normal(size=(n, cfg.d_enc)) * cfg.sigma
    features = latent @ spec.A + noise
    target = box_downsample(features, cfg.stride) @ spec.B
    return Utterance(features, target, spec.tag, index)


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Deterministic train/dev/test splits with equal counts per language.

    Every utterance draws from its own seed stream keyed by (split, language,
    index), so splits are disjoint and any subset can be regenerated alone.
    """
    languages = make_languages(cfg)
    corpus = Corpus(cfg, languages)
    for split, count in (("train", cfg.n_train), ("dev", cfg.n_dev), ("test", cfg.n_test)):
        items = corpus.split(split)
        # interleave languages so prefixes stay balanced
        for i in range(count):
            for spec in languages:
                items.append(make_utterance(spec, cfg, split, i))
    return corpus


# --- objectives -----------------------------------------------------------------

def task_loss(pred: Node, target) -> Node:
    """Mean squared error over every entry."""
    t = np.asarray(target, dtype=np.float64)
    if pred.value.shape != t.shape:
        raise DimensionError(f"prediction {pred.value.shape} vs target {t.shape}")
    return nc.mse(pred, t)


def total_loss(pred: Node, target, gates: Node | None = None, balance_weight: float = 0.0,
               assignments: np.ndarray | None = None) -> Node:
    """Task loss plus the weighted balance loss when a gate exists."""
    if balance_weight < 0:
        raise ValueError("balance_weight must be >= 0")
    loss = task_loss(pred, target)
    if gates is None or balance_weight == 0:
        return loss
    bal = load_balance_loss(gates, assignments)
    return nc.add(loss, nc.scale(bal, balance_weight))


# --- serialization --------------------------------------------------------------

def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _unarr(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def corpus_to_json(corpus: Corpus) -> str:
    doc = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "config": asdict(corpus.config),
        "languages": [
            {"id": s.id, "family": s.family, "name": s.name, "alpha": s.alpha,
             "A": _arr(s.A), "B": _arr(s.B)} for s in corpus.languages
        ],
    }
    for split in _SPLITS:
        doc[split] = [
            {"language": u.language.id, "family": u.language.family, "index": u.index,
             "features": _arr(u.features), "target": _arr(u.target)}
            for u in corpus.split(split)
        ]
    return json.dumps(doc)


def corpus_from_json(text: str) -> Corpus:
    doc = json.loads(text)
    if doc.get("format") != CORPUS_FORMAT:
        raise ValueError("not a corpus file")
    if doc.get("version") != CORPUS_VERSION:
        raise ValueError(f"unsupported corpus version {doc.get('version')}")
    cfg = CorpusConfig(**doc["config"])
    langs = [LanguageSpec(d["id"], d["family"], d["name"], _unarr(d["A"]), _unarr(d["B"]),
                          d["alpha"]) for d in doc["languages"]]
    corpus = Corpus(cfg, langs)
    for split in _SPLITS:
        corpus.split(split).extend(
            Utterance(_unarr(d["features"]), _unarr(d["target"]),
                      LanguageTag(d["language"], d["family"]), d["index"])
            for d in doc[split])
    return corpus
