"""The seven projector architectures behind one forward interface.

Each model owns a flat ``params`` mapping from canonical tensor names to
parameter leaves (the checkpoint key space) and reports, per utterance, the
output, the gate matrix when one exists, and how its routing mass was spread
over experts.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import numcore as nc
from .projectors import (
    Dims, Downsampler, ExpertBank, LanguageTag, MonolithicProjector, dense_ensemble_forward,
    downsample, glorot, init_bank, init_downsampler, init_monolithic, language_specific_forward,
    monolithic_forward, tied_forward,
)
from .routing import GateParams, MoEOutput, smear_forward, token_moe_forward, utterance_moe_forward

ARCHITECTURES = ("monolithic", "language_specific", "tied", "dense_ensemble",
                 "utterance_moe", "token_moe", "smear")
HARD_MOE = ("utterance_moe", "token_moe")
GATED = HARD_MOE + ("smear",)


def _conv_params(prefix, conv):
    return {f"{prefix}.kernel": conv.kernel, f"{prefix}.bias": conv.bias}


def _mono_params(prefix, p: MonolithicProjector):
    out = _conv_params(f"{prefix}.conv", p.conv)
    for name, t in zip(("W1", "b1", "W2", "b2"), p.mlp.tensors()):
        out[f"{prefix}.mlp.{name}"] = t
    return out


class Architecture:
    name = ""
    gated = False

    def __init__(self, dims: Dims):
        self.dims = dims
        self.params: dict[str, nc.Node] = {}

    @property
    def num_experts(self) -> int:
        return self.dims.num_experts

    def forward(self, features, lang: LanguageTag) -> MoEOutput:
        raise NotImplementedError

    def expert_param_names(self) -> list[list[str]]:
        raise NotImplementedError

    def expert_grad_norms(self) -> np.ndarray:
        return np.array([
            np.sqrt(sum(float((self.params[n].grad ** 2).sum()) for n in names))
            for names in self.expert_param_names()
        ])

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if self.params[k].value.shape != np.shape(v):
                raise ValueError(f"{k}: shape {np.shape(v)} != {self.params[k].value.shape}")
            self.params[k].value[...] = v

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))


class Monolithic(Architecture):
    name = "monolithic"

    def __init__(self, dims: Dims, rng: np.random.Generator):
        super().__init__(dims)
        self.proj = init_monolithic(rng, dims)
        self.params = _mono_params("projector", self.proj)

    @property
    def num_experts(self) -> int:
        return 1

    def forward(self, features, lang):
        out = monolithic_forward(features, self.proj)
        return MoEOutput(out, None, usage=np.ones(1))

    def expert_param_names(self):
        return [list(self.params)]


class _ProjectorBank(Architecture):
    def __init__(self, dims: Dims, rng: np.random.Generator):
        super().__init__(dims)
        self.bank = [init_monolithic(rng, dims) for _ in range(dims.num_experts)]
        for m, p in enumerate(self.bank):
            self.params.update(_mono_params(f"projectors.{m}", p))

    def expert_param_names(self):
        return [[n for n in self.params if n.startswith(f"projectors.{m}.")]
                for m in range(self.num_experts)]


class LanguageSpecific(_ProjectorBank):
    name = "language_specific"

    def forward(self, features, lang):
        usage = np.zeros(self.num_experts)
        usage[lang.id] = 1.0
        return MoEOutput(language_specific_forward(features, lang, self.bank), None, usage=usage)


class Tied(_ProjectorBank):
    """Projector m belongs to the family of language m."""

    name = "tied"

    def __init__(self, dims: Dims, rng: np.random.Generator, groups: Mapping[int, list[int]]):
        super().__init__(dims, rng)
        self.groups = {int(k): list(v) for k, v in groups.items()}

    def forward(self, features, lang):
        members = self.groups.get(lang.family, [])
        usage = np.zeros(self.num_experts)
        if members:
            usage[members] = 1.0 / len(members)
        return MoEOutput(tied_forward(features, lang, self.groups, self.bank), None, usage=usage)


class DenseEnsemble(_ProjectorBank):
    name = "dense_ensemble"

    def forward(self, features, lang):
        return MoEOutput(dense_ensemble_forward(features, self.bank), None,
                         usage=np.full(self.num_experts, 1.0 / self.num_experts))


class _GatedMoE(Architecture):
    gated = True

    def __init__(self, dims: Dims, rng: np.random.Generator):
        super().__init__(dims)
        self.down: Downsampler = init_downsampler(rng, dims)
        self.bank: ExpertBank = init_bank(rng, dims)
        self.gate = GateParams(nc.param(glorot(rng, (dims.d_z, dims.num_experts),
                                               dims.d_z, dims.num_experts)))
        self.params.update(_conv_params("downsampler.conv1", self.down.conv1))
        self.params.update(_conv_params("downsampler.conv2", self.down.conv2))
        self.params["gate.W_g"] = self.gate.W_g
        for name, t in zip(("W1", "b1", "W2", "b2"), self.bank.tensors()):
            self.params[f"experts.{name}"] = t

    def expert_param_names(self):
        return [["experts.W1", "experts.b1", "experts.W2", "experts.b2"]] * self.num_experts

    def expert_grad_norms(self) -> np.ndarray:
        sq = np.zeros(self.num_experts)
        for t in self.bank.tensors():
            g = t.grad.reshape(self.num_experts, -1)
            sq += (g * g).sum(axis=1)
        return np.sqrt(sq)


class UtteranceMoE(_GatedMoE):
    name = "utterance_moe"

    def __init__(self, dims, rng, k: int = 1, renormalize: bool = False):
        super().__init__(dims, rng)
        self.k, self.renormalize = k, renormalize

    def forward(self, features, lang):
        return utterance_moe_forward(downsample(features, self.down), self.bank, self.gate,
                                     self.k, self.renormalize)


class TokenMoE(UtteranceMoE):
    name = "token_moe"

    def forward(self, features, lang):
        return token_moe_forward(downsample(features, self.down), self.bank, self.gate,
                                 self.k, self.renormalize)


class Smear(_GatedMoE):
    name = "smear"

    def forward(self, features, lang):
        return smear_forward(downsample(features, self.down), self.bank, self.gate)


def default_groups(num_projectors: int, num_languages: int, num_families: int) -> dict[int, list[int]]:
    """Projector j serves language j; group projectors by their language's family."""
    groups: dict[int, list[int]] = {}
    for j in range(min(num_projectors, num_languages)):
        groups.setdefault(j * num_families // num_languages, []).append(j)
    return groups


def build(name: str, dims: Dims, seed: int = 0, k: int | None = None,
          groups: Mapping[int, list[int]] | None = None, num_languages: int | None = None,
          num_families: int = 2, renormalize: bool = False) -> Architecture:
    """Construct an architecture with deterministic initialisation from ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    if name == "monolithic":
        return Monolithic(dims, rng)
    if name == "language_specific":
        return LanguageSpecific(dims, rng)
    if name == "tied":
        if groups is None:
            groups = default_groups(dims.num_experts, num_languages or dims.num_experts, num_families)
        return Tied(dims, rng, groups)
    if name == "dense_ensemble":
        return DenseEnsemble(dims, rng)
    if name == "utterance_moe":
        return UtteranceMoE(dims, rng, k if k is not None else 1, renormalize)
    if name == "token_moe":
        return TokenMoE(dims, rng, k if k is not None else 1, renormalize)
    if name == "smear":
        return Smear(dims, rng)
    raise ValueError(f"unknown architecture {name!r}; expected one of {', '.join(ARCHITECTURES)}")
