"""Projector building blocks: convolutions, expert MLPs, and the static zoo.

Shapes follow (time, channels). Expert banks keep their parameters stacked
along a leading expert axis so soft merging is a single contraction per
tensor; ``ExpertBank.expert(m)`` slices one expert out on the tape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .errors import DimensionError
from .numcore import Node


@dataclass(frozen=True)
class Dims:
    d_enc: int = 32
    d_h: int = 48
    d_z: int = 16
    d_llm: int = 24
    num_experts: int = 4
    mono_width: int = 7
    mono_stride: int = 4
    ds_width: int = 3
    ds_strides: tuple[int, int] = (2, 2)

    @property
    def total_stride(self) -> int:
        return self.ds_strides[0] * self.ds_strides[1]

    def __post_init__(self):
        for name in ("d_enc", "d_h", "d_z", "d_llm", "num_experts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mono_width % 2 == 0 or self.ds_width % 2 == 0:
            raise ValueError("kernel widths must be odd")
        if self.mono_stride != self.total_stride:
            raise ValueError("monolithic stride must equal the downsampler's total stride")


@dataclass
class Conv1DParams:
    kernel: Node  # (out_ch, in_ch, width)
    bias: Node  # (out_ch,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.value.shape[2] % 2 == 0:
            raise ValueError("conv kernel width must be odd")
        if self.stride < 1:
            raise ValueError("conv stride must be >= 1")

    @property
    def width(self) -> int:
        return self.kernel.value.shape[2]

    def output_length(self, n: int) -> int:
        return (n + 2 * self.padding - self.width) // self.stride + 1


@dataclass
class ExpertParams:
    W1: Node  # (d_in, d_h)
    b1: Node
    W2: Node  # (d_h, d_out)
    b2: Node

    def tensors(self) -> tuple[Node, Node, Node, Node]:
        return self.W1, self.b1, self.W2, self.b2


@dataclass
class MonolithicProjector:
    conv: Conv1DParams
    mlp: ExpertParams


@dataclass
class Downsampler:
    conv1: Conv1DParams
    conv2: Conv1DParams

    @property
    def total_stride(self) -> int:
        return self.conv1.stride * self.conv2.stride

    def output_length(self, n: int) -> int:
        return self.conv2.output_length(self.conv1.output_length(n))


@dataclass
class ExpertBank:
    """M shape-identical experts stored as stacked tensors."""

    W1: Node  # (M, d_z, d_h)
    b1: Node  # (M, d_h)
    W2: Node  # (M, d_h, d_llm)
    b2: Node  # (M, d_llm)

    def __post_init__(self):
        m = self.W1.value.shape[0]
        if m < 1:
            raise ValueError("an expert bank needs at least one expert")
        if any(t.value.shape[0] != m for t in (self.b1, self.W2, self.b2)):
            raise DimensionError("expert bank tensors disagree on the number of experts")

    @property
    def M(self) -> int:
        return self.W1.value.shape[0]

    def tensors(self) -> tuple[Node, Node, Node, Node]:
        return self.W1, self.b1, self.W2, self.b2

    def expert(self, m: int) -> ExpertParams:
        if not 0 <= m < self.M:
            raise IndexError(f"expert {m} out of range for a bank of {self.M}")
        return ExpertParams(*(nc.take(t, m) for t in self.tensors()))

    @classmethod
    def from_experts(cls, experts: Sequence[ExpertParams]) -> "ExpertBank":
        shapes = [tuple(t.value.shape for t in e.tensors()) for e in experts]
        if len(set(shapes)) > 1:
            raise DimensionError(f"experts in a bank must be shape-identical, got {shapes}")
        return cls(*(nc.param(np.stack([e.tensors()[i].value for e in experts])) for i in range(4)))


@dataclass(frozen=True)
class LanguageTag:
    id: int
    family: int


# --- init -------------------------------------------------------------------

def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_conv(rng, in_ch, out_ch, width, stride, padding) -> Conv1DParams:
    k = glorot(rng, (out_ch, in_ch, width), in_ch * width, out_ch * width)
    return Conv1DParams(nc.param(k), nc.param(np.zeros(out_ch)), stride, padding)


def init_expert(rng, d_in, d_h, d_out) -> ExpertParams:
    return ExpertParams(
        nc.param(glorot(rng, (d_in, d_h), d_in, d_h)), nc.param(np.zeros(d_h)),
        nc.param(glorot(rng, (d_h, d_out), d_h, d_out)), nc.param(np.zeros(d_out)),
    )


def init_monolithic(rng, dims: Dims) -> MonolithicProjector:
    conv = init_conv(rng, dims.d_enc, dims.d_h, dims.mono_width, dims.mono_stride,
                     dims.mono_width // 2)
    return MonolithicProjector(conv, init_expert(rng, dims.d_h, dims.d_h, dims.d_llm))


def init_downsampler(rng, dims: Dims) -> Downsampler:
    w, (s1, s2) = dims.ds_width, dims.ds_strides
    return Downsampler(init_conv(rng, dims.d_enc, dims.d_h, w, s1, w // 2),
                       init_conv(rng, dims.d_h, dims.d_z, w, s2, w // 2))


def init_bank(rng, dims: Dims) -> ExpertBank:
    shape = (dims.num_experts,)
    return ExpertBank(
        nc.param(glorot(rng, shape + (dims.d_z, dims.d_h), dims.d_z, dims.d_h)),
        nc.param(np.zeros(shape + (dims.d_h,))),
        nc.param(glorot(rng, shape + (dims.d_h, dims.d_llm), dims.d_h, dims.d_llm)),
        nc.param(np.zeros(shape + (dims.d_llm,))),
    )


# --- forwards -----------------------------------------------------------------

def apply_conv(x: Node, p: Conv1DParams) -> Node:
    return nc.conv1d(x, p.kernel, p.bias, p.stride, p.padding)


def expert_forward(z, e: ExpertParams) -> Node:
    """ReLU(z W1 + b1) W2 + b2, row-wise."""
    z = nc.as_node(z)
    if z.value.ndim != 2 or z.value.shape[1] != e.W1.value.shape[0]:
        raise DimensionError(f"expert input {z.value.shape} does not match W1 {e.W1.value.shape}")
    h = nc.relu(nc.add_bias(nc.matmul(z, e.W1), e.b1))
    return nc.add_bias(nc.matmul(h, e.W2), e.b2)


def monolithic_forward(h, p: MonolithicProjector) -> Node:
    h = nc.as_node(h)
    if h.value.ndim != 2 or h.value.shape[1] != p.conv.kernel.value.shape[1]:
        raise DimensionError(
            f"features {h.value.shape} do not match projector input width "
            f"{p.conv.kernel.value.shape[1]}")
    return expert_forward(nc.relu(apply_conv(h, p.conv)), p.mlp)


def language_specific_forward(h, lang: LanguageTag, bank: Sequence[MonolithicProjector]) -> Node:
    if not 0 <= lang.id < len(bank):
        raise KeyError(f"unknown language id {lang.id} for a bank of {len(bank)} projectors")
    return monolithic_forward(h, bank[lang.id])


def tied_forward(h, lang: LanguageTag, groups: Mapping[int, Sequence[int]],
                 bank: Sequence[MonolithicProjector]) -> Node:
    """Mean output of the projectors tied to the utterance's language family."""
    if lang.family not in groups:
        raise KeyError(f"language family {lang.family} has no projector group")
    members = list(groups[lang.family])
    if not members:
        raise ValueError(f"projector group for family {lang.family} is empty")
    h = nc.as_node(h)
    return nc.mean_of([monolithic_forward(h, bank[j]) for j in members])


def dense_ensemble_forward(h, bank: Sequence[MonolithicProjector]) -> Node:
    if not bank:
        raise ValueError("dense ensemble needs at least one projector")
    h = nc.as_node(h)
    return nc.mean_of([monolithic_forward(h, p) for p in bank])


def downsample(h, d: Downsampler) -> Node:
    h = nc.as_node(h)
    return apply_conv(nc.relu(apply_conv(h, d.conv1)), d.conv2)


# --- parameter accounting -----------------------------------------------------

def conv_count(in_ch, out_ch, width) -> int:
    return out_ch * in_ch * width + out_ch


def mlp_count(d_in, d_h, d_out) -> int:
    return d_in * d_h + d_h + d_h * d_out + d_out


def parameter_budget(dims: Dims) -> dict[str, int]:
    """Parameter totals of the three size classes in the zoo."""
    mono = conv_count(dims.d_enc, dims.d_h, dims.mono_width) + mlp_count(dims.d_h, dims.d_h, dims.d_llm)
    down = (conv_count(dims.d_enc, dims.d_h, dims.ds_width)
            + conv_count(dims.d_h, dims.d_z, dims.ds_width))
    experts = dims.num_experts * mlp_count(dims.d_z, dims.d_h, dims.d_llm)
    return {
        "monolithic": mono,
        "multi_projector": dims.num_experts * mono,
        "moe": down + experts + dims.d_z * dims.num_experts,
        "moe_downsampler": down,
        "moe_expert": mlp_count(dims.d_z, dims.d_h, dims.d_llm),
    }
