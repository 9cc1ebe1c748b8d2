"""Gating, hard top-k routing, SMEAR merging and routing statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import DimensionError, EmptySequenceError
from .numcore import Node
from .projectors import ExpertBank, ExpertParams, expert_forward


@dataclass
class GateParams:
    W_g: Node  # (d_z, M)

    @property
    def M(self) -> int:
        return self.W_g.value.shape[1]


@dataclass(frozen=True)
class TopKSelection:
    indices: tuple[int, ...]
    weights: tuple[float, ...]


def gate(z, gp: GateParams) -> Node:
    """Token-level routing probabilities softmax(Z W_g), shape (T', M)."""
    z = nc.as_node(z)
    if z.value.ndim != 2 or z.value.shape[1] != gp.W_g.value.shape[0]:
        raise DimensionError(f"gate input {z.value.shape} does not match W_g {gp.W_g.value.shape}")
    return nc.softmax_rows(nc.matmul(z, gp.W_g))


def utterance_gate(g: Node) -> Node:
    return nc.mean_over_time(g)


def topk(weights, k: int) -> TopKSelection:
    """Indices of the k largest weights, ties going to the lower index.

    Weights are returned as given, without renormalisation.
    """
    w = np.asarray(weights, dtype=np.float64)
    if not 1 <= k <= w.shape[0]:
        raise ValueError(f"k={k} out of range for {w.shape[0]} experts")
    # stable sort on -w keeps lower indices first among equal values
    order = np.argsort(-w, kind="stable")[:k]
    return TopKSelection(tuple(int(i) for i in order), tuple(float(w[i]) for i in order))


def topk_rows(g: np.ndarray, k: int) -> np.ndarray:
    """Row-wise ``topk`` indices, shape (T, k)."""
    if not 1 <= k <= g.shape[1]:
        raise ValueError(f"k={k} out of range for {g.shape[1]} experts")
    return np.argsort(-g, axis=1, kind="stable")[:, :k]


def _renormalized(gbar: Node, idx: Sequence[int]) -> list[Node]:
    """Selected gate values divided by their sum, differentiable in ``gbar``."""
    picks = [nc.pick(gbar, j) for j in idx]
    total = float(sum(float(p.value) for p in picks))
    return [_ratio(p, picks, total) for p in picks]


def _ratio(num: Node, parts: Sequence[Node], total: float) -> Node:
    share = float(num.value) / total

    def factory(out):
        def fn(g):
            g = float(g)
            for p in parts:
                d = (1.0 if p is num else 0.0) / total - share / total
                nc.graph._acc(p, np.asarray(g * d))
        return fn

    return nc.graph._make(np.asarray(share), tuple(parts), factory, "ratio")


@dataclass
class MoEOutput:
    output: Node
    gates: Node
    gbar: Node | None = None
    # top-1 expert per token, used for the balance loss
    assignments: np.ndarray | None = None
    # share of this utterance's routing mass that each expert received
    usage: np.ndarray | None = None
    selection: TopKSelection | None = None


def utterance_moe_forward(z, bank: ExpertBank, gp: GateParams, k: int,
                          renormalize: bool = False) -> MoEOutput:
    """Route the whole utterance to the top-k experts of the time-averaged gate."""
    z = nc.as_node(z)
    if gp.M != bank.M:
        raise DimensionError(f"gate has {gp.M} experts, bank has {bank.M}")
    g = gate(z, gp)
    gbar = utterance_gate(g)
    sel = topk(gbar.value, k)
    if renormalize:
        coeffs = _renormalized(gbar, sel.indices)
    else:
        coeffs = [nc.pick(gbar, j) for j in sel.indices]
    terms = [nc.mul_scalar(c, expert_forward(z, bank.expert(j))) for c, j in zip(coeffs, sel.indices)]
    out = terms[0] if len(terms) == 1 else nc.sum_nodes(terms)
    usage = np.zeros(bank.M)
    usage[list(sel.indices)] = 1.0 / k
    assignments = np.full(g.value.shape[0], sel.indices[0], dtype=np.intp)
    return MoEOutput(out, g, gbar, assignments, usage, sel)


def token_moe_forward(z, bank: ExpertBank, gp: GateParams, k: int,
                      renormalize: bool = False) -> MoEOutput:
    """Per-token top-k routing; each expert sees only the rows routed to it."""
    z = nc.as_node(z)
    if gp.M != bank.M:
        raise DimensionError(f"gate has {gp.M} experts, bank has {bank.M}")
    g = gate(z, gp)
    n = g.value.shape[0]
    chosen = topk_rows(g.value, k)
    if renormalize:
        denom = np.take_along_axis(g.value, chosen, axis=1).sum(axis=1)
    parts = []
    d_out = bank.W2.value.shape[2]
    for j in range(bank.M):
        rows = np.nonzero((chosen == j).any(axis=1))[0]
        if rows.size == 0:
            continue
        y = expert_forward(nc.gather_rows(z, rows), bank.expert(j))
        w = nc.column_entries(g, rows, j)
        if renormalize:
            w = _divide_rows(w, g, rows, chosen[rows])
        parts.append((rows, nc.scale_rows(w, y)))
    out = nc.scatter_rows(parts, n, d_out)
    usage = np.bincount(chosen.reshape(-1), minlength=bank.M) / chosen.size
    return MoEOutput(out, g, None, chosen[:, 0].copy(), usage)


def _divide_rows(w: Node, g: Node, rows: np.ndarray, chosen: np.ndarray) -> Node:
    """w[r] / sum_{j in chosen[r]} g[rows[r], j], differentiable in g."""
    sel = g.value[rows[:, None], chosen]
    s = sel.sum(axis=1)
    value = w.value / s

    def factory(out):
        def fn(grad):
            nc.graph._acc(w, grad / s)
            if g.requires_grad:
                if g.grad is None:
                    g.grad = np.zeros_like(g.value)
                corr = -grad * w.value / s ** 2
                for c in range(chosen.shape[1]):
                    np.add.at(g.grad, (rows, chosen[:, c]), corr)
        return fn

    return nc.graph._make(value, (w, g), factory, "divide_rows")


def smear_merge(bank: ExpertBank, gbar) -> ExpertParams:
    """Convex combination of every expert tensor weighted by the utterance gate."""
    gbar = nc.as_node(gbar)
    if gbar.value.shape != (bank.M,):
        raise DimensionError(f"gate vector {gbar.value.shape} does not match a bank of {bank.M}")
    return ExpertParams(*(nc.weighted_sum(gbar, t) for t in bank.tensors()))


def smear_forward(z, bank: ExpertBank, gp: GateParams) -> MoEOutput:
    """Apply the gate-merged virtual expert once to the whole sequence."""
    z = nc.as_node(z)
    if gp.M != bank.M:
        raise DimensionError(f"gate has {gp.M} experts, bank has {bank.M}")
    g = gate(z, gp)
    gbar = utterance_gate(g)
    out = expert_forward(z, smear_merge(bank, gbar))
    return MoEOutput(out, g, gbar, np.argmax(g.value, axis=1), gbar.value.copy())


def load_balance_loss(g: Node, assignments: np.ndarray | None = None) -> Node:
    """Switch-style auxiliary loss ``M * sum_m f_m * p_m``.

    ``p_m`` is the mean gate probability of expert m; ``f_m`` is the fraction
    of tokens whose top-1 expert is m, taken from ``assignments`` when hard
    routing happened and from the argmax of each gate row otherwise. Only
    ``p`` carries gradient. Uniform gates give 1.0, total collapse gives M.
    """
    n, m = g.value.shape
    if n == 0:
        raise EmptySequenceError("balance loss over an empty sequence")
    if assignments is None:
        assignments = np.argmax(g.value, axis=1)
    f = np.bincount(np.asarray(assignments, dtype=np.intp), minlength=m) / n
    p = nc.mean_over_time(g)
    return nc.scale(nc.dot_const(p, f), m)


def entropy(u: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    nz = u[u > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class RoutingStats:
    languages: list[str]
    heatmap: np.ndarray  # (L, M) mean utterance gate per language
    utilization: np.ndarray  # (M,)
    utilization_entropy: float
    grad_norms: np.ndarray  # (M,)
    counts: list[int] = field(default_factory=list)


def collect_routing_stats(utterances, model, language_names: Sequence[str] | None = None,
                          grad_batch: int = 7, balance_weight: float = 0.0) -> RoutingStats:
    """Per-language mean gates, utilization and per-expert gradient norms.

    ``model`` is any zoo architecture. For architectures without a learned
    gate the per-utterance usage vector (static routing weights) stands in
    for the utterance gate. Gradient norms come from one backward pass over
    the first ``grad_batch`` utterances.
    """
    from .synthtask import total_loss

    utterances = list(utterances)
    if not utterances:
        raise EmptySequenceError("routing statistics need at least one utterance")
    n_lang = max(u.language.id for u in utterances) + 1
    if language_names is not None:
        n_lang = max(n_lang, len(language_names))
    names = list(language_names) if language_names is not None else [f"lang{i}" for i in range(n_lang)]
    m = model.num_experts
    sums = np.zeros((n_lang, m))
    counts = np.zeros(n_lang, dtype=int)
    usage_sum = np.zeros(m)
    with nc.no_grad():
        for u in utterances:
            res = model.forward(u.features, u.language)
            vec = res.gbar.value if res.gbar is not None else res.usage
            sums[u.language.id] += vec
            counts[u.language.id] += 1
            usage_sum += res.usage
    seen = counts > 0
    heat = np.zeros_like(sums)
    heat[seen] = sums[seen] / counts[seen, None]
    util = usage_sum / len(utterances)

    params = list(model.params.values())
    nc.zero_grads(params)
    batch = utterances[:grad_batch]
    losses = []
    for u in batch:
        res = model.forward(u.features, u.language)
        losses.append(total_loss(res.output, u.target, res.gates if model.gated else None,
                                 balance_weight, res.assignments))
    root = nc.scale(nc.sum_nodes(losses), 1.0 / len(losses))
    root.backward()
    norms = model.expert_grad_norms()
    nc.zero_grads(params)
    keep = [i for i in range(n_lang) if seen[i]]
    return RoutingStats([names[i] for i in keep], heat[keep], util, entropy(util), norms,
                        [int(counts[i]) for i in keep])


def heatmap_csv(stats: RoutingStats) -> str:
    m = stats.heatmap.shape[1]
    lines = ["language," + ",".join(f"expert_{j}" for j in range(m))]
    for name, row in zip(stats.languages, stats.heatmap):
        lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def family_similarity(heatmap: np.ndarray, families: Sequence[int]) -> tuple[float, float]:
    """Mean cosine similarity of heatmap rows for same-family vs cross-family pairs."""
    same, cross = [], []
    for i in range(len(families)):
        for j in range(i + 1, len(families)):
            c = cosine(heatmap[i], heatmap[j])
            (same if families[i] == families[j] else cross).append(c)
    mean = lambda xs: float(np.mean(xs)) if xs else math.nan  # noqa: E731
    return mean(same), mean(cross)
