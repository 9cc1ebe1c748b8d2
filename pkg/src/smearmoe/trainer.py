"""AdamW training loop with warmup, early stopping and per-step routing logs."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DivergenceError
from .routing import load_balance_loss
from .synthtask import Corpus, Utterance, task_loss
from .zoo import Architecture


@dataclass
class TrainConfig:
    lr_peak: float = 1e-3
    warmup_steps: int = 1000
    max_steps: int = 3000
    batch_size: int = 7
    balance_weight: float = 0.2
    patience: int = 10
    eval_interval: int = 100
    seed: int = 0
    schedule: str = "constant"  # constant | cosine
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None

    def validate(self) -> None:
        if self.lr_peak <= 0:
            raise ConfigError("lr_peak", "must be > 0")
        for name in ("warmup_steps", "max_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.max_steps > 0 and self.warmup_steps > self.max_steps:
            raise ConfigError("warmup_steps", "must not exceed max_steps")
        for name in ("batch_size", "eval_interval", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.balance_weight < 0:
            raise ConfigError("balance_weight", "must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError("schedule", f"unknown schedule {self.schedule!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm", "must be > 0")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak``, then constant (or cosine to zero)."""
    if step < 1:
        raise ValueError("steps are 1-based")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr_peak * (step / cfg.warmup_steps)
    if cfg.schedule == "cosine" and cfg.max_steps > cfg.warmup_steps:
        frac = min(1.0, (step - cfg.warmup_steps) / (cfg.max_steps - cfg.warmup_steps))
        return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * frac))
    return cfg.lr_peak


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    With ``weight_decay == 0`` the decay line is skipped entirely, so the
    update is exactly Adam's.
    """

    def __init__(self, params: Mapping[str, nc.Node], beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        for k, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in parameter {k!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if self.weight_decay != 0.0:
                p.value *= 1.0 - lr * self.weight_decay
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainReport:
    architecture: str
    num_experts: int
    steps: list[int] = field(default_factory=list)
    total_loss: list[float] = field(default_factory=list)
    task_loss: list[float] = field(default_factory=list)
    balance_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    grad_norms: list[np.ndarray] = field(default_factory=list)
    utilization: list[np.ndarray] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)
    dev_loss: list[float] = field(default_factory=list)
    best_dev_loss: float = math.inf
    best_step: int = 0
    stop_step: int = 0
    test_loss: float | None = None
    wall_clock: float = 0.0
    diverged: bool = False

    def to_csv(self) -> str:
        m = self.num_experts
        head = (["step", "total_loss", "task_loss", "balance_loss", "lr"]
                + [f"grad_norm_e{j}" for j in range(m)] + [f"util_e{j}" for j in range(m)])
        lines = [",".join(head)]
        for i, s in enumerate(self.steps):
            vals = [self.total_loss[i], self.task_loss[i], self.balance_loss[i], self.lr[i],
                    *self.grad_norms[i], *self.utilization[i]]
            lines.append(str(s) + "," + ",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"

    def summary(self, collapse_threshold: float = 0.05) -> dict:
        verdict = detect_collapse(self, collapse_threshold) if self.steps else [False] * self.num_experts
        return {
            "architecture": self.architecture,
            "best_dev_loss": self.best_dev_loss,
            "best_step": self.best_step,
            "stop_step": self.stop_step,
            "test_loss": self.test_loss,
            "collapsed": verdict,
            "num_collapsed": int(sum(verdict)),
            "collapse_threshold": collapse_threshold,
            "eval_steps": self.eval_steps,
            "dev_loss": self.dev_loss,
            "wall_clock_seconds": self.wall_clock,
            "diverged": self.diverged,
        }

    def summary_json(self, collapse_threshold: float = 0.05) -> str:
        return json.dumps(self.summary(collapse_threshold), indent=2)


def detect_collapse(report: TrainReport, threshold: float = 0.05) -> list[bool]:
    """Expert m is collapsed if its mean utilization over the final 20% of steps is below threshold."""
    if not report.utilization:
        raise ValueError("report has no steps")
    util = np.asarray(report.utilization)
    n = util.shape[0]
    window = max(1, int(math.ceil(0.2 * n)))
    tail = util[n - window:].mean(axis=0)
    return [bool(u < threshold) for u in tail]


def evaluate(model: Architecture, utterances: list[Utterance]) -> float:
    """Mean task loss over utterances, without building a tape."""
    if not utterances:
        return math.nan
    total = 0.0
    with nc.no_grad():
        for u in utterances:
            total += float(task_loss(model.forward(u.features, u.language).output, u.target).value)
    return total / len(utterances)


def batch_balance_loss(gates: list[nc.Node], assignments: list[np.ndarray]) -> nc.Node:
    """Balance loss over every token of the batch, pooled across utterances."""
    return load_balance_loss(nc.concat_rows(gates), np.concatenate(assignments))


def _clip(params, max_norm: float) -> None:
    sq = sum(float((p.grad * p.grad).sum()) for p in params)
    norm = math.sqrt(sq)
    if norm > max_norm:
        s = max_norm / norm
        for p in params:
            p.grad *= s


def train(model: Architecture, corpus: Corpus, cfg: TrainConfig, log=None) -> TrainReport:
    """Optimise ``model`` in place and return the per-step report.

    Batches are drawn from a per-epoch shuffle of the training split; the
    batch loss is the mean of per-utterance task losses, accumulated in
    batch order, plus the weighted balance loss over all of the batch's
    tokens for gated models. Dev loss is measured every ``eval_interval`` steps and the
    parameters from the best evaluation are restored at the end.
    """
    cfg.validate()
    start = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 29]))
    params = model.params
    plist = list(params.values())
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    report = TrainReport(model.name, model.num_experts)
    weight = cfg.balance_weight if model.gated else 0.0

    def run_eval(step):
        loss = evaluate(model, corpus.dev)
        report.eval_steps.append(step)
        report.dev_loss.append(loss)
        if loss < report.best_dev_loss:
            report.best_dev_loss, report.best_step = loss, step
            return True, model.state()
        return False, None

    _, best_state = run_eval(0)
    bad_evals = 0
    order: list[int] = []
    data = corpus.train
    step = 0
    for step in range(1, cfg.max_steps + 1):
        if len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(data)).tolist())
        batch = [data[i] for i in order[:cfg.batch_size]]
        del order[:cfg.batch_size]

        nc.zero_grads(plist)
        losses, gates, assigned, usage = [], [], [], np.zeros(model.num_experts)
        for u in batch:
            res = model.forward(u.features, u.language)
            losses.append(task_loss(res.output, u.target))
            usage += res.usage
            if model.gated:
                gates.append(res.gates)
                assigned.append(res.assignments)
        task = nc.scale(nc.sum_nodes(losses), 1.0 / len(batch))
        bal = batch_balance_loss(gates, assigned) if gates else None
        root = nc.add(task, nc.scale(bal, weight)) if (bal is not None and weight) else task
        total = float(root.value)
        if not math.isfinite(total):
            report.diverged = True
            report.stop_step = step
            report.wall_clock = time.perf_counter() - start
            raise DivergenceError(f"non-finite loss at step {step}", report)
        root.backward()
        if cfg.clip_norm is not None:
            _clip(plist, cfg.clip_norm)
        lr = lr_at(step, cfg)
        norms = model.expert_grad_norms()
        try:
            opt.step(lr)
        except DivergenceError as exc:
            report.diverged = True
            report.stop_step = step
            report.wall_clock = time.perf_counter() - start
            raise DivergenceError(str(exc), report) from exc

        report.steps.append(step)
        report.total_loss.append(total)
        report.task_loss.append(float(task.value))
        report.balance_loss.append(float(bal.value) if bal is not None else 0.0)
        report.lr.append(lr)
        report.grad_norms.append(norms)
        report.utilization.append(usage / len(batch))

        if step % cfg.eval_interval == 0:
            improved, state = run_eval(step)
            if improved:
                best_state, bad_evals = state, 0
            else:
                bad_evals += 1
            if log is not None:
                log(f"step {step} train {total:.5f} dev {report.dev_loss[-1]:.5f}")
            if bad_evals >= cfg.patience:
                break
    report.stop_step = step
    if best_state is not None:
        model.load_state(best_state)
    if corpus.test:
        report.test_loss = evaluate(model, corpus.test)
    report.wall_clock = time.perf_counter() - start
    return report
