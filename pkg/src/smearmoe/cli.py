"""Command-line front end: run, gradcheck, bench, sweep, heatmap.

Exit codes: 0 success, 1 a check failed (gradcheck), 2 configuration error,
3 training divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from . import config as cfgmod
from . import numcore as nc
from .config import ExperimentConfig
from .errors import ConfigError, DivergenceError
from .io import atomic_write
from .numcore.kernels import BACKEND
from .projectors import Dims, LanguageTag, downsample, expert_forward
from .routing import collect_routing_stats, heatmap_csv
from .synthtask import CorpusConfig, corpus_to_json, generate_corpus, task_loss
from .trainer import TrainReport, batch_balance_loss, train
from .zoo import ARCHITECTURES, HARD_MOE, Architecture, build

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

GRADCHECK_DIMS = Dims(d_enc=8, d_h=8, d_z=6, d_llm=6, num_experts=3)
GRADCHECK_T = 12
GRADCHECK_TOL = 1e-5


class _Console:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def info(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr)

    def error(self, msg: str) -> None:
        print(f"error: {msg}", file=sys.stderr)


def model_for(cfg: ExperimentConfig) -> Architecture:
    return build(cfg.architecture, cfg.dims, seed=cfg.seed, k=cfg.k,
                 num_languages=cfg.corpus.num_languages, num_families=cfg.corpus.num_families,
                 renormalize=cfg.renormalize)


# --- run ------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out: Path, console: _Console) -> TrainReport:
    """Train one configuration and write every artifact into ``out``.

    Raises DivergenceError after writing the partial report and summary.
    """
    out.mkdir(parents=True, exist_ok=True)
    echo = cfgmod.dump(cfg)
    atomic_write(out / "config.yaml", echo)
    console.info(echo.rstrip())

    corpus = generate_corpus(cfg.corpus)
    if cfg.save_corpus:
        atomic_write(out / "corpus.json", corpus_to_json(corpus))
    model = model_for(cfg)
    try:
        report = train(model, corpus, cfg.train, log=console.info)
    except DivergenceError as exc:
        if exc.report is not None:
            atomic_write(out / "report.csv", exc.report.to_csv())
            atomic_write(out / "summary.json", exc.report.summary_json())
        raise

    stats = collect_routing_stats(corpus.test or corpus.dev, model, corpus.language_names,
                                  balance_weight=cfg.train.balance_weight)
    summary = report.summary()
    summary.update({
        "num_parameters": model.num_parameters(),
        "utilization": stats.utilization.tolist(),
        "utilization_entropy": stats.utilization_entropy,
        "expert_grad_norms": stats.grad_norms.tolist(),
        "seed": cfg.seed,
    })
    atomic_write(out / "report.csv", report.to_csv())
    atomic_write(out / "summary.json", json.dumps(summary, indent=2))
    atomic_write(out / "heatmap.csv", heatmap_csv(stats))
    # the output location is not part of the model's identity
    embedded = cfg.to_dict()
    embedded.pop("output_dir")
    checkpoint.save(out / "checkpoint.json", model.state(), embedded)
    return report


def _resolve_config(args) -> ExperimentConfig:
    if args.config is None:
        return cfgmod.from_dict({}, args.seed, args.out)
    return cfgmod.load(args.config, args.seed, args.out)


def cmd_run(args, console: _Console) -> int:
    cfg = _resolve_config(args)
    if cfg.output_dir is None:
        raise ConfigError("output_dir", "set output_dir in the config or pass --out")
    out = Path(cfg.output_dir)
    try:
        report = run_experiment(cfg, out, console)
    except DivergenceError as exc:
        console.error(f"training diverged: {exc}")
        return EXIT_DIVERGED
    console.info(f"best dev {report.best_dev_loss:.6f} at step {report.best_step}; "
                 f"test {report.test_loss:.6f}; artifacts in {out}")
    return EXIT_OK


# --- gradcheck -------------------------------------------------------------------

def gradcheck_problem(arch: str, seed: int, dims: Dims = GRADCHECK_DIMS, T: int = GRADCHECK_T,
                      k: int = 1, balance_weight: float = 0.2):
    """Small model plus a closure computing its full training loss on one batch.

    The batch holds one random utterance per language so every projector of
    the static variants is on the tape.
    """
    n_lang = dims.num_experts
    model = build(arch, dims, seed=seed, k=k if arch in HARD_MOE else None,
                  num_languages=n_lang, num_families=2)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    t_out = -(-T // dims.total_stride)
    batch = [(rng.normal(size=(T, dims.d_enc)), rng.normal(size=(t_out, dims.d_llm)),
              LanguageTag(j, j * 2 // n_lang)) for j in range(n_lang)]
    weight = balance_weight if model.gated else 0.0

    def loss():
        losses, gates, assigned = [], [], []
        for feats, target, lang in batch:
            res = model.forward(feats, lang)
            losses.append(task_loss(res.output, target))
            if model.gated:
                gates.append(res.gates)
                assigned.append(res.assignments)
        root = nc.scale(nc.sum_nodes(losses), 1.0 / len(losses))
        if gates and weight:
            root = nc.add(root, nc.scale(batch_balance_loss(gates, assigned), weight))
        return root

    return model, loss


def gradcheck_architecture(arch: str, seed: int, k: int = 1, eps: float = 1e-5) -> dict[str, float]:
    """Max relative error per parameter group for one seed."""
    model, loss = gradcheck_problem(arch, seed, k=k)
    names = list(model.params)
    errs = nc.finite_diff_check(loss, [model.params[n] for n in names], eps=eps,
                                rng=np.random.default_rng(seed), per_param=True)
    return dict(zip(names, errs))


def cmd_gradcheck(args, console: _Console) -> int:
    archs = _arch_list(args.arch)
    seeds = range(args.seed or 0, (args.seed or 0) + args.seeds)
    rows = ["architecture,seed,parameter,max_relative_error"]
    worst_overall = 0.0
    start = time.perf_counter()
    for arch in archs:
        worst: dict[str, float] = {}
        for seed in seeds:
            for name, err in gradcheck_architecture(arch, seed, k=args.k).items():
                rows.append(f"{arch},{seed},{name},{err!r}")
                worst[name] = max(worst.get(name, 0.0), err)
        ok = all(e < GRADCHECK_TOL for e in worst.values())
        worst_overall = max(worst_overall, *worst.values())
        if not args.quiet:
            for name, err in worst.items():
                print(f"{arch:18s} {name:28s} {err:.3e}")
        print(f"{arch}: {'PASS' if ok else 'FAIL'} max relative error {max(worst.values()):.3e} "
              f"over {len(seeds)} seeds")
    console.info(f"gradcheck finished in {time.perf_counter() - start:.1f}s")
    if args.out:
        atomic_write(Path(args.out) / "gradcheck.csv", "\n".join(rows) + "\n")
    return EXIT_OK if worst_overall < GRADCHECK_TOL else EXIT_FAIL


# --- bench -------------------------------------------------------------------------

@dataclass
class BenchRow:
    architecture: str
    mean: float
    std: float
    repeats: int
    utterances: int


# speech encoders of the Whisper family pad every input to a 30 s window, so a
# projector behind one always sees 1500 frames
BENCH_FRAMES = (1500, 1500)
# downsampler plus one expert of the gated models, with no gate: the plain
# projector whose size matches a single expert
SINGLE_EXPERT = "single_expert"


def _bench_forward(arch: str, dims: Dims, seed: int, ccfg: CorpusConfig):
    if arch == SINGLE_EXPERT:
        model = build("smear", dims, seed=seed)
        expert = model.bank.expert(0)
        return lambda u: expert_forward(downsample(u.features, model.down), expert)
    model = build(arch, dims, seed=seed, k=1 if arch in HARD_MOE else None,
                  num_languages=ccfg.num_languages, num_families=ccfg.num_families)
    return lambda u: model.forward(u.features, u.language)


def bench(archs: Sequence[str], repeats: int = 5, utterances: int = 50, dims: Dims | None = None,
          corpus_cfg: CorpusConfig | None = None, seed: int = 0,
          frames: tuple[int, int] = BENCH_FRAMES) -> list[BenchRow]:
    """Forward wall-clock per utterance under ``no_grad``, same inputs for every model.

    Utterance lengths are drawn from ``frames`` rather than the training
    corpus, so that the comparison reflects realistic encoder output lengths
    rather than fixed per-call interpreter overhead.
    """
    if repeats < 1 or utterances < 1:
        raise ValueError("repeats and utterances must be >= 1")
    dims = dims or Dims()
    base = corpus_cfg or CorpusConfig(d_enc=dims.d_enc, d_llm=dims.d_llm, stride=dims.total_stride)
    ccfg = dataclasses.replace(base, n_train=0, n_dev=0, seed=seed, t_min=frames[0], t_max=frames[1],
                               n_test=-(-utterances // base.num_languages))
    utts = generate_corpus(ccfg).test[:utterances]
    forwards = [_bench_forward(arch, dims, seed, ccfg) for arch in archs]
    times: list[list[float]] = [[] for _ in archs]
    with nc.no_grad():
        for forward in forwards:
            for u in utts[:5]:  # warm caches and lazy imports
                forward(u)
        # round-robin so drift in machine speed hits every architecture alike
        for _ in range(repeats):
            for forward, samples in zip(forwards, times):
                t0 = time.perf_counter()
                for u in utts:
                    forward(u)
                samples.append((time.perf_counter() - t0) / len(utts))
    return [BenchRow(arch, float(np.mean(t)), float(np.std(t)), repeats, len(utts))
            for arch, t in zip(archs, times)]


def bench_csv(rows: Sequence[BenchRow], reference: str = "monolithic") -> str:
    ref = next((r.mean for r in rows if r.architecture == reference), None)
    lines = ["architecture,mean_seconds_per_utterance,std_seconds_per_utterance,repeats,"
             f"utterances,relative_to_{reference},backend"]
    for r in rows:
        rel = repr(r.mean / ref) if ref else ""
        lines.append(f"{r.architecture},{r.mean!r},{r.std!r},{r.repeats},{r.utterances},{rel},{BACKEND}")
    return "\n".join(lines) + "\n"


def cmd_bench(args, console: _Console) -> int:
    archs = (_arch_list(args.arch, extra=(SINGLE_EXPERT,)) if args.arch
             else ["monolithic", SINGLE_EXPERT, "smear", "dense_ensemble"])
    dims, ccfg, seed = Dims(), None, args.seed or 0
    if args.config is not None:
        cfg = cfgmod.load(args.config, args.seed)
        dims, ccfg, seed = cfg.dims, cfg.corpus, cfg.seed
    if args.repeats < 1:
        raise ConfigError("repeats", "must be >= 1")
    if args.utterances < 1:
        raise ConfigError("utterances", "must be >= 1")
    frames = _int_list(args.frames, "frames")
    if len(frames) != 2 or not dims.mono_width <= frames[0] <= frames[1]:
        raise ConfigError("frames", f"expected MIN,MAX with {dims.mono_width} <= MIN <= MAX")
    text = bench_csv(bench(archs, args.repeats, args.utterances, dims, ccfg, seed, tuple(frames)))
    if args.out:
        atomic_write(Path(args.out) / "bench.csv", text)
    if not args.quiet or not args.out:
        sys.stdout.write(text)
    return EXIT_OK


# --- sweep -------------------------------------------------------------------------

SWEEP_HEADER = "architecture,seed,test_loss,best_dev_loss,num_collapsed,stop_step,wall_clock_seconds,diverged"


def _sweep_cell(base: dict, arch: str, seed: int, out: Path, quiet: bool) -> str:
    data = dict(base)
    data["architecture"] = arch
    if arch in HARD_MOE:
        data["k"] = data.get("k") or 1
    else:
        data.pop("k", None)
        data.pop("renormalize", None)
    cell = out / arch / f"seed_{seed}"
    cfg = cfgmod.from_dict(data, seed, str(cell))
    try:
        report = run_experiment(cfg, cell, _Console(True))
        diverged = False
    except DivergenceError as exc:
        report, diverged = exc.report, True
    s = report.summary()
    test = report.test_loss if report.test_loss is not None else math.nan
    if not quiet:
        print(f"{arch} seed {seed}: test {test:.6f}", file=sys.stderr)
    return (f"{arch},{seed},{test!r},{report.best_dev_loss!r},{s['num_collapsed']},"
            f"{report.stop_step},{report.wall_clock!r},{int(diverged)}")


def sweep_means(rows: Sequence[str]) -> str:
    by_arch: dict[str, list[tuple[float, int]]] = {}
    for line in rows:
        f = line.split(",")
        by_arch.setdefault(f[0], []).append((float(f[2]), int(f[4])))
    lines = ["architecture,n_seeds,mean_test_loss,std_test_loss,mean_collapsed"]
    for arch, vals in by_arch.items():
        losses = np.array([v[0] for v in vals])
        coll = np.array([v[1] for v in vals])
        lines.append(f"{arch},{len(vals)},{float(losses.mean())!r},{float(losses.std())!r},"
                     f"{float(coll.mean())!r}")
    return "\n".join(lines) + "\n"


def cmd_sweep(args, console: _Console) -> int:
    if args.out is None:
        raise ConfigError("out", "sweep needs --out")
    base = {}
    if args.config is not None:
        base = cfgmod.load(args.config).to_dict()
        base.pop("output_dir", None)
        if base.get("corpus", {}).get("seed") == base.get("seed"):
            # the echo pins corpus.seed; let each sweep seed draw its own corpus
            base["corpus"].pop("seed")
        base.pop("seed", None)
    archs = _arch_list(args.arch)
    seeds = _int_list(args.seeds, "seeds")
    out = Path(args.out)
    cells = [(a, s) for a in archs for s in seeds]
    # validate every cell before spending time on any of them
    for a, s in cells:
        probe = dict(base, architecture=a)
        if a in HARD_MOE:
            probe["k"] = probe.get("k") or 1
        else:
            probe.pop("k", None)
            probe.pop("renormalize", None)
        cfgmod.from_dict(probe, s, str(out))
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_sweep_cell, *zip(*[(base, a, s, out, args.quiet) for a, s in cells])))
    else:
        rows = [_sweep_cell(base, a, s, out, args.quiet) for a, s in cells]
    atomic_write(out / "sweep.csv", SWEEP_HEADER + "\n" + "\n".join(rows) + "\n")
    means = sweep_means(rows)
    atomic_write(out / "means.csv", means)
    if not args.quiet:
        sys.stdout.write(means)
    return EXIT_DIVERGED if any(r.endswith(",1") for r in rows) else EXIT_OK


# --- heatmap -----------------------------------------------------------------------

def cmd_heatmap(args, console: _Console) -> int:
    try:
        state, saved = checkpoint.load(args.checkpoint)
    except (OSError, checkpoint.CheckpointError) as exc:
        raise ConfigError("checkpoint", str(exc)) from None
    if saved is None:
        raise ConfigError("checkpoint", "checkpoint has no embedded config")
    saved = dict(saved)
    saved.pop("output_dir", None)
    cfg = cfgmod.from_dict(saved)
    model = model_for(cfg)
    try:
        model.load_state(state)
    except (KeyError, ValueError) as exc:
        raise ConfigError("checkpoint", str(exc)) from None
    corpus = generate_corpus(cfg.corpus)
    utts = corpus.split(args.split)
    if not utts:
        raise ConfigError("split", f"split {args.split!r} is empty")
    text = heatmap_csv(collect_routing_stats(utts, model, corpus.language_names))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    atomic_write(out / "heatmap.csv", text)
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------------

def _arch_list(text: str | None, extra: Sequence[str] = ()) -> list[str]:
    if not text:
        return list(ARCHITECTURES)
    names = [a.strip() for a in text.split(",") if a.strip()]
    for a in names:
        if a not in ARCHITECTURES and a not in extra:
            raise ConfigError("architecture", f"unknown architecture {a!r}")
    return names


def _int_list(text: str, field: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(field, f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML experiment config")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, metavar="N", help="overrides the config seed")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(prog="smearmoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="train one configuration")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    p.add_argument("--arch", help="comma-separated architectures (default: all)")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds, starting at --seed")
    p.add_argument("--k", type=int, default=1, help="top-k for hard MoE variants")

    p = sub.add_parser("bench", parents=[common], help="forward-pass timing table")
    p.add_argument("--arch", help="comma-separated architectures")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--utterances", type=int, default=50)
    p.add_argument("--frames", default=f"{BENCH_FRAMES[0]},{BENCH_FRAMES[1]}",
                   help="utterance length range MIN,MAX in encoder frames")

    p = sub.add_parser("sweep", parents=[common], help="architecture x seed grid")
    p.add_argument("--arch", help="comma-separated architectures (default: all)")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("heatmap", parents=[common], help="re-export heatmap.csv from a checkpoint")
    p.add_argument("checkpoint", help="checkpoint.json written by run")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    return parser


COMMANDS = {"run": cmd_run, "gradcheck": cmd_gradcheck, "bench": cmd_bench,
            "sweep": cmd_sweep, "heatmap": cmd_heatmap}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    console = _Console(args.quiet)
    try:
        return COMMANDS[args.command](args, console)
    except ConfigError as exc:
        console.error(f"config error in field {exc.field!r}: {str(exc).split(': ', 1)[-1]}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
