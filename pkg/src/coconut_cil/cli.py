"""Command-line entry point.

Every subcommand accepts ``--config FILE``: a JSON object whose keys are the
subcommand's flag names (dashes or underscores). Flags given on the command
line override the file. Exit status is 1 on an invariant violation or a failed
gradient check, 2 on bad configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import NSPT_VARIANTS, STRATEGIES, CorpusSpec, LossConfig, ModelConfig, StrategyConfig
from .data import generate_corpus, load_corpus, save_corpus
from .harness import DivergenceError, InvariantViolation, run_experiment
from .metrics import aggregate, export_results, format_table, load_record, summarize

log = logging.getLogger("coconut_cil")

B = argparse.BooleanOptionalAction


def _ints(s: str) -> list[int]:
    return [int(x) for x in str(s).split(",") if x != ""]


def _strs(s: str) -> list[str]:
    return [x for x in str(s).split(",") if x]


# ---------------------------------------------------------------------------
# flag groups; every dest equals a dataclass field or a command option
# ---------------------------------------------------------------------------

CORPUS_FLAGS = {f.name for f in dataclasses.fields(CorpusSpec)} - {"seed", "samples_per_intent"}
LOSS_FLAGS = {f.name for f in dataclasses.fields(LossConfig)}
MODEL_FLAGS = {"d_audio", "d_text", "d_shared"}
STRATEGY_FLAGS = {f.name for f in dataclasses.fields(StrategyConfig)} - {"loss", "model", "seed"}


def add_corpus_flags(p):
    g = p.add_argument_group("corpus")
    g.add_argument("--num-intents", type=int)
    g.add_argument("--min-samples", type=int)
    g.add_argument("--max-samples", type=int)
    g.add_argument("--num-words", type=int)
    g.add_argument("--min-slots", type=int)
    g.add_argument("--max-slots", type=int)
    g.add_argument("--options-per-slot", type=int)
    g.add_argument("--d-in", type=int)
    g.add_argument("--frames-per-word", type=int)
    g.add_argument("--noise-std", type=float)
    g.add_argument("--test-fraction", type=float)
    g.add_argument("--corpus-seed", type=int, help="generator seed (default 0)")


def add_train_flags(p, strategy=True):
    p.add_argument("--corpus", help="corpus directory from generate-data; generated in memory if omitted")
    add_corpus_flags(p)
    g = p.add_argument_group("protocol")
    if strategy:
        g.add_argument("--strategy", choices=STRATEGIES)
    g.add_argument("--selection", choices=("random", "herding"))
    g.add_argument("--exemplars-per-class", type=int)
    g.add_argument("--buffer-fraction", type=float, help="buffer size as a fraction of the training set")
    g.add_argument("--mix-ratio", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs-first", type=int)
    g.add_argument("--epochs-rest", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--eps", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--beam-width", type=int)
    g.add_argument("--spec-aug", action=B)
    g.add_argument("--num-tasks", type=int)
    g.add_argument("--seeds", type=_ints, help="comma-separated run seeds (default 0)")
    g.add_argument("--jobs", type=int, help="parallel worker processes")
    m = p.add_argument_group("model")
    m.add_argument("--d-audio", type=int)
    m.add_argument("--d-text", type=int)
    m.add_argument("--d-shared", type=int)
    lg = p.add_argument_group("loss")
    lg.add_argument("--tau", type=float)
    lg.add_argument("--learnable-tau", action=B)
    lg.add_argument("--tau-init", type=float)
    lg.add_argument("--lambda-mm", type=float)
    lg.add_argument("--nspt-variant", choices=NSPT_VARIANTS)
    lg.add_argument("--mm-use-cls-only", action=B)
    lg.add_argument("--mm-exclude-rehearsal-anchors", action=B)
    lg.add_argument("--include-self-in-denominator", action=B)
    lg.add_argument("--lambda-kd", type=float)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coconut-cil", description="Class-incremental SLU toy benchmark.")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file with default values for any flag")
        return p

    p = cmd("generate-data", "write a synthetic corpus")
    add_corpus_flags(p)
    p.add_argument("--out", help="output directory")

    p = cmd("train", "run the class-incremental protocol for one strategy")
    add_train_flags(p)

    p = cmd("ablate", "NSPT variant grid and MM flag grid")
    add_train_flags(p, strategy=False)
    p.add_argument("--grid", choices=("nspt", "mm", "tau", "all"))

    p = cmd("sweep-memory", "compare strategies across exemplars-per-class")
    add_train_flags(p, strategy=False)
    p.add_argument("--memory", type=_ints, help="comma-separated exemplars per class")
    p.add_argument("--strategies", type=_strs, help="comma-separated strategies")

    p = cmd("grad-check", "finite-difference check of every objective")
    p.add_argument("--batches", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--fd-step", type=float, help="finite-difference step h")
    p.add_argument("--tol", type=float)
    p.add_argument("--d-shared", type=int)

    p = cmd("report", "aggregate run directories into a comparison table")
    p.add_argument("runs", nargs="*", help="run directories or parent directories")
    p.add_argument("--unweighted", action=B, help="unweighted per-task mean for Avg/Last Acc")
    p.add_argument("--out", help="write comparison files here")
    return ap


DEFAULTS = {
    "generate-data": {"out": "corpus"},
    "train": {"out": "runs/train", "strategy": "coconut", "seeds": [0], "jobs": 1},
    "ablate": {"out": "runs/ablate", "grid": "all", "seeds": [0], "jobs": 1},
    "sweep-memory": {"out": "runs/memory", "memory": [2, 4, 8, 30], "strategies": ["er", "coconut"], "seeds": [0], "jobs": 1},
    "grad-check": {"batches": 20, "seed": 0, "fd_step": 1e-4, "tol": 1e-4, "d_shared": 16},
    "report": {"runs": ["runs"], "unweighted": False, "out": None},
}


class ConfigError(ValueError):
    pass


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Defaults < config file < explicit flags."""
    cmd = args.command
    subs = parser._subparsers._group_actions[0].choices
    known = {a.dest for a in subs[cmd]._actions} - {"help", "config"}
    anywhere = {a.dest for p in subs.values() for a in p._actions}
    merged = dict(DEFAULTS[cmd])
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key not in anywhere:
                raise ConfigError(f"unknown config key {k!r}")
            if key not in known:
                log.warning("config key %r does not apply to %s; ignored", k, cmd)
                continue
            if isinstance(v, str) and key in ("seeds", "memory"):
                v = _ints(v)
            elif isinstance(v, str) and key == "strategies":
                v = _strs(v)
            merged[key] = v
    for k, v in vars(args).items():
        if k not in ("command", "config", "log_level"):
            merged[k] = v
    return merged


def corpus_spec(opts: dict) -> CorpusSpec:
    kw = {k: opts[k] for k in CORPUS_FLAGS if k in opts}
    if "corpus_seed" in opts:
        kw["seed"] = opts["corpus_seed"]
    return CorpusSpec(**kw)


def get_corpus(opts: dict):
    if opts.get("corpus"):
        return load_corpus(opts["corpus"])
    return generate_corpus(corpus_spec(opts))


def strategy_config(opts: dict, corpus, seed: int, **override) -> StrategyConfig:
    kw = {k: opts[k] for k in STRATEGY_FLAGS if k in opts}
    if "buffer_fraction" in kw and "exemplars_per_class" not in kw:
        kw["exemplars_per_class"] = None
    loss = LossConfig(**{k: opts[k] for k in LOSS_FLAGS if k in opts})
    model = ModelConfig(d_in=corpus.spec.d_in, **{k: opts[k] for k in MODEL_FLAGS if k in opts})
    kw.update(override)
    loss = dataclasses.replace(loss, **kw.pop("loss_override", {}))
    cfg = StrategyConfig(**kw, seed=seed, loss=loss, model=model)
    cfg.validate()
    return cfg


def _label(cfg: StrategyConfig) -> str:
    if cfg.strategy in ("er", "skd", "akd", "tkd") and cfg.selection == "random":
        return f"{cfg.strategy}-random"
    return cfg.strategy


def _run_one(job):
    corpus, cfg, run_dir, label = job
    return run_experiment(corpus, cfg, run_dir=run_dir, label=label)


def run_jobs(jobs, n_workers: int):
    if n_workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(n_workers) as ex:
        return list(ex.map(_run_one, jobs))


def _finish(records, out) -> None:
    export_results(records, out)
    print(format_table(aggregate(records)))
    print(f"results written to {out}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(opts):
    spec = corpus_spec(opts)
    corpus = generate_corpus(spec)
    path = save_corpus(corpus, opts["out"])
    print(f"{len(corpus.train)} train / {len(corpus.test)} test examples, vocab {len(corpus.vocab)} -> {path}")
    return 0


def cmd_train(opts):
    corpus = get_corpus(opts)
    out = Path(opts["out"])
    jobs = []
    for s in opts["seeds"]:
        cfg = strategy_config(opts, corpus, s)
        label = _label(cfg)
        jobs.append((corpus, cfg, out / f"{label.replace('+', '_')}_seed{s}", label))
    _finish(run_jobs(jobs, opts["jobs"]), out)
    return 0


ABLATION_GRIDS = {
    "nspt": [(f"coconut[{v}]", {"nspt_variant": v}) for v in NSPT_VARIANTS],
    "mm": [
        (f"coconut[cls={c},excl={e}]", {"mm_use_cls_only": c, "mm_exclude_rehearsal_anchors": e})
        for c in (True, False)
        for e in (True, False)
    ],
    "tau": [("coconut[tau=0.1]", {"learnable_tau": False}), ("coconut[tau=learned]", {"learnable_tau": True})],
}


def cmd_ablate(opts):
    corpus = get_corpus(opts)
    out = Path(opts["out"])
    grids = list(ABLATION_GRIDS) if opts["grid"] == "all" else [opts["grid"]]
    seen, jobs = set(), []
    for g in grids:
        for label, loss_kw in ABLATION_GRIDS[g]:
            if label in seen:
                continue
            seen.add(label)
            for s in opts["seeds"]:
                cfg = strategy_config(opts, corpus, s, strategy="coconut", loss_override=loss_kw)
                safe = label.replace("[", "_").replace("]", "").replace(",", "_").replace("=", "-")
                jobs.append((corpus, cfg, out / f"{safe}_seed{s}", label))
    _finish(run_jobs(jobs, opts["jobs"]), out)
    return 0


def memory_gaps(records, baseline="er", method="coconut") -> dict[int, float]:
    """Seed-averaged Avg Acc of ``method`` minus ``baseline`` per exemplars-per-class."""
    by = {}
    for r in records:
        m = r.config["exemplars_per_class"]
        by.setdefault((r.strategy, m), []).append(r.avg_acc)
    mems = sorted({m for _, m in by})
    mean = lambda v: sum(v) / len(v)
    return {m: mean(by[(method, m)]) - mean(by[(baseline, m)]) for m in mems if (method, m) in by and (baseline, m) in by}


def cmd_sweep_memory(opts):
    corpus = get_corpus(opts)
    out = Path(opts["out"])
    jobs = []
    for m in opts["memory"]:
        for strat in opts["strategies"]:
            for s in opts["seeds"]:
                cfg = strategy_config(opts, corpus, s, strategy=strat, exemplars_per_class=m)
                label = f"{_label(cfg)}@{m}"
                jobs.append((corpus, cfg, out / f"{label.replace('+', '_').replace('@', '_m')}_seed{s}", label))
    records = run_jobs(jobs, opts["jobs"])
    _finish(records, out)
    strategies = opts["strategies"]
    if len(strategies) >= 2:
        gaps = memory_gaps(records, baseline=strategies[0], method=strategies[1])
        (out / "memory_gaps.json").write_text(json.dumps(gaps, indent=1), encoding="utf-8")
        for m, g in gaps.items():
            print(f"{strategies[1]} - {strategies[0]} @ {m}/class: {100 * g:+.2f} Avg Acc points")
    return 0


def cmd_grad_check(opts):
    from .suite import gradient_suite

    results = gradient_suite(opts["batches"], opts["seed"], opts["fd_step"], opts["tol"], opts["d_shared"])
    ok = True
    for r in results:
        extra = f", {r.failures} failing batch(es), error at h/100 = {r.refined_max_rel_error:.2e}" if r.failures else ""
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:8s} {r.batches} batches, max rel. error {r.max_rel_error:.2e}, teacher grads absent: {r.teacher_grad_absent}{extra}")
        ok &= r.passed
    return 0 if ok else 1


def _find_metrics(paths):
    for p in map(Path, paths):
        if p.is_file() and p.suffix == ".json":
            yield p
        elif p.is_dir():
            yield from sorted(p.rglob("metrics.json"))


def cmd_report(opts):
    records = []
    for path in _find_metrics(opts["runs"]):
        r = load_record(path)
        if opts["unweighted"]:
            r.avg_acc, r.last_acc, r.avg_wer = summarize(r.metrics.acc, r.metrics.wer, r.metrics.test_sizes, weighted=False)
        records.append(r)
    if not records:
        print("no metrics.json found", file=sys.stderr)
        return 2
    if opts["out"]:
        export_results(records, opts["out"])
    print(format_table(aggregate(records)))
    return 0


COMMANDS = {
    "generate-data": cmd_generate,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sweep-memory": cmd_sweep_memory,
    "grad-check": cmd_grad_check,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args, parser)
        return COMMANDS[args.command](opts)
    except (InvariantViolation, DivergenceError) as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError, TypeError, json.JSONDecodeError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
