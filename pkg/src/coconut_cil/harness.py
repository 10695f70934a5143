"""Class-incremental training protocol, rehearsal buffer and baselines."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor, no_grad
from .checkpoint import params_hash, save_checkpoint
from .config import StrategyConfig, config_hash, to_dict
from .data import Corpus, PairedExample, spec_aug
from .decoding import decode
from .metrics import ResultRecord, RunMetrics, corpus_wer, intent_accuracy
from .model import (
    audio_embeddings,
    asr_cross_entropy,
    collate,
    embed_batch,
    encode_text,
    frozen_copy,
    init_params,
    project_text,
)
from .vocab import extract_intent

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class InvariantViolation(RuntimeError):
    """A protocol invariant (buffer provenance, teacher immutability, ...) failed."""


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


@dataclass
class TaskSpec:
    intents: list[list[int]]
    train_ids: list[list[int]]
    test_ids: list[list[int]]

    @property
    def num_tasks(self) -> int:
        return len(self.intents)


def order_intents(counts: dict[int, int]) -> list[int]:
    """Descending sample count, ties by lower intent id."""
    return sorted(counts, key=lambda k: (-counts[k], k))


def split_tasks(corpus: Corpus, num_tasks: int, intents_per_task: int | None = None) -> TaskSpec:
    counts: dict[int, int] = {}
    for e in corpus.train:
        counts[e.intent_id] = counts.get(e.intent_id, 0) + 1
    K = len(counts)
    if intents_per_task is None:
        if K % num_tasks:
            raise ValueError(f"{K} intents do not split into {num_tasks} equal tasks")
        intents_per_task = K // num_tasks
    if num_tasks * intents_per_task != K:
        raise ValueError(f"{num_tasks} x {intents_per_task} != {K} intents")
    order = order_intents(counts)
    intents = [order[i * intents_per_task : (i + 1) * intents_per_task] for i in range(num_tasks)]
    task_of = {k: t for t, ks in enumerate(intents) for k in ks}
    train = [[] for _ in range(num_tasks)]
    test = [[] for _ in range(num_tasks)]
    for e in corpus.train:
        train[task_of[e.intent_id]].append(e.example_id)
    for e in corpus.test:
        test[task_of[e.intent_id]].append(e.example_id)
    return TaskSpec(intents, train, test)


# ---------------------------------------------------------------------------
# rehearsal buffer
# ---------------------------------------------------------------------------


@dataclass
class RehearsalBuffer:
    per_class: dict[int, list[int]] = field(default_factory=dict)

    def add(self, selection: dict[int, list[int]]) -> None:
        for k, ids in selection.items():
            if k in self.per_class:
                raise ValueError(f"class {k} already stored")
            self.per_class[k] = list(ids)

    @property
    def ids(self) -> list[int]:
        return [i for k in sorted(self.per_class) for i in self.per_class[k]]

    @property
    def classes(self) -> set[int]:
        return set(self.per_class)

    def __len__(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def manifest(self) -> dict:
        return {str(k): v for k, v in sorted(self.per_class.items())}


def exemplars_per_class(cfg: StrategyConfig, corpus: Corpus) -> int:
    if cfg.exemplars_per_class is not None:
        return cfg.exemplars_per_class
    if cfg.buffer_fraction is None:
        raise ValueError("need exemplars_per_class or buffer_fraction")
    return max(1, math.floor(cfg.buffer_fraction * len(corpus.train) / corpus.vocab.num_intents))


def _group(examples: Sequence[PairedExample]) -> dict[int, list[PairedExample]]:
    out: dict[int, list[PairedExample]] = {}
    for e in sorted(examples, key=lambda e: e.example_id):
        out.setdefault(e.intent_id, []).append(e)
    return out


def select_exemplars_random(examples: Sequence[PairedExample], m: int, rng: np.random.Generator) -> dict[int, list[int]]:
    if m < 1:
        raise ValueError("m must be >= 1")
    out = {}
    for k, exs in sorted(_group(examples).items()):
        ids = [e.example_id for e in exs]
        pick = rng.choice(len(ids), size=min(m, len(ids)), replace=False)
        out[k] = [ids[i] for i in pick]
    return out


HERDING_TIE_RTOL = 1e-9


def herding_order(features: np.ndarray, ids: Sequence[int], m: int) -> list[int]:
    """iCaRL herding: greedily keep the running exemplar mean closest to the class mean."""
    order = np.argsort(ids, kind="stable")
    X = np.asarray(features, dtype=np.float64)[order]
    sorted_ids = [ids[i] for i in order]
    mu = X.mean(axis=0)
    running = np.zeros_like(mu)
    free = np.ones(len(X), dtype=bool)
    chosen = []
    for j in range(1, min(m, len(X)) + 1):
        dist = np.linalg.norm(mu - (running + X) / j, axis=1)
        dist[~free] = np.inf
        # distances equal up to rounding count as ties and go to the lowest id
        best = int(np.flatnonzero(dist <= dist.min() * (1 + HERDING_TIE_RTOL))[0])
        chosen.append(sorted_ids[best])
        running += X[best]
        free[best] = False
    return chosen


def select_exemplars_herding(examples: Sequence[PairedExample], m: int, params) -> dict[int, list[int]]:
    out = {}
    for k, exs in sorted(_group(examples).items()):
        if not exs:
            continue
        feats = audio_embeddings([e.audio for e in exs], params, projected=True)
        out[k] = herding_order(feats, [e.example_id for e in exs], m)
    return out


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSnapshot:
    params: dict
    task: int
    digest: str

    def current_digest(self) -> str:
        return params_hash({k: v.data for k, v in self.params.items()})


def snapshot_teacher(params: dict[str, Tensor], task: int) -> ModelSnapshot:
    frozen = frozen_copy(params)
    return ModelSnapshot(frozen, task, params_hash({k: v.data for k, v in frozen.items()}))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class MiniBatch:
    ids: list[int]
    is_rehearsal: np.ndarray

    @property
    def index_sets(self) -> L.BatchIndexSets:
        return L.BatchIndexSets.from_flags(self.is_rehearsal)


def make_batches(
    task_ids: Sequence[int], buffer_ids: Sequence[int], batch_size: int, mix_ratio: float, rng: np.random.Generator
) -> Iterator[MiniBatch]:
    """One epoch: every task id once (shuffled), plus rehearsal ids drawn with replacement."""
    if not 0 <= mix_ratio < 1:
        raise ValueError("mix_ratio must be in [0, 1)")
    n_r = math.floor(mix_ratio * batch_size) if len(buffer_ids) else 0
    n_c = batch_size - n_r
    perm = rng.permutation(len(task_ids))
    buf = np.asarray(buffer_ids)
    for s in range(0, len(perm), n_c):
        cur = [task_ids[i] for i in perm[s : s + n_c]]
        reh = [int(x) for x in buf[rng.integers(0, len(buf), size=n_r)]] if n_r else []
        yield MiniBatch(cur + reh, np.array([False] * len(cur) + [True] * len(reh)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: dict[str, Tensor]
    optimizer: object
    buffer: RehearsalBuffer = field(default_factory=RehearsalBuffer)
    teacher: ModelSnapshot | None = None
    pseudo: dict[int, tuple[int, ...]] = field(default_factory=dict)
    seen_classes: set[int] = field(default_factory=set)


def text_embedding_rows(batch_transcripts, params, use_cls: bool) -> Tensor:
    """Pre-projection text feature: the intent-token row, or the mean over tokens."""
    if use_cls:
        return encode_text(np.array([t[0] for t in batch_transcripts]), params)
    J = max(len(t) for t in batch_transcripts)
    ids = np.zeros((len(batch_transcripts), J), dtype=np.int64)
    m = np.zeros((len(batch_transcripts), J))
    for i, t in enumerate(batch_transcripts):
        ids[i, : len(t)] = t
        m[i, : len(t)] = 1.0
    h = encode_text(ids, params)
    return ad.multiply(ad.sum(ad.multiply(h, m[..., None]), axis=1), 1.0 / m.sum(axis=1, keepdims=True))


def loss_terms(
    batch: MiniBatch,
    examples: dict[int, PairedExample],
    state: TrainState,
    cfg: StrategyConfig,
    task: int,
    lam_nspt: float,
    rng: np.random.Generator | None,
    vocab,
) -> dict[str, Tensor]:
    """Every loss term for one step; ``total`` is what gets differentiated."""
    exs = [examples[i] for i in batch.ids]
    audios = [spec_aug(e.audio, rng) if rng is not None else e.audio for e in exs]
    targets = [
        state.pseudo.get(e.example_id, e.transcript) if (reh and cfg.uses_skd) else e.transcript
        for e, reh in zip(exs, batch.is_rehearsal)
    ]
    col = collate(audios, targets, vocab)
    col.cls_ids = np.array([e.transcript[0] for e in exs])
    labels = np.array([e.intent_id for e in exs])
    idx = batch.index_sets
    params = state.params
    lc = cfg.loss

    fwd = embed_batch(col, params, project=cfg.uses_coconut)
    terms = {"asr": asr_cross_entropy(col, params, h_a=fwd.h_a)}
    total = terms["asr"]
    gold = [e.transcript for e in exs]

    need_teacher = state.teacher is not None and idx.rehearsal.size and cfg.strategy in ("akd", "tkd", "coconut", "coconut+skd")
    if need_teacher:
        with no_grad():
            t_fwd = embed_batch(col, state.teacher.params, project=cfg.uses_coconut)

    if cfg.uses_coconut:
        t_rows = text_embedding_rows(gold, params, lc.mm_use_cls_only)
        t_emb = project_text(t_rows, params)
        tau_mm = params["loss.log_tau"] if lc.learnable_tau else lc.tau
        terms["mm"] = L.mm_loss(fwd.a, t_emb, labels, idx, lc, tau=tau_mm)
        total = ad.add(total, ad.scale(terms["mm"], lc.lambda_mm))
        if state.teacher is not None:
            if need_teacher:
                with no_grad():
                    tt = project_text(text_embedding_rows(gold, state.teacher.params, lc.mm_use_cls_only), state.teacher.params)
                terms["nspt"] = L.nspt_loss(fwd.a, t_fwd.a, t_emb, tt, labels, idx, lc)
            else:
                terms["nspt"] = Tensor(0.0)
            total = ad.add(total, ad.scale(terms["nspt"], lam_nspt))
    if cfg.strategy == "akd" and need_teacher:
        terms["akd"] = L.cosine_kd_loss(fwd.pooled_a, t_fwd.pooled_a, idx.rehearsal)
        total = ad.add(total, ad.scale(terms["akd"], lc.lambda_kd))
    if cfg.strategy == "tkd" and need_teacher:
        terms["tkd"] = L.cosine_kd_loss(fwd.cls_t, t_fwd.cls_t, idx.rehearsal)
        total = ad.add(total, ad.scale(terms["tkd"], lc.lambda_kd))
    terms["total"] = total
    return terms


def train_task(
    state: TrainState,
    corpus: Corpus,
    examples: dict[int, PairedExample],
    tasks: TaskSpec,
    task: int,
    cfg: StrategyConfig,
) -> list[dict[str, float]]:
    if (state.teacher is None) != (task == 0) and cfg.uses_coconut:
        raise InvariantViolation("teacher must exist exactly from the second task on")
    new = set(tasks.intents[task])
    lam = L.lambda_nspt(len(state.seen_classes), len(new))
    rng = np.random.default_rng([cfg.seed, 101, task])
    aug_rng = np.random.default_rng([cfg.seed, 202, task]) if cfg.spec_aug else None
    buffer_ids = state.buffer.ids if cfg.uses_buffer else []
    epochs = cfg.epochs_first if task == 0 else cfg.epochs_rest
    history = []
    for epoch in range(epochs):
        sums: dict[str, float] = {}
        n = 0
        for batch in make_batches(tasks.train_ids[task], buffer_ids, cfg.batch_size, cfg.mix_ratio, rng):
            terms = loss_terms(batch, examples, state, cfg, task, lam, aug_rng, corpus.vocab)
            total = terms["total"]
            if not np.isfinite(total.data):
                raise DivergenceError(f"non-finite loss at task {task}, epoch {epoch}: {({k: float(v.data) for k, v in terms.items()})}")
            state.optimizer.zero_grad()
            ad.backward(total)
            state.optimizer.step()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.data)
            n += 1
        history.append({k: v / n for k, v in sums.items()})
    state.seen_classes |= new
    return history


def skd_prepare(params, examples: dict[int, PairedExample], ids: Sequence[int], vocab, beam_width: int, max_len: int) -> dict[int, tuple[int, ...]]:
    """Beam-search pseudo-transcripts for ``ids``; gold is kept when decoding fails."""
    table = {}
    for i in ids:
        hyp = decode(examples[i].audio, params, vocab, beam_width, max_len)
        if hyp.truncated or len(hyp.tokens) == 0:
            log.warning("S-KD decode failed for example %d, keeping gold transcript", i)
            table[i] = examples[i].transcript
        else:
            table[i] = hyp.tokens
    return table


# ---------------------------------------------------------------------------
# evaluation and full runs
# ---------------------------------------------------------------------------


def evaluate(params, examples: Sequence[PairedExample], vocab, beam_width: int, max_len: int):
    """Intent accuracy, WER pieces and predictions for a list of examples."""
    hyps = [decode(e.audio, params, vocab, beam_width, max_len).tokens for e in examples]
    preds = [extract_intent(h, vocab) for h in hyps]
    golds = [e.intent_id for e in examples]
    return intent_accuracy(preds, golds), [e.transcript for e in examples], hyps


def decode_max_len(corpus: Corpus) -> int:
    return corpus.max_transcript_len + 1


def new_state(corpus: Corpus, cfg: StrategyConfig):
    from .optim import AdamW

    params = init_params(cfg.model, len(corpus.vocab), seed=cfg.seed)
    if cfg.loss.learnable_tau:
        params["loss.log_tau"] = Tensor(np.log(cfg.loss.tau_init), requires_grad=True, name="loss.log_tau")
    opt = AdamW(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
    return TrainState(params, opt)


def run_experiment(corpus: Corpus, cfg: StrategyConfig, run_dir=None, label: str = "") -> ResultRecord:
    """Train over all tasks, evaluating on the cumulative test set after each."""
    cfg.validate()
    t0 = time.time()
    tasks = split_tasks(corpus, cfg.num_tasks)
    examples = corpus.by_id()
    state = new_state(corpus, cfg)
    m = exemplars_per_class(cfg, corpus) if cfg.uses_buffer else 0
    max_len = decode_max_len(corpus)
    out = Path(run_dir) if run_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(to_dict(cfg), indent=1), encoding="utf-8")
        corpus.vocab.save(out / "vocab.tsv")

    R, W, sizes, logs = [], [], [len(t) for t in tasks.test_ids], []
    for n in range(tasks.num_tasks):
        if state.teacher is not None:
            digest = state.teacher.digest
        logs.append(train_task(state, corpus, examples, tasks, n, cfg))
        if state.teacher is not None and state.teacher.current_digest() != digest:
            raise InvariantViolation(f"teacher parameters changed during task {n}")

        row, refs, hyps = [], [], []
        for j in range(n + 1):
            acc, r, h = evaluate(state.params, [examples[i] for i in tasks.test_ids[j]], corpus.vocab, cfg.beam_width, max_len)
            row.append(acc)
            refs += r
            hyps += h
        R.append(row)
        W.append(corpus_wer(refs, hyps))
        log.info("%s task %d: acc %s wer %.4f", cfg.strategy, n, np.round(row, 3).tolist(), W[-1])

        if cfg.uses_buffer and n < tasks.num_tasks - 1:
            task_exs = [examples[i] for i in tasks.train_ids[n]]
            if cfg.selection == "herding":
                sel = select_exemplars_herding(task_exs, m, state.params)
            else:
                sel = select_exemplars_random(task_exs, m, np.random.default_rng([cfg.seed, 303, n]))
            state.buffer.add(sel)
            if not state.buffer.classes <= state.seen_classes:
                raise InvariantViolation(f"buffer holds unseen classes {sorted(state.buffer.classes - state.seen_classes)}")
            if cfg.uses_skd:
                new_ids = [i for ids in sel.values() for i in ids]
                state.pseudo.update(skd_prepare(state.params, examples, new_ids, corpus.vocab, cfg.beam_width, max_len))
        if n < tasks.num_tasks - 1:
            state.teacher = snapshot_teacher(state.params, n)
        if out:
            save_checkpoint(out / f"checkpoints/task{n}", {k: v.data for k, v in state.params.items()}, {"task": n})
            if state.teacher is not None:
                save_checkpoint(out / f"teachers/teacher_after_task{n}", {k: v.data for k, v in state.teacher.params.items()}, {"task": n, "sha256": state.teacher.digest})
            (out / f"buffer_task{n}.json").write_text(json.dumps(state.buffer.manifest()), encoding="utf-8")
            if cfg.uses_skd:
                with open(out / "skd_pseudo.tsv", "w", encoding="utf-8") as fh:
                    fh.write("example_id\ttokens\n")
                    for i, toks in sorted(state.pseudo.items()):
                        fh.write(f"{i}\t{' '.join(map(str, toks))}\n")

    record = ResultRecord.build(
        cfg.strategy,
        cfg.seed,
        config_hash(cfg),
        RunMetrics(R, W, sizes),
        wall_time=time.time() - t0,
        config=to_dict(cfg),
        label=label,
    )
    if out:
        from .metrics import save_record

        save_record(record, out / "metrics.json", include_timing=False)
        (out / "timing.json").write_text(json.dumps({"wall_time": record.wall_time}), encoding="utf-8")
        (out / "train_log.json").write_text(json.dumps(logs), encoding="utf-8")
    return record
