from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coconut_cil.checkpoint import load_checkpoint, params_hash, save_checkpoint
from coconut_cil.config import CorpusSpec, LossConfig, ModelConfig, StrategyConfig
from coconut_cil.data import PairedExample, generate_corpus
from coconut_cil.harness import (
    InvariantViolation,
    RehearsalBuffer,
    exemplars_per_class,
    herding_order,
    loss_terms,
    make_batches,
    new_state,
    run_experiment,
    select_exemplars_herding,
    select_exemplars_random,
    skd_prepare,
    snapshot_teacher,
    split_tasks,
    train_task,
)
from coconut_cil.losses import lambda_nspt

from oracles import exhaustive_herding

SPEC = CorpusSpec(num_intents=4, min_samples=10, max_samples=16, num_words=12, seed=1)
MODEL = ModelConfig(d_audio=8, d_text=8, d_shared=4)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SPEC)


def tiny_cfg(**kw):
    base = dict(num_tasks=2, epochs_first=2, epochs_rest=2, batch_size=8, exemplars_per_class=2, model=MODEL)
    base.update(kw)
    return StrategyConfig(**base)


def fake(ids_by_intent):
    return [
        PairedExample(i, k, (), (k,), np.zeros((1, 2))) for k, ids in ids_by_intent.items() for i in ids
    ]


# ---------------------------------------------------------------------------
# task split
# ---------------------------------------------------------------------------


class _C:
    def __init__(self, train, test=()):
        self.train, self.test = list(train), list(test)


def test_split_orders_by_size():
    c = _C(fake({0: range(10), 1: range(10, 40), 2: range(40, 60)}))
    tasks = split_tasks(c, 3, 1)
    assert tasks.intents == [[1], [2], [0]]


def test_split_ties_by_intent_id_and_offline():
    c = _C(fake({3: range(5), 1: range(5, 10), 2: range(10, 15), 0: range(15, 20)}))
    assert split_tasks(c, 2).intents == [[0, 1], [2, 3]]
    assert split_tasks(c, 1).intents == [[0, 1, 2, 3]]
    with pytest.raises(ValueError):
        split_tasks(c, 3)


def test_default_corpus_six_tasks_of_five():
    tasks = split_tasks(generate_corpus(CorpusSpec()), 6)
    assert [len(t) for t in tasks.intents] == [5] * 6
    flat = [k for t in tasks.intents for k in t]
    assert sorted(flat) == list(range(30))


# ---------------------------------------------------------------------------
# exemplar selection
# ---------------------------------------------------------------------------


def test_random_selection_whole_class_and_determinism():
    exs = fake({0: range(5), 1: range(5, 8)})
    assert sorted(select_exemplars_random(exs, 10, np.random.default_rng(0))[1]) == [5, 6, 7]
    a = select_exemplars_random(exs, 2, np.random.default_rng(7))
    assert a == select_exemplars_random(exs, 2, np.random.default_rng(7))
    with pytest.raises(ValueError):
        select_exemplars_random(exs, 0, np.random.default_rng(0))


def test_random_selection_is_uniform():
    exs = fake({0: range(10)})
    n, m = 10_000, 3
    counts = np.zeros(10)
    for s in range(n):
        for i in select_exemplars_random(exs, m, np.random.default_rng(s))[0]:
            counts[i] += 1
    p = m / 10
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_herding_one_dimensional():
    assert herding_order(np.array([[0.0], [1.0], [2.0]]), [10, 11, 12], 1) == [11]


def test_herding_full_class_returns_all():
    X = np.random.default_rng(0).standard_normal((6, 3))
    assert sorted(herding_order(X, list(range(6)), 6)) == list(range(6))


def test_herding_rounding_ties_go_to_lowest_id():
    # both points are equidistant from their mean; float rounding must not decide
    X = np.array([[0.1, 0.2], [0.3, 0.7]])
    assert herding_order(X, [9, 4], 1) == [4]
    assert herding_order(X[::-1], [4, 9], 1) == [4]


@pytest.mark.parametrize("seed", range(100))
def test_herding_matches_exhaustive_greedy(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    m = int(rng.integers(1, 5))
    X = rng.standard_normal((n, 3))
    assert herding_order(X, list(range(n)), m) == exhaustive_herding(X, m)


def test_herding_uses_example_ids_for_ties():
    X = np.array([[1.0], [1.0], [0.0], [2.0]])
    assert herding_order(X, [7, 3, 9, 1], 1) == [3]


def test_herding_selection_on_model(corpus):
    state = new_state(corpus, tiny_cfg())
    sel = select_exemplars_herding(corpus.train, 3, state.params)
    assert set(sel) == {e.intent_id for e in corpus.train}
    ids = {e.example_id: e.intent_id for e in corpus.train}
    assert all(len(v) == 3 and all(ids[i] == k for i in v) for k, v in sel.items())


def test_buffer_size_rules(corpus):
    assert exemplars_per_class(tiny_cfg(exemplars_per_class=4), corpus) == 4
    cfg = tiny_cfg(exemplars_per_class=None, buffer_fraction=0.1)
    assert exemplars_per_class(cfg, corpus) == max(1, int(0.1 * len(corpus.train) / 4))


def test_buffer_rejects_duplicate_class():
    b = RehearsalBuffer()
    b.add({0: [1, 2]})
    with pytest.raises(ValueError):
        b.add({0: [3]})
    assert b.ids == [1, 2] and len(b) == 2


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def test_batches_mix_24_8():
    rng = np.random.default_rng(0)
    batches = list(make_batches(list(range(96)), [1000, 1001, 1002], 32, 0.25, rng))
    for b in batches:
        assert b.is_rehearsal.sum() == 8 and (~b.is_rehearsal).sum() == 24
        assert set(np.asarray(b.ids)[b.is_rehearsal]) <= {1000, 1001, 1002}
        assert b.index_sets.rehearsal.tolist() == list(range(24, 32))


def test_batches_no_buffer_or_zero_ratio():
    rng = np.random.default_rng(0)
    for buf, ratio in (([], 0.25), ([5, 6], 0.0)):
        for b in make_batches(list(range(20)), buf, 8, ratio, rng):
            assert not b.is_rehearsal.any() and b.index_sets.rehearsal.size == 0
    with pytest.raises(ValueError):
        list(make_batches([1], [2], 8, 1.0, rng))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 70), st.integers(1, 16), st.floats(0, 0.9), st.integers(0, 2**31 - 1))
def test_epoch_covers_task_once(n, bs, ratio, seed):
    ids = list(range(100, 100 + n))
    emitted = []
    for b in make_batches(ids, [1, 2], bs, ratio, np.random.default_rng(seed)):
        emitted += [i for i, r in zip(b.ids, b.is_rehearsal) if not r]
        assert len(b.ids) <= bs
    assert sorted(emitted) == ids


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------


def test_teacher_immutable_under_training(corpus):
    cfg = tiny_cfg(strategy="coconut")
    state = new_state(corpus, cfg)
    teacher = snapshot_teacher(state.params, 0)
    x = corpus.train[0].audio
    from coconut_cil.model import audio_embeddings

    before = audio_embeddings([x], teacher.params)
    tasks = split_tasks(corpus, 2)
    train_task(state, corpus, corpus.by_id(), tasks, 0, replace(cfg, strategy="finetune"))
    assert teacher.current_digest() == teacher.digest
    assert audio_embeddings([x], teacher.params).tobytes() == before.tobytes()
    assert params_hash({k: v.data for k, v in state.params.items()}) != teacher.digest
    with pytest.raises(ValueError):
        teacher.params["dec.wo"].data[...] = 0


def test_snapshot_checkpoint_round_trip(tmp_path, corpus):
    teacher = snapshot_teacher(new_state(corpus, tiny_cfg()).params, 0)
    save_checkpoint(tmp_path / "t", {k: v.data for k, v in teacher.params.items()})
    back, _ = load_checkpoint(tmp_path / "t")
    assert params_hash(back) == teacher.digest


# ---------------------------------------------------------------------------
# loss composition
# ---------------------------------------------------------------------------


def _first_batch(corpus, cfg, buffer_ids=()):
    tasks = split_tasks(corpus, 2)
    rng = np.random.default_rng(0)
    return next(make_batches(tasks.train_ids[0], list(buffer_ids), cfg.batch_size, cfg.mix_ratio, rng)), tasks


def test_finetune_loss_is_asr_only(corpus):
    cfg = tiny_cfg(strategy="finetune")
    state = new_state(corpus, cfg)
    batch, _ = _first_batch(corpus, cfg)
    terms = loss_terms(batch, corpus.by_id(), state, cfg, 0, 0.0, None, corpus.vocab)
    assert set(terms) == {"asr", "total"} and terms["total"].item() == terms["asr"].item()


def test_coconut_first_task_has_no_nspt(corpus):
    cfg = tiny_cfg(strategy="coconut")
    state = new_state(corpus, cfg)
    batch, _ = _first_batch(corpus, cfg)
    terms = loss_terms(batch, corpus.by_id(), state, cfg, 0, 0.0, None, corpus.vocab)
    assert "nspt" not in terms
    assert terms["total"].item() == pytest.approx(terms["asr"].item() + 0.1 * terms["mm"].item(), abs=1e-12)


def test_coconut_later_task_weights(corpus):
    cfg = tiny_cfg(strategy="coconut")
    state = new_state(corpus, cfg)
    state.teacher = snapshot_teacher(state.params, 0)
    tasks = split_tasks(corpus, 2)
    buffer_ids = tasks.train_ids[0][:4]
    batch = next(make_batches(tasks.train_ids[1], buffer_ids, 8, 0.25, np.random.default_rng(0)))
    terms = loss_terms(batch, corpus.by_id(), state, cfg, 1, 2 / 3, None, corpus.vocab)
    expected = terms["asr"].item() + 0.1 * terms["mm"].item() + 2 / 3 * terms["nspt"].item()
    assert terms["total"].item() == pytest.approx(expected, abs=1e-12)
    assert terms["nspt"].item() > 0
    assert lambda_nspt(10, 5) == 2 / 3


def test_skd_targets_isolated_from_gold(corpus):
    cfg = tiny_cfg(strategy="skd")
    state = new_state(corpus, cfg)
    tasks = split_tasks(corpus, 2)
    examples = corpus.by_id()
    buffer_ids = tasks.train_ids[0][:4]
    state.pseudo = {i: examples[i].transcript for i in buffer_ids}
    batch = next(make_batches(tasks.train_ids[1], buffer_ids, 8, 0.25, np.random.default_rng(0)))
    before = loss_terms(batch, examples, state, cfg, 1, 0.0, None, corpus.vocab)["asr"].item()
    tampered = dict(examples)
    for i in buffer_ids:
        e = examples[i]
        tampered[i] = replace(e, transcript=(e.transcript[0], e.transcript[1]) + e.transcript[2:][::-1] + (e.transcript[1],))
    after = loss_terms(batch, tampered, state, cfg, 1, 0.0, None, corpus.vocab)["asr"].item()
    assert after == before
    er = replace(cfg, strategy="er")
    assert loss_terms(batch, tampered, state, er, 1, 0.0, None, corpus.vocab)["asr"].item() != before


def test_skd_prepare_covers_ids(corpus):
    state = new_state(corpus, tiny_cfg())
    ids = [e.example_id for e in corpus.train[:5]]
    table = skd_prepare(state.params, corpus.by_id(), ids, corpus.vocab, 2, corpus.max_transcript_len + 1)
    assert sorted(table) == sorted(ids)


def test_akd_tkd_terms_present(corpus):
    tasks = split_tasks(corpus, 2)
    buffer_ids = tasks.train_ids[0][:4]
    batch = next(make_batches(tasks.train_ids[1], buffer_ids, 8, 0.25, np.random.default_rng(0)))
    for strat in ("akd", "tkd"):
        cfg = tiny_cfg(strategy=strat)
        state = new_state(corpus, cfg)
        state.teacher = snapshot_teacher(state.params, 0)
        terms = loss_terms(batch, corpus.by_id(), state, cfg, 1, 0.5, None, corpus.vocab)
        # teacher equals student, so the distillation term is exactly zero at the snapshot
        assert terms[strat].item() == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# end-to-end protocol
# ---------------------------------------------------------------------------


def test_run_protocol_invariants(tmp_path, corpus):
    import json

    cfg = tiny_cfg(strategy="coconut+skd")
    rec = run_experiment(corpus, cfg, run_dir=tmp_path)
    R = rec.metrics.acc
    assert [len(r) for r in R] == [1, 2] and all(0 <= a <= 1 for r in R for a in r)
    tasks = split_tasks(corpus, 2)
    buf = json.loads((tmp_path / "buffer_task0.json").read_text())
    assert {int(k) for k in buf} == set(tasks.intents[0])
    meta = json.loads((tmp_path / "teachers/teacher_after_task0.json").read_text())
    back, _ = load_checkpoint(tmp_path / "teachers/teacher_after_task0")
    assert params_hash(back) == meta["meta"]["sha256"]
    log = json.loads((tmp_path / "train_log.json").read_text())
    assert "nspt" not in log[0][0] and "nspt" in log[1][0]
    pseudo = (tmp_path / "skd_pseudo.tsv").read_text().splitlines()[1:]
    assert sorted(int(l.split("\t")[0]) for l in pseudo) == sorted(i for v in buf.values() for i in v)


def test_runs_are_bit_reproducible(tmp_path, corpus):
    cfg = tiny_cfg(strategy="coconut")
    run_experiment(corpus, cfg, run_dir=tmp_path / "a")
    run_experiment(corpus, cfg, run_dir=tmp_path / "b")
    assert (tmp_path / "a/metrics.json").read_bytes() == (tmp_path / "b/metrics.json").read_bytes()


def test_finetune_has_empty_buffer(tmp_path, corpus):
    run_experiment(corpus, tiny_cfg(strategy="finetune"), run_dir=tmp_path)
    assert (tmp_path / "buffer_task0.json").read_text() == "{}"


def test_teacher_requirement_enforced(corpus):
    cfg = tiny_cfg(strategy="coconut")
    state = new_state(corpus, cfg)
    with pytest.raises(InvariantViolation):
        train_task(state, corpus, corpus.by_id(), split_tasks(corpus, 2), 1, cfg)


def test_learnable_tau_is_trained(corpus):
    cfg = tiny_cfg(strategy="coconut", loss=LossConfig(learnable_tau=True))
    state = new_state(corpus, cfg)
    start = float(state.params["loss.log_tau"].data)
    assert start == pytest.approx(np.log(0.07))
    train_task(state, corpus, corpus.by_id(), split_tasks(corpus, 2), 0, cfg)
    assert float(state.params["loss.log_tau"].data) != start
