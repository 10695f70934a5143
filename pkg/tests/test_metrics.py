import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coconut_cil.metrics import (
    ResultRecord,
    RunMetrics,
    after_task_accuracy,
    aggregate,
    corpus_wer,
    edit_distance,
    export_results,
    intent_accuracy,
    load_record,
    save_record,
    summarize,
    wer,
)

from oracles import recursive_edit_distance


def test_intent_accuracy_examples():
    assert intent_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert intent_accuracy([None, None], [0, 1]) == 0.0
    assert intent_accuracy([1] * 7 + [0] * 3, [1] * 10) == 0.7
    with pytest.raises(ValueError):
        intent_accuracy([], [])
    with pytest.raises(ValueError):
        intent_accuracy([1], [1, 2])


def test_wer_examples():
    assert wer("abc", "abc") == 0.0
    assert wer("abc", "axc") == pytest.approx(1 / 3)
    assert wer("ab", "abcd") == 1.0
    assert wer([9, 8, 1, 2], [9, 8, 1, 3], skip_prefix=2) == 0.5
    with pytest.raises(ValueError):
        wer([], [1])


def test_wer_matches_recursive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = rng.integers(0, 5, int(rng.integers(1, 9))).tolist()
        b = rng.integers(0, 5, int(rng.integers(0, 9))).tolist()
        assert edit_distance(a, b) == recursive_edit_distance(a, b)
        assert wer(a, b) == recursive_edit_distance(a, b) / len(a)


tokens = st.lists(st.integers(0, 4), max_size=8)


@settings(max_examples=100, deadline=None)
@given(tokens, tokens, tokens)
def test_edit_distance_is_a_metric(a, b, c):
    assert edit_distance(a, a) == 0
    assert edit_distance(a, b) == edit_distance(b, a)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    assert abs(len(a) - len(b)) <= edit_distance(a, b) <= max(len(a), len(b))


def test_corpus_wer_pools_edits():
    assert corpus_wer(["ab", "abcd"], ["ab", "abxx"]) == pytest.approx(2 / 6)


def test_summarize_examples():
    assert summarize([[0.9]], [0.1]) == (0.9, 0.9, 0.1)
    avg, last, w = summarize([[0.8], [0.7, 0.7], [0.6, 0.6, 0.6]], [0.1, 0.2, 0.3])
    assert avg == pytest.approx(0.7, abs=1e-15) and last == pytest.approx(0.6) and w == pytest.approx(0.2)
    assert after_task_accuracy([[1.0], [1.0, 0.5]], [10, 10])[1] == 0.75
    with pytest.raises(ValueError):
        summarize([[1.0], [1.0]], [0.0, 0.0])
    with pytest.raises(ValueError):
        summarize([], [])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_weighted_accuracy_equals_pooled_accuracy(N, seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 30, N)
    R, pooled = [], []
    for i in range(N):
        hits = [rng.integers(0, 2, sizes[j]) for j in range(i + 1)]
        R.append([float(h.mean()) for h in hits])
        pooled.append(float(np.concatenate(hits).mean()))
    np.testing.assert_allclose(after_task_accuracy(R, sizes), pooled, rtol=0, atol=1e-12)


def test_unweighted_option():
    assert after_task_accuracy([[1.0], [1.0, 0.0]], [1, 3], weighted=False)[1] == 0.5
    assert after_task_accuracy([[1.0], [1.0, 0.0]], [1, 3], weighted=True)[1] == 0.25


def _record(strategy, seed, acc):
    m = RunMetrics([[acc], [acc, acc / 2]], [0.1, 0.2], [5, 5])
    return ResultRecord.build(strategy, seed, "h", m, wall_time=1.5)


def test_record_scalars_recomputable():
    r = _record("er", 0, 0.8)
    avg, last, w = summarize(r.metrics.acc, r.metrics.wer, r.metrics.test_sizes)
    assert abs(avg - r.avg_acc) <= 1e-12 and abs(last - r.last_acc) <= 1e-12 and abs(w - r.avg_wer) <= 1e-12


def test_record_round_trip_bit_exact(tmp_path):
    r = _record("coconut", 3, 0.7123456789012345)
    back = load_record(save_record(r, tmp_path / "r.json"))
    assert back == r
    save_record(r, tmp_path / "n.json", include_timing=False)
    assert "wall_time" not in json.loads((tmp_path / "n.json").read_text())


def test_aggregate_mean_std():
    rows = aggregate([_record("er", 0, 0.6), _record("er", 1, 0.8)])
    assert len(rows) == 1
    np.testing.assert_allclose(rows[0]["last_acc"], 0.525, rtol=0, atol=1e-12)
    r0 = aggregate([ResultRecord("x", 0, "h", None, avg_acc=0.6), ResultRecord("x", 1, "h", None, avg_acc=0.8)])[0]
    assert r0["avg_acc"] == pytest.approx(0.7, abs=1e-12) and r0["avg_acc_std"] == pytest.approx(0.1, abs=1e-12)


def test_export_results(tmp_path):
    recs = [_record(s, k, 0.5 + 0.1 * k) for s in ("er", "coconut", "finetune") for k in range(2)]
    export_results(recs, tmp_path)
    assert len(list((tmp_path / "runs").glob("*.json"))) == 6
    rows = json.loads((tmp_path / "comparison.json").read_text())
    assert [r["method"] for r in rows] == ["er", "coconut", "finetune"]
    table = (tmp_path / "comparison.txt").read_text().splitlines()
    assert len(table) == 2 + 3
    for name in ("er_seed0", "coconut_seed1"):
        assert load_record(tmp_path / "runs" / f"{name}.json").avg_acc in {r.avg_acc for r in recs}
