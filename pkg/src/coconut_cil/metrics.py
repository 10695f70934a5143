"""Intent accuracy, WER and the continual-learning summary scalars."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


def intent_accuracy(predictions: Sequence[int | None], golds: Sequence[int]) -> float:
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds differ in length")
    if not golds:
        raise ValueError("empty evaluation set")
    return sum(p is not None and p == g for p, g in zip(predictions, golds)) / len(golds)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Unit-cost Levenshtein distance, two-row DP."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: Sequence, hypothesis: Sequence, skip_prefix: int = 0) -> float:
    """Edit distance over reference length.

    ``skip_prefix=2`` drops the intent and separator tokens from both sides.
    """
    ref, hyp = list(reference)[skip_prefix:], list(hypothesis)[skip_prefix:]
    if not ref:
        raise ValueError("empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(refs: Sequence[Sequence], hyps: Sequence[Sequence], skip_prefix: int = 0) -> float:
    """Total edits over total reference tokens."""
    errs = sum(edit_distance(list(r)[skip_prefix:], list(h)[skip_prefix:]) for r, h in zip(refs, hyps))
    n = sum(len(r) - skip_prefix for r in refs)
    if n <= 0:
        raise ValueError("empty reference")
    return errs / n


@dataclass
class RunMetrics:
    acc: list[list[float]]  # acc[i][j], j <= i
    wer: list[float]
    test_sizes: list[int]

    @property
    def num_tasks(self) -> int:
        return len(self.acc)


def after_task_accuracy(R, sizes, weighted: bool = True) -> list[float]:
    out = []
    for i, row in enumerate(R):
        if len(row) != i + 1:
            raise ValueError(f"accuracy row {i} has {len(row)} entries, expected {i + 1}")
        w = np.asarray(sizes[: i + 1], dtype=np.float64) if weighted else np.ones(i + 1)
        out.append(float(np.dot(w, row) / w.sum()))
    return out


def summarize(R, W, sizes=None, weighted: bool = True) -> tuple[float, float, float]:
    """``(avg_acc, last_acc, avg_wer)`` from a lower-triangular accuracy matrix."""
    N = len(R)
    if N == 0 or len(W) != N:
        raise ValueError("incomplete metrics")
    sizes = [1] * N if sizes is None else sizes
    A = after_task_accuracy(R, sizes, weighted)
    return float(np.mean(A)), A[-1], float(np.mean(W))


@dataclass
class ResultRecord:
    strategy: str
    seed: int
    config_hash: str
    metrics: RunMetrics
    avg_acc: float = 0.0
    last_acc: float = 0.0
    avg_wer: float = 0.0
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)
    label: str = ""

    @classmethod
    def build(cls, strategy, seed, config_hash, metrics: RunMetrics, **kw) -> "ResultRecord":
        avg, last, w = summarize(metrics.acc, metrics.wer, metrics.test_sizes)
        return cls(strategy, seed, config_hash, metrics, avg, last, w, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        d = dict(d)
        d["metrics"] = RunMetrics(**d["metrics"])
        return cls(**d)


def save_record(record: ResultRecord, path, include_timing: bool = True) -> Path:
    """JSON dump; float repr round-trips exactly. Without timing the file is reproducible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = record.to_dict()
    if not include_timing:
        d.pop("wall_time")
    path.write_text(json.dumps(d, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_record(path) -> ResultRecord:
    return ResultRecord.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def aggregate(records: Sequence[ResultRecord]) -> list[dict]:
    """Mean and population std per (label or strategy)."""
    groups: dict[str, list[ResultRecord]] = {}
    for r in records:
        groups.setdefault(r.label or r.strategy, []).append(r)
    rows = []
    for key, rs in groups.items():
        row = {"method": key, "n": len(rs)}
        for m in ("avg_acc", "last_acc", "avg_wer"):
            v = np.array([getattr(r, m) for r in rs])
            row[m] = float(v.mean())
            row[m + "_std"] = float(v.std())
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    w = max([24] + [len(r["method"]) for r in rows])
    head = f"{'Method':<{w}} {'Avg Acc':>15} {'Last Acc':>15} {'Avg WER':>15}  n"
    lines = [head, "-" * len(head)]
    for r in rows:
        cells = [f"{100 * r[m]:6.2f} ± {100 * r[m + '_std']:5.2f}" for m in ("avg_acc", "last_acc", "avg_wer")]
        lines.append(f"{r['method']:<{w}} {cells[0]:>15} {cells[1]:>15} {cells[2]:>15}  {r['n']}")
    return "\n".join(lines)


def export_results(records: Sequence[ResultRecord], out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for r in records:
        name = f"{(r.label or r.strategy).replace('+', '_')}_seed{r.seed}.json"
        paths[name] = save_record(r, out / "runs" / name)
    rows = aggregate(records)
    (out / "comparison.json").write_text(json.dumps(rows, indent=1), encoding="utf-8")
    (out / "comparison.txt").write_text(format_table(rows) + "\n", encoding="utf-8")
    paths["comparison"] = out / "comparison.txt"
    return paths
