"""Finite-difference gradient suite over every training objective.

Each objective is checked on ``num_batches`` random batches (sizes 2-12,
unit-norm embeddings in the shared space, tau = 0.1). Teacher inputs are passed
as gradient-requiring tensors so that any leak of gradient into them is caught.
Batch ``b`` of every objective uses ``default_rng([seed, b])``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import NSPT_VARIANTS, LossConfig, ModelConfig
from .gradcheck import grad_check
from .losses import BatchIndexSets, cosine_kd_loss, mm_loss, nspt_loss, scl_loss
from .model import asr_cross_entropy, collate, init_params
from .vocab import Vocabulary, tokenize


@dataclass
class CheckResult:
    name: str
    batches: int
    max_rel_error: float
    teacher_grad_absent: bool
    tol: float
    failures: int = 0
    # worst error at h/100 over the failing batches; shows whether a miss is truncation
    refined_max_rel_error: float | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol and self.teacher_grad_absent


def _unit(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _batch(rng, d):
    n = int(rng.integers(2, 13))
    labels = rng.integers(0, 3, n)
    flags = rng.random(n) < 0.4
    flags[rng.integers(n)] = True  # at least one rehearsal anchor
    return n, labels, BatchIndexSets.from_flags(flags)


def _contrastive_case(name, rng, d, cfg):
    n, labels, idx = _batch(rng, d)
    s_a, s_t = (Tensor(_unit(rng, n, d), requires_grad=True) for _ in range(2))
    t_a, t_t = (Tensor(_unit(rng, n, d), requires_grad=True) for _ in range(2))
    if name == "scl":
        return (lambda: scl_loss(s_a, labels, cfg)), [s_a], []
    if name == "mm":
        return (lambda: mm_loss(s_a, s_t, labels, idx, cfg)), [s_a, s_t], []
    if name in ("akd", "tkd"):
        s = Tensor(rng.standard_normal((n, d)), requires_grad=True)
        t = Tensor(rng.standard_normal((n, d)), requires_grad=True)
        return (lambda: cosine_kd_loss(s, t, idx.rehearsal)), [s], [t]
    vcfg = replace(cfg, nspt_variant=name)
    return (lambda: nspt_loss(s_a, t_a, s_t, t_t, labels, idx, vcfg)), [s_a, s_t], [t_a, t_t]


_ASR_VOCAB = Vocabulary.build(2, ["a", "b", "c"])
_ASR_MODEL = ModelConfig(d_in=3, d_audio=3, d_text=3, d_shared=2, max_frames=8, max_steps=8)


def _asr_case(rng):
    params = init_params(_ASR_MODEL, len(_ASR_VOCAB), int(rng.integers(2**31)))
    B = int(rng.integers(2, 4))
    audios = [rng.standard_normal((int(rng.integers(1, 5)), 3)) for _ in range(B)]
    trs = [tokenize(int(rng.integers(2)), list(rng.choice(["a", "b", "c"], int(rng.integers(0, 3)))), _ASR_VOCAB) for _ in range(B)]
    batch = collate(audios, trs, _ASR_VOCAB)
    return (lambda: asr_cross_entropy(batch, params)), [p for k, p in params.items() if not k.startswith("proj_")], []


OBJECTIVES = ("asr", "scl", *NSPT_VARIANTS, "mm", "akd", "tkd")


def gradient_suite(
    num_batches: int = 20,
    seed: int = 0,
    h: float = 1e-4,
    tol: float = 1e-4,
    d_shared: int = 16,
    objectives=OBJECTIVES,
) -> list[CheckResult]:
    cfg = LossConfig()
    results = []
    for name in objectives:
        worst, clean, fails, refined = 0.0, True, 0, None
        for b in range(num_batches):
            rng = np.random.default_rng([seed, b])
            fn, student, teacher = _asr_case(rng) if name == "asr" else _contrastive_case(name, rng, d_shared, cfg)
            err = max(grad_check(fn, student, h=h))
            worst = max(worst, err)
            if err >= tol:
                fails += 1
                refined = max(refined or 0.0, *grad_check(fn, student, h=h / 100))
            for t in teacher:
                t.zero_grad()
            ad.backward(fn())
            clean &= all(t.grad is None for t in teacher)
        results.append(CheckResult(name, num_batches, worst, clean, tol, fails, refined))
    return results
