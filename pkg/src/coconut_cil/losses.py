"""Supervised contrastive objectives over shared-space embeddings.

All losses are sums over anchors of ``-1/|P(k)| * sum_p log(num / den)``,
computed as ``num - logsumexp(den)`` on a masked similarity matrix. Anchors
with no positives contribute nothing. Teacher embeddings may be passed as
plain arrays or gradient-free tensors; they never receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import LossConfig


@dataclass
class BatchIndexSets:
    current: np.ndarray  # I_c
    rehearsal: np.ndarray  # I_r

    def __post_init__(self):
        self.current = np.asarray(self.current, dtype=np.int64)
        self.rehearsal = np.asarray(self.rehearsal, dtype=np.int64)
        if np.intersect1d(self.current, self.rehearsal).size:
            raise ValueError("current and rehearsal index sets overlap")

    @property
    def all(self) -> np.ndarray:
        return np.sort(np.concatenate([self.current, self.rehearsal]))

    @classmethod
    def from_flags(cls, is_rehearsal) -> "BatchIndexSets":
        r = np.asarray(is_rehearsal, dtype=bool)
        return cls(np.flatnonzero(~r), np.flatnonzero(r))


def positive_mask(labels, anchors, include_self: bool = True) -> np.ndarray:
    """``mask[r, i]`` is true when batch item ``i`` shares the label of anchor ``anchors[r]``."""
    labels = np.asarray(labels)
    anchors = np.asarray(anchors, dtype=np.int64)
    mask = labels[anchors][:, None] == labels[None, :]
    if not include_self:
        mask[np.arange(len(anchors)), anchors] = False
    return mask


def _check_tau(tau) -> None:
    if not isinstance(tau, Tensor) and not tau > 0:
        raise ValueError("temperature must be positive")


def _over_tau(x: Tensor, tau) -> Tensor:
    if isinstance(tau, Tensor):
        # tau given as a log-temperature parameter
        return ad.multiply(x, ad.exp(ad.scale(tau, -1.0)))
    return ad.scale(x, 1.0 / tau)


def _check_finite(*zs) -> None:
    for z in zs:
        data = z.data if isinstance(z, Tensor) else np.asarray(z)
        if not np.all(np.isfinite(data)):
            raise ValueError("non-finite embedding")


def _contrast(anchor: Tensor, pos_keys, den_keys, pos: np.ndarray, den_keep: np.ndarray, tau) -> Tensor:
    num = _over_tau(ad.matmul(anchor, ad.transpose(pos_keys)), tau)
    den = _over_tau(ad.matmul(anchor, ad.transpose(den_keys)), tau)
    den = ad.masked_fill(den, ~den_keep, -np.inf)
    lse = ad.logsumexp(den)
    counts = pos.sum(axis=1)
    w = np.where(counts[:, None] > 0, pos / np.maximum(counts, 1)[:, None], 0.0)
    pos_term = ad.sum(ad.multiply(num, w))
    den_term = ad.sum(ad.multiply(lse, (counts > 0).astype(np.float64)))
    return ad.subtract(den_term, pos_term)


def _zero() -> Tensor:
    return Tensor(0.0)


def scl_loss(Z, labels, cfg: LossConfig, anchors=None, tau=None) -> Tensor:
    """Generic supervised contrastive loss; all of Z plays anchor, positive and negative."""
    tau = cfg.tau if tau is None else tau
    _check_tau(tau)
    Z = ad.as_tensor(Z)
    _check_finite(Z)
    n = Z.shape[0]
    anchors = np.arange(n) if anchors is None else np.asarray(anchors, dtype=np.int64)
    if anchors.size == 0:
        return _zero()
    pos = positive_mask(labels, anchors, cfg.include_self_in_denominator)
    keep = np.ones((len(anchors), n), dtype=bool)
    if not cfg.include_self_in_denominator:
        keep[np.arange(len(anchors)), anchors] = False
    return _contrast(ad.gather_rows(Z, anchors), Z, Z, pos, keep, tau)


def _nspt_single(zs: Tensor, zt: Tensor, labels, idx: BatchIndexSets, cfg: LossConfig, tau) -> Tensor:
    variant = cfg.nspt_variant
    anchors = idx.all if variant == "NSPT-AA" else idx.rehearsal
    n = zs.shape[0]
    A = len(anchors)
    rows = np.arange(A)
    pos = positive_mask(labels, anchors, include_self=True)
    anchor = ad.gather_rows(zs, anchors)
    keep = np.ones((A, n), dtype=bool)
    if variant in ("NSPT", "NSPT-AA"):
        if not cfg.include_self_in_denominator:
            keep[rows, anchors] = False
        return _contrast(anchor, zt, zs, pos, keep, tau)
    if variant == "NTPT":
        return _contrast(anchor, zt, zt, pos, keep, tau)
    if variant == "NSPT-AN":
        # current-task negatives from the student, rehearsal negatives from the teacher
        is_r = np.zeros(n, dtype=bool)
        is_r[idx.rehearsal] = True
        keys = ad.concatenate(
            [ad.gather_rows(zs, np.flatnonzero(~is_r)), ad.gather_rows(zt, np.flatnonzero(is_r))], axis=0
        )
        order = np.concatenate([np.flatnonzero(~is_r), np.flatnonzero(is_r)])
        return _contrast(anchor, zt, keys, pos, keep[:, order], tau)
    raise ValueError(f"unknown NSPT variant {variant!r}")


def nspt_loss(student_a, teacher_a, student_t, teacher_t, labels, idx: BatchIndexSets, cfg: LossConfig, tau=None) -> Tensor:
    """Contrastive distillation: student anchors/negatives, teacher positives.

    Returns audio term + text term. Zero when the batch has no rehearsal items.
    """
    tau = cfg.tau if tau is None else tau
    _check_tau(tau)
    if idx.rehearsal.size == 0:
        return _zero()
    sa, sta = ad.as_tensor(student_a), Tensor(ad.as_tensor(teacher_a).data)
    st, stt = ad.as_tensor(student_t), Tensor(ad.as_tensor(teacher_t).data)
    _check_finite(sa, sta, st, stt)
    return ad.add(_nspt_single(sa, sta, labels, idx, cfg, tau), _nspt_single(st, stt, labels, idx, cfg, tau))


def mm_loss(a, t, labels, idx: BatchIndexSets, cfg: LossConfig, tau=None) -> Tensor:
    """Symmetric audio-to-text plus text-to-audio supervised contrastive loss."""
    tau = cfg.tau if tau is None else tau
    _check_tau(tau)
    a, t = ad.as_tensor(a), ad.as_tensor(t)
    _check_finite(a, t)
    anchors = idx.current if cfg.mm_exclude_rehearsal_anchors else idx.all
    if anchors.size == 0:
        return _zero()
    n = a.shape[0]
    pos = positive_mask(labels, anchors, include_self=True)
    keep = np.ones((len(anchors), n), dtype=bool)
    a2t = _contrast(ad.gather_rows(a, anchors), t, t, pos, keep, tau)
    t2a = _contrast(ad.gather_rows(t, anchors), a, a, pos, keep, tau)
    return ad.add(a2t, t2a)


def cosine_kd_loss(student, teacher, rehearsal) -> Tensor:
    """Mean over rehearsal rows of ``1 - cos(student, teacher)``."""
    rehearsal = np.asarray(rehearsal, dtype=np.int64)
    if rehearsal.size == 0:
        return _zero()
    s = ad.l2_normalize(ad.gather_rows(ad.as_tensor(student), rehearsal))
    t = ad.as_tensor(teacher).data[rehearsal]
    t = t / np.linalg.norm(t, axis=-1, keepdims=True)
    cos = ad.sum(ad.multiply(s, t), axis=-1)
    return ad.subtract(1.0, ad.mean(cos))


def lambda_nspt(num_past: int, num_new: int) -> float:
    if num_past < 0 or num_new < 0 or num_past + num_new == 0:
        raise ValueError("need L_p >= 0, L_n >= 0 and L_p + L_n > 0")
    return num_past / (num_past + num_new)


def combined_loss(asr, mm=None, nspt=None, lambda_mm: float = 0.1, lambda_nspt_: float = 0.0) -> Tensor:
    """``asr + lambda_mm * mm + lambda_nspt * nspt``; ``None`` terms are absent."""
    total = ad.as_tensor(asr)
    for term, lam in ((mm, lambda_mm), (nspt, lambda_nspt_)):
        if term is None:
            continue
        term = ad.as_tensor(term)
        if not np.isfinite(term.data).all() or not np.isfinite(lam):
            raise ValueError("non-finite loss term")
        total = ad.add(total, ad.scale(term, lam))
    if not np.isfinite(total.data).all():
        raise ValueError("non-finite loss term")
    return total
