"""Toy seq2seq SLU model.

* audio encoder: per-frame ``relu(x W1 + b1) W2 + b2`` (no cross-frame mixing)
* text encoder: the token embedding table, shared with the decoder
* projections ``g_A``/``g_T`` into the shared contrastive space (training only)
* decoder: one single-head cross-attention block over the audio states. The
  query is built from the previous token embedding plus a learned step
  embedding; keys/values from the audio states plus a learned frame embedding.

Parameter names: ``audio_enc.*``, ``text_enc.*``, ``proj_a.*``, ``proj_t.*``,
``dec.*``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .config import ModelConfig

NEG_INF = -1e30


def init_params(cfg: ModelConfig, vocab_size: int, seed: int | None = None) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)

    def dense(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)

    dA, dT, dS = cfg.d_audio, cfg.d_text, cfg.d_shared
    if dA != dT:
        raise ValueError("decoder residual requires d_audio == d_text")
    raw = {
        "audio_enc.w1": dense(cfg.d_in, dA),
        "audio_enc.b1": np.zeros(dA),
        "audio_enc.w2": dense(dA, dA),
        "audio_enc.b2": np.zeros(dA),
        "text_enc.embedding": rng.standard_normal((vocab_size, dT)) * 0.5,
        "proj_a.w": dense(dA, dS),
        "proj_a.b": np.zeros(dS),
        "proj_t.w": dense(dT, dS),
        "proj_t.b": np.zeros(dS),
        "dec.pos_step": rng.standard_normal((cfg.max_steps, dT)) * 0.5,
        "dec.pos_frame": rng.standard_normal((cfg.max_frames, dA)) * 0.5,
        "dec.wq": dense(dT, dT),
        "dec.wk": dense(dA, dT),
        "dec.wv": dense(dA, dT),
        "dec.wh": dense(dT, dT),
        "dec.bh": np.zeros(dT),
        "dec.wo": dense(dT, vocab_size),
        "dec.bo": np.zeros(vocab_size),
    }
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def frozen_copy(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Gradient-free deep copy with read-only arrays."""
    out = {}
    for k, p in params.items():
        a = p.data.copy()
        a.setflags(write=False)
        out[k] = Tensor(a, name=k)
    return out


# ---------------------------------------------------------------------------
# encoders and projections
# ---------------------------------------------------------------------------


def encode_audio(x, params: dict[str, Tensor]) -> Tensor:
    """Per-frame two-layer perceptron; ``x`` is ``(U, d_in)`` or ``(B, U, d_in)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] == 0:
        raise ValueError("encode_audio: empty sequence")
    if x.shape[-1] != params["audio_enc.w1"].shape[0]:
        raise ad.ShapeError(f"encode_audio: frame dim {x.shape[-1]} != {params['audio_enc.w1'].shape[0]}")
    h = ad.relu(ad.matmul(x, params["audio_enc.w1"]) + params["audio_enc.b1"])
    return ad.matmul(h, params["audio_enc.w2"]) + params["audio_enc.b2"]


def encode_text(ids, params: dict[str, Tensor]) -> Tensor:
    return ad.embedding_lookup(params["text_enc.embedding"], ids)


def mean_pool(h_a: Tensor, frame_mask: np.ndarray | None = None) -> Tensor:
    """Average over the frame axis, ignoring padded frames when a mask is given."""
    if frame_mask is None:
        return ad.mean(h_a, axis=-2)
    m = np.asarray(frame_mask, dtype=np.float64)
    counts = m.sum(axis=-1, keepdims=True)
    return ad.multiply(ad.sum(ad.multiply(h_a, m[..., None]), axis=-2), 1.0 / counts)


def project_audio(pooled: Tensor, params) -> Tensor:
    return ad.l2_normalize(ad.matmul(pooled, params["proj_a.w"]) + params["proj_a.b"])


def project_text(cls_rows: Tensor, params) -> Tensor:
    return ad.l2_normalize(ad.matmul(cls_rows, params["proj_t.w"]) + params["proj_t.b"])


def project_pair(h_a: Tensor, h_t: Tensor, cls_position: int, params) -> tuple[Tensor, Tensor]:
    """Unit-norm shared-space embeddings ``(a, t)`` for one example."""
    h_a = ad.as_tensor(h_a)
    h_t = ad.as_tensor(h_t)
    pooled = ad.reshape(ad.mean(h_a, axis=0), (1, -1))
    cls = ad.gather_rows(h_t, [cls_position])
    a = project_audio(pooled, params)
    t = project_text(cls, params)
    return ad.reshape(a, (-1,)), ad.reshape(t, (-1,))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Collated:
    audio: np.ndarray  # (B, U, d_in)
    frame_mask: np.ndarray  # (B, U) bool
    dec_in: np.ndarray  # (B, L) int
    dec_out: np.ndarray  # (B, L) int
    target_mask: np.ndarray  # (B, L) bool
    cls_ids: np.ndarray  # (B,) int, token at position 0 of each target


def collate(audios, transcripts, vocab) -> Collated:
    B = len(audios)
    if B == 0:
        raise ValueError("empty batch")
    U = max(a.shape[0] for a in audios)
    d = audios[0].shape[1]
    X = np.zeros((B, U, d))
    fm = np.zeros((B, U), dtype=bool)
    for i, a in enumerate(audios):
        X[i, : a.shape[0]] = a
        fm[i, : a.shape[0]] = True
    L = max(len(t) for t in transcripts) + 1
    dec_in = np.full((B, L), vocab.pad, dtype=np.int64)
    dec_out = np.full((B, L), vocab.pad, dtype=np.int64)
    for i, t in enumerate(transcripts):
        t = list(t)
        dec_in[i, : len(t) + 1] = [vocab.bos] + t
        dec_out[i, : len(t) + 1] = t + [vocab.eos]
    cls_ids = np.array([t[0] if len(t) else vocab.pad for t in transcripts], dtype=np.int64)
    return Collated(X, fm, dec_in, dec_out, dec_out != vocab.pad, cls_ids)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def _keys_values(h_a: Tensor, params):
    U = h_a.shape[-2]
    if U > params["dec.pos_frame"].shape[0]:
        raise ValueError(f"{U} frames exceed max_frames")
    mem = ad.add(h_a, ad.gather_rows(params["dec.pos_frame"], np.arange(U)))
    return ad.matmul(mem, params["dec.wk"]), ad.matmul(mem, params["dec.wv"])


def decoder_log_probs(h_a: Tensor, frame_mask: np.ndarray, dec_in: np.ndarray, params) -> Tensor:
    """Teacher-forced next-token log-probabilities, shape ``(B, L, V)``."""
    L = dec_in.shape[-1]
    if L > params["dec.pos_step"].shape[0]:
        raise ValueError(f"{L} decoder steps exceed max_steps")
    d = params["dec.wq"].shape[1]
    k, v = _keys_values(h_a, params)
    s = ad.add(encode_text(dec_in, params), ad.gather_rows(params["dec.pos_step"], np.arange(L)))
    q = ad.matmul(s, params["dec.wq"])
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d))
    scores = ad.masked_fill(scores, ~frame_mask[:, None, :], NEG_INF)
    ctx = ad.matmul(ad.softmax(scores), v)
    hid = ad.relu(ad.matmul(ad.add(s, ctx), params["dec.wh"]) + params["dec.bh"])
    logits = ad.matmul(hid, params["dec.wo"]) + params["dec.bo"]
    return ad.log_softmax(logits)


def asr_cross_entropy(batch: Collated, params, h_a: Tensor | None = None) -> Tensor:
    """Mean over the batch of the summed gold-token negative log-likelihood."""
    B = batch.audio.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if h_a is None:
        h_a = encode_audio(batch.audio, params)
    logp = decoder_log_probs(h_a, batch.frame_mask, batch.dec_in, params)
    gold = ad.take_last(logp, batch.dec_out)
    total = ad.sum(ad.multiply(gold, batch.target_mask.astype(np.float64)))
    return ad.scale(total, -1.0 / B)


@dataclass
class Forward:
    h_a: Tensor
    pooled_a: Tensor  # (B, d_A)
    cls_t: Tensor  # (B, d_T)
    a: Tensor | None = None
    t: Tensor | None = None


def embed_batch(batch: Collated, params, project: bool = True) -> Forward:
    h_a = encode_audio(batch.audio, params)
    pooled = mean_pool(h_a, batch.frame_mask)
    cls = encode_text(batch.cls_ids, params)
    out = Forward(h_a, pooled, cls)
    if project:
        out.a = project_audio(pooled, params)
        out.t = project_text(cls, params)
    return out


def audio_embeddings(audios, params, projected: bool = True, batch_size: int = 256) -> np.ndarray:
    """Gradient-free pooled (optionally projected) audio embeddings."""
    outs = []
    with no_grad():
        for i in range(0, len(audios), batch_size):
            chunk = audios[i : i + batch_size]
            U = max(a.shape[0] for a in chunk)
            X = np.zeros((len(chunk), U, chunk[0].shape[1]))
            fm = np.zeros((len(chunk), U), dtype=bool)
            for j, a in enumerate(chunk):
                X[j, : a.shape[0]] = a
                fm[j, : a.shape[0]] = True
            pooled = mean_pool(encode_audio(X, params), fm)
            outs.append((project_audio(pooled, params) if projected else pooled).data)
    return np.concatenate(outs, axis=0)
