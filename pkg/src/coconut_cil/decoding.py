"""Autoregressive decoding (greedy and beam search) over the toy decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .model import encode_audio

BLOCKED = -np.inf


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]  # generated tokens, EOS stripped
    token_logprobs: tuple[float, ...]  # one per generated token, EOS included
    score: float
    truncated: bool = False


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class StepScorer:
    """Next-token log-probs for one utterance given (previous token, step index).

    The decoder has no self-attention, so a step depends only on the previous
    token, the step position and the audio memory.
    """

    def __init__(self, params, audio: np.ndarray, blocked: tuple[int, ...] = ()):
        p = {k: v.data for k, v in params.items()}
        with no_grad():
            h_a = encode_audio(audio, params).data
        U = h_a.shape[0]
        mem = h_a + p["dec.pos_frame"][:U]
        self.k = mem @ p["dec.wk"]
        self.v = mem @ p["dec.wv"]
        self.p = p
        self.blocked = list(blocked)
        self.scale = 1.0 / np.sqrt(p["dec.wq"].shape[1])

    def __call__(self, prev: np.ndarray, step: int) -> np.ndarray:
        p = self.p
        s = p["text_enc.embedding"][prev] + p["dec.pos_step"][step]
        sc = (s @ p["dec.wq"]) @ self.k.T * self.scale
        sc = np.exp(sc - sc.max(axis=-1, keepdims=True))
        attn = sc / sc.sum(axis=-1, keepdims=True)
        hid = np.maximum((s + attn @ self.v) @ p["dec.wh"] + p["dec.bh"], 0.0)
        out = _log_softmax(hid @ p["dec.wo"] + p["dec.bo"])
        if self.blocked:
            out[:, self.blocked] = BLOCKED
        return out


def beam_search(score_step, bos: int, eos: int, beam_width: int, max_len: int) -> Hypothesis:
    """Beam search with summed log-prob scores.

    Ties are broken by the lexicographically smaller token sequence. A
    hypothesis that reaches ``max_len`` tokens without EOS is returned with
    ``truncated=True`` if it is the best candidate.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    alive: list[tuple[float, tuple, tuple]] = [(0.0, (), ())]
    finished: list[tuple[float, tuple, tuple]] = []
    for step in range(max_len):
        prev = np.array([toks[-1] if toks else bos for _, toks, _ in alive], dtype=np.int64)
        lp = score_step(prev, step)
        cands = []
        for i, (sc, toks, lps) in enumerate(alive):
            row = lp[i]
            for tok in np.flatnonzero(np.isfinite(row)):
                cands.append((sc + row[tok], toks + (int(tok),), lps + (float(row[tok]),)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        for c in cands:
            if c[1][-1] == eos:
                finished.append(c)
            else:
                alive.append(c)
            if len(alive) == beam_width:
                break
        if not alive:
            break
        if finished and max(f[0] for f in finished) >= alive[0][0]:
            # scores only decrease; no alive hypothesis can overtake
            alive = []
            break
    pool = [(sc, toks, lps, False) for sc, toks, lps in finished]
    pool += [(sc, toks, lps, True) for sc, toks, lps in alive]
    sc, toks, lps, trunc = min(pool, key=lambda c: (-c[0], c[1]))
    if not trunc:
        toks = toks[:-1]
    return Hypothesis(toks, lps, float(sc), trunc)


def decode(audio: np.ndarray, params, vocab, beam_width: int = 3, max_len: int = 8) -> Hypothesis:
    scorer = StepScorer(params, audio, blocked=(vocab.bos, vocab.pad))
    return beam_search(scorer, vocab.bos, vocab.eos, beam_width, max_len)


def sequence_score(score_step, tokens, bos: int, eos: int, terminate: bool = True) -> float:
    """Summed log-prob of ``tokens`` (+ EOS when ``terminate``) under ``score_step``."""
    seq = list(tokens) + ([eos] if terminate else [])
    total, prev = 0.0, bos
    for step, tok in enumerate(seq):
        total += float(score_step(np.array([prev]), step)[0, tok])
        prev = tok
    return total
