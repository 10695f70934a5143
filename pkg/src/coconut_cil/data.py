"""Synthetic paired audio/text SLU corpora and feature-level SpecAug.

Each intent owns a small grammar: 2-4 ordered word slots, each with a few
candidate words drawn from a shared word list. Every word has a fixed random
prototype block of ``frames_per_word x d_in`` features; an utterance's audio is
the concatenation of its words' blocks plus i.i.d. Gaussian noise.

Randomness uses numpy's PCG64 seeded through ``SeedSequence`` so corpora are
reproducible anywhere PCG64 is available. Per-example streams are keyed on
``(seed, intent, sample index)``, so generation order does not matter.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import CorpusSpec
from .vocab import Vocabulary, tokenize

_LE_F64 = np.dtype("<f8")


@dataclass
class PairedExample:
    example_id: int
    intent_id: int
    words: tuple[str, ...]
    transcript: tuple[int, ...]
    audio: np.ndarray  # (U, d_in)

    @property
    def num_frames(self) -> int:
        return self.audio.shape[0]


@dataclass
class Corpus:
    spec: CorpusSpec
    vocab: Vocabulary
    train: list[PairedExample]
    test: list[PairedExample]

    def by_id(self) -> dict[int, PairedExample]:
        return {e.example_id: e for e in itertools.chain(self.train, self.test)}

    @property
    def max_transcript_len(self) -> int:
        return max(len(e.transcript) for e in itertools.chain(self.train, self.test))

    @property
    def max_frames(self) -> int:
        return max(e.num_frames for e in itertools.chain(self.train, self.test))


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def class_sizes(spec: CorpusSpec) -> list[int]:
    if spec.samples_per_intent is not None:
        return list(spec.samples_per_intent)
    rng = _rng(spec.seed, 1)
    lo, hi = math.log(spec.min_samples), math.log(spec.max_samples)
    return [int(round(math.exp(u))) for u in rng.uniform(lo, hi, size=spec.num_intents)]


def _grammars_overlap(g1, g2) -> bool:
    # two slot grammars share a sentence iff same length and every slot pair intersects
    return len(g1) == len(g2) and all(set(a) & set(b) for a, b in zip(g1, g2))


def make_grammars(spec: CorpusSpec, words: list[str]) -> list[list[tuple[str, ...]]]:
    rng = _rng(spec.seed, 2)
    grammars: list[list[tuple[str, ...]]] = []
    for _ in range(spec.num_intents):
        for _attempt in range(1000):
            n_slots = int(rng.integers(spec.min_slots, spec.max_slots + 1))
            g = [
                tuple(str(w) for w in rng.choice(words, size=spec.options_per_slot, replace=False))
                for _ in range(n_slots)
            ]
            if not any(_grammars_overlap(g, h) for h in grammars):
                grammars.append(g)
                break
        else:
            raise ValueError("could not build non-overlapping intent grammars; enlarge the word list")
    return grammars


def word_prototypes(spec: CorpusSpec, words: list[str]) -> dict[str, np.ndarray]:
    rng = _rng(spec.seed, 3)
    return {w: rng.standard_normal((spec.frames_per_word, spec.d_in)) for w in words}


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Build the train/test corpus determined entirely by ``spec``."""
    spec.validate()
    words = [f"w{i:02d}" for i in range(spec.num_words)]
    vocab = Vocabulary.build(spec.num_intents, words)
    grammars = make_grammars(spec, words)
    protos = word_prototypes(spec, words)
    sizes = class_sizes(spec)

    train, test = [], []
    next_id = 0
    for intent, (grammar, n) in enumerate(zip(grammars, sizes)):
        n_test = max(1, int(round(spec.test_fraction * n)))
        for s in range(n):
            rng = _rng(spec.seed, 4, intent, s)
            ws = tuple(slot[int(rng.integers(len(slot)))] for slot in grammar)
            clean = np.concatenate([protos[w] for w in ws], axis=0)
            audio = clean + spec.noise_std * rng.standard_normal(clean.shape)
            ex = PairedExample(next_id, intent, ws, tokenize(intent, ws, vocab), audio)
            next_id += 1
            (test if s >= n - n_test else train).append(ex)
    return Corpus(spec, vocab, train, test)


def spec_aug(x: np.ndarray, rng: np.random.Generator, return_masks: bool = False):
    """Feature-space stand-in for waveform band/chunk dropping.

    With prob. 0.5, zero 1-2 feature dims over all frames; independently with
    prob. 0.5, zero 1-3 time chunks, each of length uniform in
    ``[0, ceil(0.05 * U)]`` frames. Returns a copy.
    """
    y = np.array(x, dtype=np.float64, copy=True)
    U, d = y.shape
    dims: list[int] = []
    chunks: list[tuple[int, int]] = []
    freq_gate = rng.random() < 0.5
    if freq_gate:
        k = int(rng.integers(1, 3))
        dims = [int(i) for i in rng.choice(d, size=min(k, d), replace=False)]
        y[:, dims] = 0.0
    time_gate = rng.random() < 0.5
    if time_gate:
        max_len = max(1, math.ceil(0.05 * U))
        for _ in range(int(rng.integers(1, 4))):
            length = int(rng.integers(0, max_len + 1))
            start = int(rng.integers(0, U - length + 1))
            chunks.append((start, length))
            y[start : start + length] = 0.0
    if return_masks:
        return y, {"freq_gate": freq_gate, "dims": dims, "time_gate": time_gate, "chunks": chunks}
    return y


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------


def save_corpus(corpus: Corpus, out_dir) -> Path:
    """Write ``corpus.json`` (spec, vocab, records) and ``audio.bin``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, chunks, offset = [], [], 0
    for split, exs in (("train", corpus.train), ("test", corpus.test)):
        for e in exs:
            b = np.ascontiguousarray(e.audio, dtype=_LE_F64).tobytes()
            records.append(
                {
                    "id": e.example_id,
                    "split": split,
                    "intent": e.intent_id,
                    "words": list(e.words),
                    "transcript": list(e.transcript),
                    "frames": int(e.audio.shape[0]),
                    "offset": offset,
                }
            )
            chunks.append(b)
            offset += len(b)
    (out / "audio.bin").write_bytes(b"".join(chunks))
    manifest = {
        "spec": asdict(corpus.spec),
        "vocab": [{"token": t, "id": i, "role": r} for i, (t, r) in enumerate(zip(corpus.vocab.tokens, corpus.vocab.roles))],
        "d_in": corpus.spec.d_in,
        "audio": "audio.bin",
        "examples": records,
    }
    path = out / "corpus.json"
    path.write_text(json.dumps(manifest), encoding="utf-8")
    corpus.vocab.save(out / "vocab.tsv")
    return path


def load_corpus(path) -> Corpus:
    path = Path(path)
    if path.is_dir():
        path = path / "corpus.json"
    m = json.loads(path.read_text(encoding="utf-8"))
    blob = (path.parent / m["audio"]).read_bytes()
    vocab = Vocabulary([v["token"] for v in m["vocab"]], [v["role"] for v in m["vocab"]])
    d_in = m["d_in"]
    train, test = [], []
    for r in m["examples"]:
        audio = np.frombuffer(blob, dtype=_LE_F64, count=r["frames"] * d_in, offset=r["offset"])
        ex = PairedExample(
            r["id"], r["intent"], tuple(r["words"]), tuple(r["transcript"]), audio.reshape(r["frames"], d_in).copy()
        )
        (train if r["split"] == "train" else test).append(ex)
    return Corpus(CorpusSpec(**m["spec"]), vocab, train, test)
