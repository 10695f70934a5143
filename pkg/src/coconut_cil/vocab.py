"""Word-level vocabulary with reserved intent/special tokens and extended transcripts."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, BOS, EOS, SEP)


def intent_token(intent_id: int) -> str:
    return f"<intent_{intent_id}>"


@dataclass
class Vocabulary:
    tokens: list[str]
    roles: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.intent_ids = [i for i, r in enumerate(self.roles) if r == "intent"]
        self._intent_of = {tid: k for k, tid in enumerate(self.intent_ids)}

    @classmethod
    def build(cls, num_intents: int, words: Sequence[str]) -> "Vocabulary":
        tokens = list(SPECIALS) + [intent_token(k) for k in range(num_intents)] + list(words)
        roles = ["special"] * len(SPECIALS) + ["intent"] * num_intents + ["word"] * len(words)
        return cls(tokens, roles)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    @property
    def sep(self) -> int:
        return self.index[SEP]

    @property
    def num_intents(self) -> int:
        return len(self.intent_ids)

    def intent_token_id(self, intent_id: int) -> int:
        return self.intent_ids[intent_id]

    def intent_of_token(self, token_id: int) -> int | None:
        return self._intent_of.get(token_id)

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(["token", "id", "role"])
            for i, (t, r) in enumerate(zip(self.tokens, self.roles)):
                w.writerow([t, i, r])

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(Path(path), newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh, delimiter="\t"))
        rows.sort(key=lambda r: int(r["id"]))
        return cls([r["token"] for r in rows], [r["role"] for r in rows])


def tokenize(intent_id: int, words: Sequence[str], vocab: Vocabulary) -> tuple[int, ...]:
    """``[intent token, SEP, word ids...]``."""
    ids = [vocab.intent_token_id(intent_id), vocab.sep]
    for w in words:
        i = vocab.index.get(w)
        if i is None or vocab.roles[i] != "word":
            raise KeyError(f"unknown word {w!r}")
        ids.append(i)
    return tuple(ids)


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> tuple[int, list[str]]:
    """Inverse of :func:`tokenize` for well-formed sequences."""
    if len(ids) < 2 or ids[1] != vocab.sep:
        raise ValueError("malformed extended transcript")
    intent = vocab.intent_of_token(ids[0])
    if intent is None:
        raise ValueError("position 0 is not an intent token")
    return intent, [vocab.tokens[i] for i in ids[2:]]


def extract_intent(ids: Sequence[int], vocab: Vocabulary) -> int | None:
    if not len(ids):
        return None
    return vocab.intent_of_token(int(ids[0]))
