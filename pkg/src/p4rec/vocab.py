"""Closed word-level vocabulary shared by the language model and reward models."""

from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import numpy as np

BOS, EOS, PAD, UNK = "<bos>", "<eos>", "<pad>", "<unk>"
SPECIALS = (BOS, EOS, PAD, UNK)
BOS_ID, EOS_ID, PAD_ID, UNK_ID = 0, 1, 2, 3
SENTENCE_END = (".", "!")


class Vocabulary:
    """Bijective token <-> id map; specials always occupy ids 0..3."""

    def __init__(self, tokens: Iterable[str]):
        seen = list(SPECIALS)
        index = {t: i for i, t in enumerate(seen)}
        for t in tokens:
            if t not in index:
                index[t] = len(seen)
                seen.append(t)
        self.tokens: list[str] = seen
        self.index: dict[str, int] = index

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def encode(self, text: str | Sequence[str], strict: bool = True) -> np.ndarray:
        words = text.split() if isinstance(text, str) else list(text)
        ids = []
        for w in words:
            if w in self.index:
                ids.append(self.index[w])
            elif strict:
                raise KeyError(f"token {w!r} not in vocabulary")
            else:
                ids.append(UNK_ID)
        return np.array(ids, dtype=np.int64)

    def decode(self, ids: Iterable[int], stop_at_eos: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID and stop_at_eos:
                break
            if i in (BOS_ID, PAD_ID):
                continue
            if not 0 <= i < len(self.tokens):
                raise KeyError(f"token id {i} outside vocabulary")
            out.append(self.tokens[i])
        return " ".join(out)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]

    def to_list(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_list(cls, tokens: list[str]) -> "Vocabulary":
        if tuple(tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the four special tokens")
        return cls(tokens[4:])


def split_sentences(ids: Sequence[int], vocab: Vocabulary) -> list[list[int]]:
    """Split a token-id sequence on sentence-final punctuation; drops EOS/PAD."""
    ends = {vocab.index[p] for p in SENTENCE_END if p in vocab.index}
    out: list[list[int]] = []
    cur: list[int] = []
    for i in ids:
        i = int(i)
        if i == EOS_ID:
            break
        if i in (PAD_ID, BOS_ID):
            continue
        cur.append(i)
        if i in ends:
            out.append(cur)
            cur = []
    if cur:
        out.append(cur)
    return out


def pad_batch(seqs: Sequence[Sequence[int]], length: int | None = None, pad: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a matrix; returns (ids, mask) with mask true on real tokens."""
    length = max((len(s) for s in seqs), default=0) if length is None else length
    ids = np.full((len(seqs), max(length, 1)), pad, dtype=np.int64)
    mask = np.zeros(ids.shape, dtype=bool)
    for k, s in enumerate(seqs):
        s = list(s)[:length]
        ids[k, :len(s)] = s
        mask[k, :len(s)] = True
    return ids, mask
