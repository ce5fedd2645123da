"""Lowercase word-level tokenizer."""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

WORD_RE = re.compile(r"[a-z0-9]+")

PAD, UNK, BOA, EOA = "<pad>", "<unk>", "<boa>", "<eoa>"
SPECIALS = (PAD, UNK, BOA, EOA)


def words(text: str) -> list[str]:
    return WORD_RE.findall(text.lower())


class Tokenizer(BaseEstimator):
    """Word vocabulary built from a training corpus.

    Ids 0-3 are reserved for padding, unknown words and the begin/end-of-answer
    markers; the rest are assigned by descending frequency (ties
    lexicographic) up to ``max_vocab`` entries in total.
    """

    def __init__(self, max_vocab: int = 2000):
        self.max_vocab = max_vocab

    def fit(self, texts: Iterable[str], y=None):
        counts = Counter()
        for t in texts:
            counts.update(words(t))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        vocab = list(SPECIALS) + [w for w, _ in ranked[: max(self.max_vocab - len(SPECIALS), 0)]]
        self.vocab_ = vocab
        self.index_ = {w: i for i, w in enumerate(vocab)}
        return self

    @classmethod
    def from_vocab(cls, vocab: list[str]) -> "Tokenizer":
        if tuple(vocab[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        tok = cls(max_vocab=len(vocab))
        tok.vocab_ = list(vocab)
        tok.index_ = {w: i for i, w in enumerate(vocab)}
        return tok

    @property
    def vocab_size(self) -> int:
        check_is_fitted(self, "vocab_")
        return len(self.vocab_)

    @property
    def boa_id(self) -> int:
        return SPECIALS.index(BOA)

    @property
    def eoa_id(self) -> int:
        return SPECIALS.index(EOA)

    def encode(self, text: str) -> list[int]:
        check_is_fitted(self, "vocab_")
        unk = self.index_[UNK]
        return [self.index_.get(w, unk) for w in words(text)]

    def encode_question(self, text: str) -> list[int]:
        return self.encode(text) + [self.boa_id]

    def encode_answer(self, text: str) -> list[int]:
        return self.encode(text) + [self.eoa_id]

    def decode(self, ids: Iterable[int]) -> str:
        check_is_fitted(self, "vocab_")
        out = []
        for i in ids:
            if i == self.eoa_id:
                break
            if 0 <= i < len(self.vocab_) and self.vocab_[i] not in SPECIALS:
                out.append(self.vocab_[i])
        return " ".join(out)

    def normalize(self, text: str) -> str:
        """Text as it would read after an encode/decode round trip."""
        return self.decode(self.encode(text))
