"""Word-level vocabulary with reserved special ids."""
from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, Sequence

PAD, CLS, BOS, EOS, UNK = 0, 1, 2, 3, 4
SPECIALS = ("<pad>", "<cls>", "<bos>", "<eos>", "<unk>")

_PUNCT = re.compile(r"[^\w\s]")


def normalize_words(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the reserved special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, text: str) -> list[int]:
        return [self.id(w) for w in normalize_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, CLS, BOS):
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def text_branch_ids(self, text: str, length: int) -> list[int]:
        """``[CLS] w1 .. wn`` padded (or truncated) to ``length``."""
        ids = [CLS] + self.encode(text)
        ids = ids[:length]
        return ids + [PAD] * (length - len(ids))

    def lm_ids(self, text: str, max_words: int | None = None) -> tuple[list[int], list[int]]:
        """LM input ``bos w1..wn`` and next-token targets ``w1..wn eos``."""
        words = self.encode(text)
        if max_words is not None:
            words = words[:max_words]
        return [BOS] + words, words + [EOS]


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    """Frequency-ordered word vocabulary (ties broken lexicographically)."""
    counts: Counter[str] = Counter()
    n = 0
    for text in corpus:
        counts.update(normalize_words(text))
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    words = sorted((w for w in counts if w not in SPECIALS), key=lambda w: (-counts[w], w))
    return Vocabulary(list(SPECIALS) + words)
