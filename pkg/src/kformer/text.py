"""Word-level tokenization shared by the retriever and the encoder."""

from __future__ import annotations

import re
from typing import Iterable

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _WORD.findall(text.lower())


class Vocabulary:
    """Bidirectional word <-> id map; the four special tokens take ids 0-3."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        seen: set[str] = set()
        for t in texts:
            seen.update(tokenize(t))
        return cls(sorted(seen))

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    @property
    def cls_id(self) -> int:
        return self.stoi[CLS]

    @property
    def sep_id(self) -> int:
        return self.stoi[SEP]

    def encode(self, text: str) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(w, unk) for w in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]
