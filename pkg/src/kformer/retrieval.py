"""Two-stage knowledge retrieval: BM25 over an inverted index, then dense re-ranking.

The sparse stage scores with Okapi BM25,

    score(q, d) = sum_t idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))
    idf(t)      = ln(1 + (n_docs - df + 0.5) / (df + 0.5))

and keeps the top ``m`` positive-scoring documents. The dense stage scores each
candidate by the inner product of the averaged query token embedding with the
candidate's knowledge embedding and keeps the top ``n``. Both stages break ties
by ascending doc id.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from kformer.text import tokenize

INDEX_FORMAT = "kformer-bm25-index"
INDEX_VERSION = 1


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    doc_id: int
    text: str
    tokens: tuple[str, ...]


class Corpus:
    """Documents with dense ids 0..n-1."""

    def __init__(self, texts: Sequence[str]):
        self.documents = [Document(i, t, tuple(tokenize(t))) for i, t in enumerate(texts)]

    def __len__(self) -> int:
        return len(self.documents)

    def __getitem__(self, doc_id: int) -> Document:
        return self.documents[doc_id]

    @property
    def texts(self) -> list[str]:
        return [d.text for d in self.documents]

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "Corpus":
        """Read ``{"id": int, "text": str}`` lines; ids must be 0..n-1 in some order."""
        rows: dict[int, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    doc_id, text = obj["id"], obj["text"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise CorpusError(f"line {lineno}: malformed corpus record ({exc})") from exc
                if not isinstance(doc_id, int) or not isinstance(text, str):
                    raise CorpusError(f"line {lineno}: 'id' must be int and 'text' a string")
                if doc_id in rows:
                    raise CorpusError(f"line {lineno}: duplicate id {doc_id}")
                rows[doc_id] = text
        if not rows:
            raise CorpusError("empty corpus")
        if sorted(rows) != list(range(len(rows))):
            raise CorpusError("document ids must be dense from 0")
        return cls([rows[i] for i in range(len(rows))])

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for d in self.documents:
                fh.write(json.dumps({"id": d.doc_id, "text": d.text}) + "\n")


@dataclass
class KnowledgeCandidate:
    doc_id: int
    text: str
    sparse_score: float
    dense_score: float | None = None

    def to_dict(self) -> dict:
        out = {"doc_id": self.doc_id, "text": self.text, "sparse_score": self.sparse_score}
        if self.dense_score is not None:
            out["dense_score"] = self.dense_score
        return out


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[int, int]]]
    doc_len: list[int]
    texts: list[str]
    k1: float = 1.2
    b: float = 0.75
    avg_doc_len: float = field(init=False)
    _contrib: dict = field(init=False, repr=False, compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        self.avg_doc_len = sum(self.doc_len) / len(self.doc_len)

    @property
    def n_docs(self) -> int:
        return len(self.doc_len)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def contributions(self, term: str) -> tuple[np.ndarray, np.ndarray]:
        """Doc ids containing ``term`` and the term's BM25 contribution to each."""
        hit = self._contrib.get(term)
        if hit is None:
            plist = self.postings.get(term, ())
            ids = np.array([d for d, _ in plist], dtype=np.int64)
            tf = np.array([t for _, t in plist], dtype=np.float64)
            dl = np.asarray(self.doc_len, dtype=np.float64)[ids]
            norm = self.k1 * (1.0 - self.b + self.b * dl / self.avg_doc_len)
            hit = self._contrib[term] = (ids, self.idf(term) * (tf * (self.k1 + 1.0) / (tf + norm)))
        return hit

    def save(self, path: str | Path) -> None:
        """Write a JSON index. Floats use repr, so a reload reproduces scores exactly."""
        payload = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "k1": self.k1,
            "b": self.b,
            "doc_len": self.doc_len,
            "texts": self.texts,
            "postings": {t: [list(p) for p in ps] for t, ps in sorted(self.postings.items())},
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "InvertedIndex":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != INDEX_FORMAT:
            raise CorpusError(f"{path}: not a {INDEX_FORMAT} file")
        if payload.get("version") != INDEX_VERSION:
            raise CorpusError(
                f"{path}: index version {payload.get('version')} unsupported (want {INDEX_VERSION})"
            )
        postings = {t: [(int(d), int(tf)) for d, tf in ps] for t, ps in payload["postings"].items()}
        return cls(postings, payload["doc_len"], payload["texts"], payload["k1"], payload["b"])


def build_index(corpus: Corpus, k1: float = 1.2, b: float = 0.75) -> InvertedIndex:
    if len(corpus) == 0:
        raise CorpusError("empty corpus")
    postings: dict[str, list[tuple[int, int]]] = {}
    doc_len = []
    for doc in corpus.documents:
        doc_len.append(len(doc.tokens))
        for term, tf in sorted(Counter(doc.tokens).items()):
            postings.setdefault(term, []).append((doc.doc_id, tf))
    return InvertedIndex(postings, doc_len, corpus.texts, k1, b)


def _term_weight(index: InvertedIndex, tf: int, dl: int) -> float:
    norm = index.k1 * (1.0 - index.b + index.b * dl / index.avg_doc_len)
    return tf * (index.k1 + 1.0) / (tf + norm)


def bm25_score(index: InvertedIndex, query_tokens: Sequence[str], doc_id: int) -> float:
    if not 0 <= doc_id < index.n_docs:
        raise IndexError(f"doc_id {doc_id} not in index of {index.n_docs} documents")
    dl = index.doc_len[doc_id]
    score = 0.0
    for term in query_tokens:
        for d, tf in index.postings.get(term, ()):
            if d == doc_id:
                score += index.idf(term) * _term_weight(index, tf, dl)
                break
    return score


def score_all(index: InvertedIndex, query_tokens: Sequence[str]) -> dict[int, float]:
    """BM25 scores of every document sharing a term with the query."""
    scores, touched = score_vector(index, query_tokens)
    return {int(d): float(scores[d]) for d in np.flatnonzero(touched)}


def score_vector(index: InvertedIndex, query_tokens: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Dense score array over all docs plus a mask of docs any query term touched."""
    scores = np.zeros(index.n_docs)
    touched = np.zeros(index.n_docs, dtype=bool)
    for term in query_tokens:
        ids, contrib = index.contributions(term)
        # a term lists each doc at most once, so fancy-index accumulation is exact
        scores[ids] += contrib
        touched[ids] = True
    return scores, touched


def sparse_retrieve(index: InvertedIndex, query_tokens: Sequence[str], m: int) -> list[KnowledgeCandidate]:
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    scores, touched = score_vector(index, query_tokens)
    ids = np.flatnonzero(touched & (scores > 0.0))
    if len(ids) > m:
        # keep everything tied with the m-th score so the id tie-break stays exact
        cut = np.partition(scores[ids], len(ids) - m)[len(ids) - m]
        ids = ids[scores[ids] >= cut]
    top = ids[np.lexsort((ids, -scores[ids]))[:m]]
    return [KnowledgeCandidate(int(d), index.texts[d], float(scores[d])) for d in top]


TIE_RTOL = 1e-12


def dense_order(scores: np.ndarray, doc_ids: np.ndarray, n: int) -> np.ndarray:
    """Positions of the top ``n`` scores, ties broken by ascending doc id.

    Inner products of equal mean embeddings can differ in the last bits
    depending on summation order, so scores within ``TIE_RTOL`` of their
    neighbour in the ranking count as tied.
    """
    scores = np.asarray(scores, dtype=np.float64)
    doc_ids = np.asarray(doc_ids)
    order = np.lexsort((doc_ids, -scores))
    if len(order) < 2:
        return order[:n]
    s = scores[order]
    gap = s[:-1] - s[1:]
    tied = gap <= TIE_RTOL * np.maximum(1.0, np.abs(s[1:]))
    if not tied.any():
        return order[:n]
    group = np.concatenate([[0], np.cumsum(~tied)])
    return order[np.lexsort((doc_ids[order], group))][:n]


def dense_rerank(
    query_emb: np.ndarray,
    candidates: Sequence[KnowledgeCandidate],
    embed: Callable[[str], np.ndarray],
    n: int,
) -> list[KnowledgeCandidate]:
    """Score candidates by ``<query_emb, embed(text)>`` and keep the top ``n``.

    ``embed`` maps a knowledge text to its averaged embedding vector.
    """
    if not candidates:
        return []
    q = np.asarray(query_emb, dtype=np.float64)
    scores = np.stack([embed(c.text) for c in candidates]) @ q
    ids = np.array([c.doc_id for c in candidates])
    return [
        KnowledgeCandidate(candidates[i].doc_id, candidates[i].text, candidates[i].sparse_score, float(scores[i]))
        for i in dense_order(scores, ids, n)
    ]


def retrieve(
    index: InvertedIndex,
    query_text: str,
    m: int,
    n: int,
    query_embed: Callable[[Sequence[str]], np.ndarray] | None = None,
    knowledge_embed: Callable[[str], np.ndarray] | None = None,
) -> list[KnowledgeCandidate]:
    """Sparse top-``m`` then dense top-``n``; sparse-only when no embedders are given."""
    tokens = tokenize(query_text)
    candidates = sparse_retrieve(index, tokens, m)
    if query_embed is None or knowledge_embed is None:
        return candidates[:n]
    return dense_rerank(query_embed(tokens), candidates, knowledge_embed, n)

