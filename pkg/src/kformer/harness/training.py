"""Fine-tuning loop, evaluation and the retrieval glue between them."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from kformer import numeric as nm
from kformer.encoder import Kformer
from kformer.harness.task import MCQExample
from kformer.injection import bag_matrix
from kformer.numeric import ComputationRecord, NumericError, Parameter
from kformer.retrieval import InvertedIndex, KnowledgeCandidate, dense_order, sparse_retrieve
from kformer.text import Vocabulary, tokenize

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 40
    weight_decay: float = 1e-2
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    freeze_retrieval: bool = False

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0 or self.warmup_steps < 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("lr, warmup_steps and weight_decay must be >= 0, clip_norm > 0")


# ---------------------------------------------------------------------------
# Retrieval glue
# ---------------------------------------------------------------------------


class KnowledgeRetriever:
    """Sparse candidates are cached per question; dense scores use live weights."""

    def __init__(self, index: InvertedIndex, vocab: Vocabulary, model: Kformer):
        self.index = index
        self.vocab = vocab
        self.model = model
        self._sparse: dict[str, tuple[list[KnowledgeCandidate], np.ndarray]] = {}
        self._ids: dict[str, list[int]] = {}
        self._doc_vectors: np.ndarray | None = None
        self._doc_row: dict[str, int] = {text: i for i, text in enumerate(index.texts)}

    def refresh(self) -> None:
        """Re-embed the whole corpus with the current knowledge embedder."""
        if self.model.knowledge_embedder is None:
            return
        emb = self.model.knowledge_embedder
        bags = bag_matrix([self.token_ids(t) for t in self.index.texts], emb.vocab_size, emb.max_len)
        self._doc_vectors = bags @ emb.table.value.data

    def token_ids(self, text: str) -> list[int]:
        ids = self._ids.get(text)
        if ids is None:
            ids = self._ids[text] = self.vocab.encode(text)
        return ids

    def query_embedding(self, tokens: Sequence[str]) -> np.ndarray:
        ids = [self.vocab.stoi[t] for t in tokens if t in self.vocab.stoi]
        if not ids:
            return np.zeros(self.model.cfg.hidden)
        return self.model.token_embedding.value.data[ids].mean(axis=0)

    def knowledge_embedding(self, text: str) -> np.ndarray:
        row = self._doc_row.get(text)
        if self._doc_vectors is None or row is None:
            return self.model.knowledge_embedder.vector(self.token_ids(text))
        return self._doc_vectors[row]

    def retrieve(self, question: str) -> list[KnowledgeCandidate]:
        inj = self.model.injection
        tokens = tokenize(question)
        cached = self._sparse.get(question)
        if cached is None:
            cands = sparse_retrieve(self.index, tokens, inj.sparse_m)
            cached = self._sparse[question] = (cands, np.array([c.doc_id for c in cands], dtype=np.int64))
        cands, ids = cached
        if self.model.knowledge_embedder is None or not cands:
            return cands[: inj.top_n]
        if self._doc_vectors is None:
            self.refresh()
        # the corpus is the index's own text list, so doc ids index the cached vectors
        scores = self._doc_vectors[ids] @ self.query_embedding(tokens)
        return [
            KnowledgeCandidate(cands[i].doc_id, cands[i].text, cands[i].sparse_score, float(scores[i]))
            for i in dense_order(scores, ids, inj.top_n)
        ]


@dataclass
class PreparedExample:
    question: list[int]
    options: list[list[int]]
    answer: int
    knowledge: list[list[int]] = field(default_factory=list)
    knowledge_ids: list[int] = field(default_factory=list)


def prepare(
    examples: Sequence[MCQExample], vocab: Vocabulary, retriever: KnowledgeRetriever | None
) -> list[PreparedExample]:
    out = []
    if retriever is not None:
        retriever.refresh()
    for ex in examples:
        p = PreparedExample(vocab.encode(ex.question), [vocab.encode(o) for o in ex.options], ex.answer)
        if retriever is not None and retriever.model.injection.uses_retrieval:
            cands = retriever.retrieve(ex.question)
            p.knowledge = [retriever.token_ids(c.text) for c in cands]
            p.knowledge_ids = [c.doc_id for c in cands]
        out.append(p)
    return out


# ---------------------------------------------------------------------------
# Loss / scoring
# ---------------------------------------------------------------------------


def batch_logits(model: Kformer, vocab: Vocabulary, batch: Sequence[PreparedExample]) -> nm.Tensor:
    n_opt = len(batch[0].options)
    if any(len(p.options) != n_opt for p in batch):
        raise ValueError("all examples in a batch need the same number of options")
    seqs, bags = [], []
    for p in batch:
        s, bag = model.option_sequences(vocab.cls_id, vocab.sep_id, p.question, p.options, p.knowledge)
        seqs.extend(s)
        bags.extend([bag] * len(s))
    return nm.reshape(model.sequence_logits(seqs, bags), (len(batch), n_opt))


def batch_loss(model: Kformer, vocab: Vocabulary, batch: Sequence[PreparedExample]) -> nm.Tensor:
    logp = nm.log_softmax(batch_logits(model, vocab, batch), axis=-1)
    picked = nm.getitem(logp, (np.arange(len(batch)), np.array([p.answer for p in batch])))
    return nm.scale(nm.sum(picked), -1.0 / len(batch))


def predict(model: Kformer, vocab: Vocabulary, prepared: Sequence[PreparedExample], batch_size: int = 64) -> np.ndarray:
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prepared):
        groups.setdefault(len(p.options), []).append(i)
    out = np.zeros(len(prepared), dtype=np.int64)
    for idx in groups.values():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s : s + batch_size]
            logits = batch_logits(model, vocab, [prepared[i] for i in chunk]).data
            out[chunk] = logits.argmax(axis=1)
    return out


def evaluate(
    model: Kformer, vocab: Vocabulary, examples: Sequence[MCQExample], retriever: KnowledgeRetriever | None = None
) -> float:
    """Fraction of examples whose highest-scoring option is the answer."""
    if not examples:
        raise ValueError("cannot evaluate on an empty dataset")
    prepared = prepare(examples, vocab, retriever)
    preds = predict(model, vocab, prepared)
    return float(np.mean(preds == np.array([p.answer for p in prepared])))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def decays(p: Parameter) -> bool:
    """Weight decay applies to every matrix, not to norm gains/shifts."""
    return not (".ln" in p.name or p.name.startswith("final_ln"))


def lr_at(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if warmup > 0 and step <= warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    return base_lr * max(0.0, (total - step) / (total - warmup))


class AdamW:
    def __init__(self, params: Sequence[Parameter], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = {p.name: np.zeros(p.shape) for p in self.params}
        self.v = {p.name: np.zeros(p.shape) for p in self.params}
        self.t = 0

    def clip(self) -> float:
        norm = math.sqrt(float(np.sum([np.sum(p.grad * p.grad) for p in self.params])))
        if norm > self.cfg.clip_norm:
            f = self.cfg.clip_norm / (norm + 1e-12)
            for p in self.params:
                p.grad = p.grad * f
        return norm

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name] = c.beta1 * self.m[p.name] + (1.0 - c.beta1) * g
            v = self.v[p.name] = c.beta2 * self.v[p.name] + (1.0 - c.beta2) * g * g
            w = p.value.data
            if decays(p):
                w = w * (1.0 - lr * c.weight_decay)
            p.value = nm.Tensor(w - lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict]
    dev_accuracy: float | None

    @property
    def losses(self) -> list[float]:
        return [h["train_loss"] for h in self.history]


def train(
    model: Kformer,
    vocab: Vocabulary,
    train_examples: Sequence[MCQExample],
    tcfg: TrainConfig,
    index: InvertedIndex | None = None,
    dev_examples: Sequence[MCQExample] | None = None,
) -> TrainResult:
    """AdamW fine-tuning with warmup/linear decay, clipping and per-epoch re-retrieval."""
    tcfg.validate()
    if model.injection.uses_retrieval and index is None:
        raise ValueError(f"mode={model.injection.mode} needs a knowledge index")
    retriever = KnowledgeRetriever(index, vocab, model) if index is not None else None
    params = model.parameters()
    opt = AdamW(params, tcfg)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 2]))
    n = len(train_examples)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    total = steps_per_epoch * tcfg.epochs
    history: list[dict] = []
    prepared = dev_prepared = None
    step = 0
    dev_acc = None
    for epoch in range(1, tcfg.epochs + 1):
        if prepared is None or not tcfg.freeze_retrieval:
            prepared = prepare(train_examples, vocab, retriever)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for s in range(0, n, tcfg.batch_size):
            step += 1
            batch = [prepared[i] for i in order[s : s + tcfg.batch_size]]
            try:
                with ComputationRecord() as rec:
                    loss = batch_loss(model, vocab, batch)
                nm.backward(rec, loss, params)
            except NumericError as exc:
                raise TrainingDiverged(f"step {step}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"step {step}: loss is {value}")
            opt.clip()
            opt.step(lr_at(step, tcfg.lr, tcfg.warmup_steps, total))
            epoch_loss += value * len(batch)
        row = {"epoch": epoch, "step": step, "train_loss": epoch_loss / n}
        if dev_examples:
            if dev_prepared is None or not tcfg.freeze_retrieval:
                dev_prepared = prepare(dev_examples, vocab, retriever)
            preds = predict(model, vocab, dev_prepared)
            dev_acc = float(np.mean(preds == np.array([p.answer for p in dev_prepared])))
            row["dev_accuracy"] = dev_acc
        log.info("epoch %d loss %.4f dev %s", epoch, row["train_loss"], row.get("dev_accuracy"))
        history.append(row)
    return TrainResult(history, dev_acc)


def train_config_dict(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)
