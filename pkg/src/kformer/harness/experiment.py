"""Run configuration, end-to-end runs, and the analysis procedures.

A :class:`RunConfig` bundles every knob of one experiment. ``seed`` drives the
task generator, model initialization and batch order together, so one number
pins a run down completely.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from kformer.encoder import Kformer, ModelConfig, ModelConfigError
from kformer.harness.task import MCQExample, SyntheticTask, SyntheticTaskConfig, TaskConfigError, generate_dataset
from kformer.harness.training import (
    KnowledgeRetriever,
    TrainConfig,
    TrainResult,
    evaluate,
    predict,
    prepare,
    train,
)
from kformer.injection import InjectionConfig, InjectionConfigError, embed_knowledge_batch
from kformer.retrieval import InvertedIndex, build_index
from kformer.text import Vocabulary

log = logging.getLogger(__name__)


class RunConfigError(ValueError):
    pass


class UnsupportedModeError(ValueError):
    pass


@dataclass
class TaskSection:
    n_entities: int = SyntheticTaskConfig.n_entities
    n_attributes: int = SyntheticTaskConfig.n_attributes
    n_options: int = SyntheticTaskConfig.n_options
    dev_fraction: float = SyntheticTaskConfig.dev_fraction
    distractors: str = SyntheticTaskConfig.distractors


@dataclass
class ModelSection:
    num_layers: int = ModelConfig.num_layers
    hidden: int = ModelConfig.hidden
    intermediate: int = ModelConfig.intermediate
    num_heads: int = ModelConfig.num_heads
    max_seq_len: int = ModelConfig.max_seq_len


@dataclass
class InjectionSection:
    mode: str = InjectionConfig.mode
    layers: list[int] | None = None
    top_n: int = InjectionConfig.top_n
    sparse_m: int = InjectionConfig.sparse_m


@dataclass
class TrainSection:
    epochs: int = TrainConfig.epochs
    batch_size: int = TrainConfig.batch_size
    lr: float = TrainConfig.lr
    warmup_steps: int = TrainConfig.warmup_steps
    weight_decay: float = TrainConfig.weight_decay
    clip_norm: float = TrainConfig.clip_norm
    beta1: float = TrainConfig.beta1
    beta2: float = TrainConfig.beta2
    adam_eps: float = TrainConfig.adam_eps
    freeze_retrieval: bool = TrainConfig.freeze_retrieval


@dataclass
class RetrievalSection:
    k1: float = 1.2
    b: float = 0.75


SECTIONS = {
    "task": TaskSection,
    "model": ModelSection,
    "injection": InjectionSection,
    "train": TrainSection,
    "retrieval": RetrievalSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    injection: InjectionSection = field(default_factory=InjectionSection)
    train: TrainSection = field(default_factory=TrainSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)

    # -- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise RunConfigError("config must be a JSON object")
        cfg = cls()
        for key, value in data.items():
            if key == "seed":
                cfg.set("seed", value)
            elif key in SECTIONS:
                if not isinstance(value, dict):
                    raise RunConfigError(f"config section {key!r} must be an object")
                for sub, v in value.items():
                    cfg.set(f"{key}.{sub}", v)
            else:
                raise RunConfigError(f"unknown config key {key!r}")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise RunConfigError(f"{path}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise RunConfigError(f"{path}: cannot read config ({exc})") from exc
        return cls.from_dict(data)

    def set(self, dotted: str, value) -> None:
        """Set ``section.key`` (or ``seed``), coercing to the field's type."""
        if dotted == "seed":
            self.seed = _coerce("seed", value, int)
            return
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise RunConfigError(f"unknown config key {dotted!r}")
        target = getattr(self, section)
        types = {f.name: f.type for f in fields(target)}
        if key not in types:
            raise RunConfigError(f"unknown config key {dotted!r}")
        if dotted == "injection.layers":
            setattr(target, key, _parse_layers(value))
            return
        kind = {"int": int, "float": float, "str": str, "bool": bool}[str(types[key])]
        setattr(target, key, _coerce(dotted, value, kind))

    def override(self, assignments: Sequence[str]) -> None:
        """Apply ``key=value`` strings; values are read as JSON when possible."""
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep or not key:
                raise RunConfigError(f"override {item!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            self.set(key.strip(), value)

    # -- typed views -------------------------------------------------------

    def task_config(self) -> SyntheticTaskConfig:
        return SyntheticTaskConfig(**asdict(self.task), seed=self.seed)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(**asdict(self.model), vocab_size=vocab_size, seed=self.seed)

    def injection_config(self) -> InjectionConfig:
        inj = self.injection
        layers = None if inj.layers is None else tuple(inj.layers)
        return InjectionConfig(mode=inj.mode, layers=layers, top_n=inj.top_n, sparse_m=inj.sparse_m)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**asdict(self.train), seed=self.seed)

    def validate(self) -> None:
        try:
            self.task_config().validate()
            self.model_config(vocab_size=1).validate()
            self.injection_config().validate(self.model.num_layers)
            self.train_config().validate()
        except (TaskConfigError, ModelConfigError, InjectionConfigError, ValueError) as exc:
            raise RunConfigError(str(exc)) from exc
        if self.retrieval.k1 < 0 or not 0.0 <= self.retrieval.b <= 1.0:
            raise RunConfigError("retrieval.k1 must be >= 0 and retrieval.b in [0, 1]")

    def replace(self, **dotted) -> "RunConfig":
        """Copy with ``section__key=value`` overrides (``seed`` as is)."""
        out = copy.deepcopy(self)
        for key, value in dotted.items():
            out.set(key.replace("__", "."), value)
        return out


def _coerce(name: str, value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise RunConfigError(f"{name} must be true or false, got {value!r}")
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise RunConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RunConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise RunConfigError(f"{name} must be a string, got {value!r}")
    return value


def _parse_layers(value) -> list[int] | None:
    """Accept null/"default", a list of ints, or a comma string like "2,3,4"."""
    if value is None or value == "default":
        return None
    if isinstance(value, int) and not isinstance(value, bool):
        return [value]
    if isinstance(value, str):
        parts = [p for p in value.replace(" ", "").split(",") if p]
        try:
            return [int(p) for p in parts]
        except ValueError:
            raise RunConfigError(f"injection.layers: cannot parse {value!r}") from None
    if isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        return list(value)
    raise RunConfigError(f"injection.layers must be a list of ints, got {value!r}")


# ---------------------------------------------------------------------------
# One run
# ---------------------------------------------------------------------------


@dataclass
class RunOutcome:
    config: RunConfig
    task: SyntheticTask
    vocab: Vocabulary
    index: InvertedIndex
    model: Kformer
    result: TrainResult

    @property
    def dev_accuracy(self) -> float | None:
        return self.result.dev_accuracy


def build_model(cfg: RunConfig, vocab: Vocabulary) -> Kformer:
    return Kformer(cfg.model_config(len(vocab)), cfg.injection_config())


def run(cfg: RunConfig, task: SyntheticTask | None = None) -> RunOutcome:
    """Generate (or reuse) the task, train a fresh model and evaluate on dev."""
    cfg.validate()
    task = task or generate_dataset(cfg.task_config())
    vocab = task.vocabulary()
    index = build_index(task.corpus, cfg.retrieval.k1, cfg.retrieval.b)
    model = build_model(cfg, vocab)
    result = train(model, vocab, task.train, cfg.train_config(), index=index, dev_examples=task.dev)
    return RunOutcome(cfg, task, vocab, index, model, result)


def write_epoch_log(path: str | Path, rows: Sequence[dict], append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def write_csv(path: str | Path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def sweep_topn(
    cfg: RunConfig, ns: Sequence[int], retrain: bool = True, log_path: str | Path | None = None
) -> list[dict]:
    """Dev accuracy per knowledge count ``N``.

    With ``retrain`` every N gets its own training run; otherwise one model is
    trained at ``cfg.injection.top_n`` and re-evaluated with N texts each.
    """
    if not ns:
        raise RunConfigError("sweep_topn needs at least one N")
    for n in ns:
        if n > cfg.injection.sparse_m:
            raise RunConfigError(f"N={n} exceeds sparse_m={cfg.injection.sparse_m}")
    cfg.validate()
    task = generate_dataset(cfg.task_config())
    rows, logs = [], []
    base = None if retrain else run(cfg, task)
    for n in ns:
        if retrain:
            outcome = run(cfg.replace(injection__top_n=n), task)
            acc = outcome.dev_accuracy
            logs.extend({"top_n": n, **h} for h in outcome.result.history)
        else:
            base.model.injection.top_n = n
            acc = evaluate(base.model, base.vocab, task.dev, KnowledgeRetriever(base.index, base.vocab, base.model))
        rows.append({"mode": cfg.injection.mode, "top_n": n, "sparse_m": cfg.injection.sparse_m,
                     "seed": cfg.seed, "retrain": retrain, "dev_accuracy": acc})
        log.info("top_n=%d dev_accuracy=%.4f", n, acc)
    if base is not None:
        base.model.injection.top_n = cfg.injection.top_n
        logs.extend({"top_n": cfg.injection.top_n, **h} for h in base.result.history)
    if log_path is not None:
        write_epoch_log(log_path, logs)
    return rows


def standard_layer_sets(num_layers: int) -> dict[str, tuple[int, ...]]:
    """Top, middle and bottom windows, all layers, and no layers.

    Windows hold three layers when the encoder is deep enough for three
    disjoint windows, otherwise one.
    """
    size = 3 if num_layers >= 9 else 1
    mid = (num_layers - size) // 2 + 1
    return {
        "top": tuple(range(num_layers - size + 1, num_layers + 1)),
        "middle": tuple(range(mid, mid + size)),
        "bottom": tuple(range(1, size + 1)),
        "all": tuple(range(1, num_layers + 1)),
        "none": (),
    }


def sweep_layers(
    cfg: RunConfig, layer_sets: dict[str, Sequence[int]] | None = None, log_path: str | Path | None = None
) -> list[dict]:
    """One training run per injection layer set; the empty set runs mode=none."""
    cfg.validate()
    if cfg.injection.mode not in ("ffn", "attention"):
        raise RunConfigError("sweep_layers needs mode=ffn or mode=attention")
    sets = layer_sets if layer_sets is not None else standard_layer_sets(cfg.model.num_layers)
    task = generate_dataset(cfg.task_config())
    rows, logs = [], []
    for label, layers in sets.items():
        layers = tuple(sorted(set(layers)))
        if layers:
            sub = cfg.replace(injection__layers=list(layers))
        else:
            sub = cfg.replace(injection__mode="none", injection__layers=None)
        outcome = run(sub, task)
        logs.extend({"layer_set": label, **h} for h in outcome.result.history)
        rows.append({"layer_set": label, "layers": " ".join(map(str, layers)) or "-",
                     "mode": sub.injection.mode, "seed": cfg.seed, "dev_accuracy": outcome.dev_accuracy})
        log.info("layers=%s dev_accuracy=%.4f", label, outcome.dev_accuracy)
    if log_path is not None:
        write_epoch_log(log_path, logs)
    return rows


# ---------------------------------------------------------------------------
# Activation dump
# ---------------------------------------------------------------------------


@dataclass
class ActivationMatrix:
    example_id: int
    layer: int
    knowledge: list[str]
    values: np.ndarray  # [seq_len, N]
    knowledge_ids: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "layer": self.layer,
            "knowledge": list(self.knowledge),
            "matrix": self.values.tolist(),
        }


def dump_activations(
    model: Kformer,
    vocab: Vocabulary,
    retriever: KnowledgeRetriever,
    example: MCQExample,
    example_id: int = 0,
    option: int | None = None,
) -> list[ActivationMatrix]:
    """Knowledge-column gelu activations of every injected layer.

    The input is the ``[CLS] question [SEP] option`` sequence for ``option``
    (the gold answer by default); rows are its tokens, columns the retrieved
    texts in rank order.
    """
    if model.injection.mode != "ffn":
        raise UnsupportedModeError(f"activation dump needs mode=ffn, got mode={model.injection.mode}")
    option = example.answer if option is None else option
    if retriever._doc_vectors is None:
        retriever.refresh()
    cands = retriever.retrieve(example.question)
    if not cands:
        raise ValueError(f"example {example_id}: retrieval returned no knowledge")
    k_tokens = [retriever.token_ids(c.text) for c in cands]
    seqs, bag = model.option_sequences(
        vocab.cls_id, vocab.sep_id, vocab.encode(example.question), [vocab.encode(example.options[option])], k_tokens
    )
    acts: dict[int, np.ndarray] = {}
    model.encode(np.array(seqs[0]), embed_knowledge_batch(model.knowledge_embedder, bag), activations=acts)
    texts = [c.text for c in cands]
    ids = [c.doc_id for c in cands]
    return [ActivationMatrix(example_id, layer, texts, acts[layer], ids) for layer in sorted(acts)]


def gold_column_stats(
    model: Kformer, vocab: Vocabulary, index: InvertedIndex, examples: Sequence[MCQExample]
) -> dict:
    """Where the gold fact's column ranks among correctly answered examples.

    Column means are averaged over all injected layers. ``rate`` counts an
    example whose gold fact was not retrieved as a miss; ``rate_retrieved``
    restricts the denominator to examples where it was retrieved.
    """
    retriever = KnowledgeRetriever(index, vocab, model)
    prepared = prepare(examples, vocab, retriever)
    preds = predict(model, vocab, prepared)
    hits = n_correct = n_retrieved = 0
    for i, ex in enumerate(examples):
        if preds[i] != ex.answer:
            continue
        n_correct += 1
        mats = dump_activations(model, vocab, retriever, ex, i)
        ids = mats[0].knowledge_ids
        if ex.gold_fact_id not in ids:
            continue
        n_retrieved += 1
        col = np.mean([m.values.mean(axis=0) for m in mats], axis=0)
        hits += ids[int(np.argmax(col))] == ex.gold_fact_id
    return {
        "rate": hits / n_correct if n_correct else 0.0,
        "rate_retrieved": hits / n_retrieved if n_retrieved else 0.0,
        "n_correct": n_correct,
        "n_retrieved": n_retrieved,
    }


def gold_column_rate(
    model: Kformer, vocab: Vocabulary, index: InvertedIndex, examples: Sequence[MCQExample]
) -> tuple[float, int]:
    """``(rate, n_correct)`` from :func:`gold_column_stats`."""
    stats = gold_column_stats(model, vocab, index, examples)
    return stats["rate"], stats["n_correct"]
