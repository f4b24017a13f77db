"""Synthetic knowledge-dependent multiple-choice task.

Every entity is a ``first middle last`` name triple and has one value per attribute,
drawn uniformly at random. The corpus holds one fact sentence per
(entity, attribute). Questions ask for an attribute of an entity; options are
the true value plus distinct distractors from the same attribute's value set.
Dev questions only concern entities that never appear in training questions,
so a model can only beat chance on dev by reading the retrieved facts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kformer.retrieval import Corpus, build_index, sparse_retrieve
from kformer.text import Vocabulary, tokenize

FIRST_NAMES = (
    "alba bruno cleo dario elsa fabio gina hugo ines jonas kira luca mara nico olga pablo rosa sven tara ugo "
    "vera walter xenia yann zora anton bianca cyril dora emil"
).split()
MIDDLE_NAMES = "ash bo cal dex eve fay gil hal ivo jay kai lev max ned oz pia rey sol tom val wes xan yul zed abe".split()
LAST_NAMES = (
    "abbott baker carver dalton ellis foster garner hayes irwin jarvis keller lowell mercer nolan orton "
    "porter quinn ramsey sutton tucker vance walsh yates zeller archer bishop crane draper fenton grady"
).split()
ATTRIBUTES: dict[str, tuple[str, ...]] = {
    "color": tuple("red blue green yellow purple orange black white pink brown gray silver".split()),
    "city": tuple("paris london tokyo cairo lima oslo rome berlin delhi sydney toronto madrid".split()),
    "pet": tuple("cat dog horse rabbit parrot turtle hamster goat snake lizard ferret owl".split()),
    "sport": tuple("tennis rugby golf hockey boxing rowing skiing fencing karate cricket polo surfing".split()),
    "food": tuple("pasta sushi curry tacos salad ramen pizza soup bread cheese rice noodles".split()),
    "job": tuple("doctor pilot farmer lawyer clerk chef nurse judge miner sailor tailor writer".split()),
}
N_NAMES = len(FIRST_NAMES) * len(MIDDLE_NAMES) * len(LAST_NAMES)


class TaskConfigError(ValueError):
    pass


@dataclass
class SyntheticTaskConfig:
    n_entities: int = 10000
    n_attributes: int = 1
    n_options: int = 3
    dev_fraction: float = 0.15
    distractors: str = "uniform"  # "uniform" | "nearby" (values adjacent in the value list)
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.n_attributes <= len(ATTRIBUTES):
            raise TaskConfigError(f"n_attributes must be in [1, {len(ATTRIBUTES)}]")
        n_values = min(len(v) for v in list(ATTRIBUTES.values())[: self.n_attributes])
        if not 2 <= self.n_options <= n_values:
            raise TaskConfigError(f"n_options must be in [2, {n_values}] (attribute values available)")
        if not 2 <= self.n_entities <= N_NAMES:
            raise TaskConfigError(f"n_entities must be in [2, {N_NAMES}]")
        if not 0.0 < self.dev_fraction < 1.0:
            raise TaskConfigError("dev_fraction must be in (0, 1)")
        if self.distractors not in ("uniform", "nearby"):
            raise TaskConfigError("distractors must be 'uniform' or 'nearby'")


@dataclass(frozen=True)
class MCQExample:
    question: str
    options: tuple[str, ...]
    answer: int
    gold_fact_id: int

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "options": list(self.options),
            "answer": self.answer,
            "gold_fact_id": self.gold_fact_id,
        }


@dataclass
class SyntheticTask:
    train: list[MCQExample]
    dev: list[MCQExample]
    corpus: Corpus
    train_entities: list[str]
    dev_entities: list[str]

    def vocabulary(self) -> Vocabulary:
        texts = list(self.corpus.texts)
        for ex in self.train + self.dev:
            texts.append(ex.question)
            texts.extend(ex.options)
        return Vocabulary.from_texts(texts)


def fact_text(entity: str, attribute: str, value: str) -> str:
    return f"{entity} has {attribute} {value}"


def question_text(entity: str, attribute: str) -> str:
    return f"{entity} {attribute} ?"


def generate_dataset(cfg: SyntheticTaskConfig) -> SyntheticTask:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    pairs = [f"{f} {m} {l}" for f in FIRST_NAMES for m in MIDDLE_NAMES for l in LAST_NAMES]
    chosen = rng.choice(len(pairs), size=cfg.n_entities, replace=False)
    entities = [pairs[i] for i in chosen]
    attributes = list(ATTRIBUTES)[: cfg.n_attributes]

    facts: list[str] = []
    fact_id: dict[tuple[str, str], int] = {}
    truth: dict[tuple[str, str], int] = {}
    for entity in entities:
        for attr in attributes:
            v = int(rng.integers(len(ATTRIBUTES[attr])))
            truth[entity, attr] = v
            fact_id[entity, attr] = len(facts)
            facts.append(fact_text(entity, attr, ATTRIBUTES[attr][v]))

    n_dev = max(1, int(round(cfg.dev_fraction * cfg.n_entities)))
    order = rng.permutation(cfg.n_entities)
    dev_entities = [entities[i] for i in order[:n_dev]]
    train_entities = [entities[i] for i in order[n_dev:]]

    def questions(group: list[str]) -> list[MCQExample]:
        out = []
        for entity in group:
            for attr in attributes:
                values = ATTRIBUTES[attr]
                v = truth[entity, attr]
                if cfg.distractors == "nearby":
                    pool = [(v + k) % len(values) for k in range(1, len(values))]
                    others = pool[: cfg.n_options - 1]
                else:
                    pool = [i for i in range(len(values)) if i != v]
                    others = [int(i) for i in rng.choice(pool, size=cfg.n_options - 1, replace=False)]
                slot = int(rng.integers(cfg.n_options))
                picks = others[:slot] + [v] + others[slot:]
                out.append(
                    MCQExample(
                        question_text(entity, attr),
                        tuple(values[i] for i in picks),
                        slot,
                        fact_id[entity, attr],
                    )
                )
        return out

    return SyntheticTask(questions(train_entities), questions(dev_entities), Corpus(facts), train_entities, dev_entities)


def check_gold_retrievable(task: SyntheticTask, k: int = 5) -> float:
    """Fraction of dev questions whose gold fact is in the BM25 top-``k``."""
    index = build_index(task.corpus)
    hits = 0
    for ex in task.dev:
        top = sparse_retrieve(index, tokenize(ex.question), k)
        hits += any(c.doc_id == ex.gold_fact_id for c in top)
    return hits / len(task.dev)


def write_examples(path: str | Path, examples: list[MCQExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict()) + "\n")


def read_examples(path: str | Path) -> list[MCQExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ex = MCQExample(str(obj["question"]), tuple(obj["options"]), int(obj["answer"]), int(obj["gold_fact_id"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed example ({exc})") from exc
            if not 0 <= ex.answer < len(ex.options) or len(set(ex.options)) != len(ex.options):
                raise ValueError(f"{path}:{lineno}: answer index out of range or duplicate options")
            out.append(ex)
    return out
