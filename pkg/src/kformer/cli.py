"""Command-line entry point: ``kformer <command> [flags] [key=value ...]``.

Errors print one line ``E_<KIND>: message`` on stderr and exit with
2 (config), 3 (data) or 4 (numeric failure).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from kformer.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from kformer.encoder import ModelConfigError, SequenceError
from kformer.harness import experiment as ex
from kformer.harness.task import TaskConfigError, generate_dataset, write_examples
from kformer.harness.training import KnowledgeRetriever, TrainingDiverged, evaluate
from kformer.injection import InjectionConfigError
from kformer.numeric import NumericError
from kformer.retrieval import CorpusError, Corpus, InvertedIndex, build_index, retrieve

log = logging.getLogger("kformer")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def valid_keys() -> list[str]:
    keys = ["seed"]
    for name, section in ex.SECTIONS.items():
        keys.extend(f"{name}.{f.name}" for f in fields(section))
    return keys


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> ex.RunConfig:
    cfg = ex.RunConfig.load(args.config) if args.config else ex.RunConfig()
    flag_overrides = {
        "seed": args.seed,
        "injection.mode": args.mode,
        "injection.layers": args.layers,
        "injection.top_n": args.topn,
        "injection.sparse_m": args.sparse_m,
    }
    for key, value in flag_overrides.items():
        if value is not None:
            cfg.set(key, value)
    try:
        cfg.override(args.overrides)
    except ex.RunConfigError as exc:
        raise ex.RunConfigError(f"{exc}; valid keys: {', '.join(valid_keys())}") from None
    cfg.validate()
    return cfg


def echo_config(cfg: ex.RunConfig) -> None:
    print("config " + json.dumps(cfg.to_dict(), sort_keys=True), flush=True)


def run_name(cfg: ex.RunConfig) -> str:
    inj = cfg.injection
    layers = "default" if inj.layers is None else ("-".join(map(str, inj.layers)) or "none")
    return f"{inj.mode}_layers{layers}_n{inj.top_n}_seed{cfg.seed}"


def out_dir(args: argparse.Namespace) -> Path:
    path = Path(args.out or "runs")
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_build_index(args) -> int:
    try:
        corpus = Corpus.from_jsonl(args.corpus)
    except OSError as exc:
        raise CliError(EXIT_DATA, "DATA", f"cannot read corpus: {exc}") from exc
    index = build_index(corpus, args.k1, args.b)
    index.save(args.index)
    print(f"{index.n_docs} documents, {len(index.postings)} terms -> {args.index}")
    return 0


def cmd_retrieve(args) -> int:
    if not Path(args.index).is_file():
        raise CliError(EXIT_DATA, "DATA", f"index not found: {args.index}")
    index = InvertedIndex.load(args.index)
    m = args.sparse_m if args.sparse_m is not None else ex.InjectionSection.sparse_m
    n = args.topn if args.topn is not None else ex.InjectionSection.top_n
    if m < 1 or n < 0:
        raise CliError(EXIT_CONFIG, "CONFIG", "--sparse-m must be >= 1 and --topn >= 0")
    if n > m:
        print(f"warning: N={n} exceeds M={m}; clamped to {m}", file=sys.stderr)
        n = m
    q_embed = k_embed = None
    if args.checkpoint:
        model, vocab, _ = load_checkpoint(args.checkpoint)
        if vocab is None or model.knowledge_embedder is None:
            print("warning: checkpoint has no knowledge embedder; sparse scores only", file=sys.stderr)
        else:
            retriever = KnowledgeRetriever(index, vocab, model)
            q_embed, k_embed = retriever.query_embedding, retriever.knowledge_embedding
    cands = retrieve(index, args.query, m, n, q_embed, k_embed)
    print(json.dumps([c.to_dict() for c in cands]))
    return 0


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg)
    task = generate_dataset(cfg.task_config())
    out = out_dir(args)
    write_examples(out / "train.jsonl", task.train)
    write_examples(out / "dev.jsonl", task.dev)
    task.corpus.to_jsonl(out / "corpus.jsonl")
    print(f"{len(task.train)} train, {len(task.dev)} dev, {len(task.corpus)} facts -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg)
    outcome = ex.run(cfg)
    run_dir = out_dir(args) / run_name(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    save_checkpoint(run_dir / "model.ckpt", outcome.model, outcome.vocab, {"run.seed": cfg.seed})
    ex.write_epoch_log(run_dir / "metrics.jsonl", outcome.result.history)
    summary = {"run": run_name(cfg), "dev_accuracy": outcome.dev_accuracy}
    (run_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    print(json.dumps({**summary, "dir": str(run_dir)}))
    return 0


def _load_model(args, cfg: ex.RunConfig):
    if not args.checkpoint:
        raise CliError(EXIT_CONFIG, "CONFIG", "--checkpoint is required")
    if not Path(args.checkpoint).is_file():
        raise CliError(EXIT_DATA, "DATA", f"checkpoint not found: {args.checkpoint}")
    model, vocab, _ = load_checkpoint(args.checkpoint)
    if args.topn is not None:
        model.injection.top_n = cfg.injection.top_n
    if args.sparse_m is not None:
        model.injection.sparse_m = cfg.injection.sparse_m
    model.injection.validate(model.cfg.num_layers)
    task = generate_dataset(cfg.task_config())
    if vocab is None or vocab.itos != task.vocabulary().itos:
        raise CliError(EXIT_DATA, "DATA", "checkpoint vocabulary does not match the configured task")
    index = build_index(task.corpus, cfg.retrieval.k1, cfg.retrieval.b)
    return model, vocab, task, index


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg)
    model, vocab, task, index = _load_model(args, cfg)
    examples = task.dev if args.split == "dev" else task.train
    acc = evaluate(model, vocab, examples, KnowledgeRetriever(index, vocab, model))
    print(json.dumps({"split": args.split, "n": len(examples), "accuracy": acc}))
    return 0


def cmd_sweep_layers(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg)
    out = out_dir(args)
    rows = ex.sweep_layers(cfg, log_path=out / "sweep_layers.jsonl")
    ex.write_csv(out / "sweep_layers.csv", rows)
    print(f"{len(rows)} rows -> {out / 'sweep_layers.csv'}")
    return 0


def cmd_sweep_topn(args) -> int:
    cfg = resolve_config(args)
    try:
        ns = [int(x) for x in args.ns.split(",") if x]
    except ValueError:
        raise CliError(EXIT_CONFIG, "CONFIG", f"--ns must be comma-separated integers, got {args.ns!r}") from None
    echo_config(cfg)
    out = out_dir(args)
    rows = ex.sweep_topn(cfg, ns, retrain=not args.no_retrain, log_path=out / "sweep_topn.jsonl")
    ex.write_csv(out / "sweep_topn.csv", rows)
    print(f"{len(rows)} rows -> {out / 'sweep_topn.csv'}")
    return 0


def cmd_dump_activations(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg)
    model, vocab, task, index = _load_model(args, cfg)
    examples = task.dev if args.split == "dev" else task.train
    if not 0 <= args.example < len(examples):
        raise CliError(EXIT_CONFIG, "CONFIG", f"--example must be in [0, {len(examples)})")
    retriever = KnowledgeRetriever(index, vocab, model)
    mats = ex.dump_activations(model, vocab, retriever, examples[args.example], args.example)
    out = out_dir(args)
    for m in mats:
        path = out / f"activations_{args.split}{args.example}_layer{m.layer}.json"
        path.write_text(json.dumps(m.to_dict()) + "\n")
        print(f"layer {m.layer}: {m.values.shape[0]}x{m.values.shape[1]} -> {path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["none", "ffn", "attention", "concat"])
    p.add_argument("--layers", help="comma-separated 1-based injection layers, e.g. 2,3,4")
    p.add_argument("--topn", type=int)
    p.add_argument("--sparse-m", type=int, dest="sparse_m")
    p.add_argument("--out", help="output directory (default: runs)")
    p.add_argument("overrides", nargs="*", metavar="key=value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kformer", description="Knowledge injection into transformer FFNs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", help="build a BM25 index from a JSONL corpus")
    p.add_argument("corpus")
    p.add_argument("index")
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("retrieve", help="rank knowledge for a query")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--topn", type=int)
    p.add_argument("--sparse-m", type=int, dest="sparse_m")
    p.set_defaults(func=cmd_retrieve)

    for name, func, text in [
        ("generate", cmd_generate, "write the synthetic task to JSONL"),
        ("train", cmd_train, "train one model and save a checkpoint"),
        ("eval", cmd_eval, "evaluate a checkpoint on the configured task"),
        ("sweep-layers", cmd_sweep_layers, "train once per injection layer set"),
        ("sweep-topn", cmd_sweep_topn, "dev accuracy per knowledge count N"),
        ("dump-activations", cmd_dump_activations, "knowledge-column FFN activations"),
    ]:
        p = sub.add_parser(name, help=text)
        _run_flags(p)
        if name in ("eval", "dump-activations"):
            p.add_argument("--checkpoint")
            p.add_argument("--split", choices=["dev", "train"], default="dev")
        if name == "dump-activations":
            p.add_argument("--example", type=int, default=0)
        if name == "sweep-topn":
            p.add_argument("--ns", default="1,5,10,15,20,25")
            p.add_argument("--no-retrain", action="store_true", help="train once, re-evaluate per N")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        kind, code, msg = exc.kind, exc.code, str(exc)
    except (ex.RunConfigError, InjectionConfigError, ModelConfigError, TaskConfigError, ex.UnsupportedModeError) as exc:
        kind, code, msg = "CONFIG", EXIT_CONFIG, str(exc)
    except (TrainingDiverged, NumericError) as exc:
        kind, code, msg = "NUMERIC", EXIT_NUMERIC, str(exc)
    except (CorpusError, CheckpointError, SequenceError, OSError, ValueError) as exc:
        kind, code, msg = "DATA", EXIT_DATA, str(exc)
    print(f"E_{kind}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
