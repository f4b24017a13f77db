"""Pre-norm transformer encoder with a multiple-choice head and knowledge slots."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from kformer import numeric as nm
from kformer.injection import (
    InjectionConfig,
    KnowledgeEmbedder,
    LayerProjection,
    bag_matrix,
    embed_knowledge_batch,
    injected_attention,
    injected_ffn,
    project_knowledge,
)
from kformer.numeric import Parameter, Tensor

INIT_STD = 0.1


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_layers: int = 4
    hidden: int = 64
    intermediate: int = 256
    num_heads: int = 4
    vocab_size: int = 120
    max_seq_len: int = 64
    seed: int = 0

    def validate(self) -> None:
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) <= 0:
                raise ModelConfigError(f"{f.name} must be positive")
        if self.hidden % self.num_heads:
            raise ModelConfigError(f"hidden {self.hidden} not divisible by num_heads {self.num_heads}")
        if self.intermediate < self.hidden:
            raise ModelConfigError("intermediate size must be >= hidden size")


class EncoderLayer:
    def __init__(self, index: int, cfg: ModelConfig, rng: np.random.Generator):
        d, dm = cfg.hidden, cfg.intermediate
        p = f"layers.{index}"
        self.index = index
        self.wq = Parameter(f"{p}.attn.wq", rng.normal(0.0, INIT_STD, (d, d)))
        self.wk = Parameter(f"{p}.attn.wk", rng.normal(0.0, INIT_STD, (d, d)))
        self.wv = Parameter(f"{p}.attn.wv", rng.normal(0.0, INIT_STD, (d, d)))
        self.wo = Parameter(f"{p}.attn.wo", rng.normal(0.0, INIT_STD, (d, d)))
        self.ffn_keys = Parameter(f"{p}.ffn.keys", rng.normal(0.0, INIT_STD, (dm, d)))
        self.ffn_values = Parameter(f"{p}.ffn.values", rng.normal(0.0, INIT_STD, (dm, d)))
        self.ln1_gamma = Parameter(f"{p}.ln1.gamma", np.ones(d))
        self.ln1_beta = Parameter(f"{p}.ln1.beta", np.zeros(d))
        self.ln2_gamma = Parameter(f"{p}.ln2.gamma", np.ones(d))
        self.ln2_beta = Parameter(f"{p}.ln2.beta", np.zeros(d))

    def parameters(self) -> list[Parameter]:
        return [
            self.wq, self.wk, self.wv, self.wo,
            self.ffn_keys, self.ffn_values,
            self.ln1_gamma, self.ln1_beta, self.ln2_gamma, self.ln2_beta,
        ]


def self_attention(H: Tensor, layer: EncoderLayer, num_heads: int, return_weights: bool = False):
    """Scaled dot-product multi-head attention, ``[..., len, d] -> [..., len, d]``.

    The residual connection is added by the caller.
    """
    squeeze = H.ndim == 2
    if squeeze:
        H = nm.reshape(H, (1,) + H.shape)
    B, n, d = H.shape
    dh = d // num_heads

    def heads(x: Tensor) -> Tensor:
        return nm.transpose(nm.reshape(x, (B, n, num_heads, dh)), (0, 2, 1, 3))

    q = heads(nm.matmul(H, layer.wq.value))
    k = heads(nm.matmul(H, layer.wk.value))
    v = heads(nm.matmul(H, layer.wv.value))
    weights = nm.softmax(nm.scale(nm.matmul(q, nm.swap_last(k)), 1.0 / math.sqrt(dh)), axis=-1)
    ctx = nm.reshape(nm.transpose(nm.matmul(weights, v), (0, 2, 1, 3)), (B, n, d))
    out = nm.matmul(ctx, layer.wo.value)
    if squeeze:
        out = nm.reshape(out, (n, d))
    return (out, weights) if return_weights else out


def ffn_forward(H: Tensor, layer: EncoderLayer) -> Tensor:
    """gelu(H K^T) V with no biases."""
    return nm.matmul(nm.gelu(nm.matmul(H, nm.swap_last(layer.ffn_keys.value))), layer.ffn_values.value)


class SequenceError(ValueError):
    pass


def build_option_sequence(
    vocab_cls: int,
    vocab_sep: int,
    question: Sequence[int],
    option: Sequence[int],
    max_seq_len: int,
    knowledge: Sequence[int] = (),
) -> list[int]:
    """``[CLS] Q [SEP] A`` or, with knowledge tokens, ``[CLS] K [SEP] Q [SEP] A``.

    Over-long inputs lose knowledge tokens first (from the end, so the
    top-ranked text survives), then the tail of the question. The option is
    never truncated.
    """
    option, question, knowledge = list(option), list(question), list(knowledge)
    room = max_seq_len - 2 - len(option)
    if room < 0:
        raise SequenceError(f"option of {len(option)} tokens cannot fit in {max_seq_len}")
    if knowledge:
        room -= 1
    if len(knowledge) + len(question) > room:
        knowledge = knowledge[: max(0, room - len(question))]
        if not knowledge:
            room = max_seq_len - 2 - len(option)
        question = question[: room - len(knowledge)]
    if knowledge:
        return [vocab_cls, *knowledge, vocab_sep, *question, vocab_sep, *option]
    return [vocab_cls, *question, vocab_sep, *option]


class Kformer:
    """Encoder + MCQ head, plus knowledge embedder and per-layer projections.

    Encoder weights come from one RNG stream and injection weights from a
    second, so the encoder is identical whatever the injection setup.
    """

    def __init__(self, cfg: ModelConfig, injection: InjectionConfig | None = None):
        cfg.validate()
        self.cfg = cfg
        self.injection = injection or InjectionConfig(mode="none")
        self.injection.validate(cfg.num_layers)
        enc_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        d = cfg.hidden
        self.token_embedding = Parameter("embed.tokens", enc_rng.normal(0.0, INIT_STD, (cfg.vocab_size, d)))
        self.position_embedding = Parameter(
            "embed.positions", enc_rng.normal(0.0, INIT_STD, (cfg.max_seq_len, d))
        )
        self.layers = [EncoderLayer(i, cfg, enc_rng) for i in range(1, cfg.num_layers + 1)]
        self.final_gamma = Parameter("final_ln.gamma", np.ones(d))
        self.final_beta = Parameter("final_ln.beta", np.zeros(d))
        self.head = Parameter("head.weight", enc_rng.normal(0.0, INIT_STD, (d, 1)))

        self.injected_layers = self.injection.resolved_layers(cfg.num_layers)
        self.knowledge_embedder: KnowledgeEmbedder | None = None
        self.projections: dict[int, LayerProjection] = {}
        if self.injection.mode != "none":
            self.knowledge_embedder = KnowledgeEmbedder.from_token_embedding(
                self.token_embedding.value.data, cfg.max_seq_len
            )
        inj_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        for layer in self.injected_layers:
            self.projections[layer] = LayerProjection(
                layer,
                Parameter(f"layers.{layer}.inject.w_k", inj_rng.normal(0.0, INIT_STD, (d, d))),
                Parameter(f"layers.{layer}.inject.w_v", inj_rng.normal(0.0, INIT_STD, (d, d))),
            )

    # -- parameters --------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params = [self.token_embedding, self.position_embedding]
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend([self.final_gamma, self.final_beta, self.head])
        if self.knowledge_embedder is not None:
            params.append(self.knowledge_embedder.table)
        for layer in sorted(self.projections):
            params.extend([self.projections[layer].w_k, self.projections[layer].w_v])
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    # -- forward -----------------------------------------------------------

    def embed_tokens(self, token_ids) -> Tensor:
        """Token plus learned position embedding; ``[len]`` or ``[B, len]`` ids."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim == 0 or ids.shape[-1] == 0:
            raise SequenceError("a token sequence needs at least one token")
        n = ids.shape[-1]
        if n > self.cfg.max_seq_len:
            raise SequenceError(f"sequence length {n} exceeds max_seq_len {self.cfg.max_seq_len}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise SequenceError(f"token id out of range [0, {self.cfg.vocab_size})")
        tok = nm.take_rows(self.token_embedding.value, ids)
        pos = nm.take_rows(self.position_embedding.value, np.arange(n))
        return nm.add(tok, pos)

    def encode(self, token_ids, knowledge: Tensor | None = None, activations: dict | None = None) -> Tensor:
        """Run all layers; ``knowledge`` is ``[N, d]`` or ``[B, N, d]`` embedded knowledge.

        When ``activations`` is a dict, the FFN gelu outputs on knowledge
        columns at each injected layer are stored in it, keyed by layer.
        """
        x = self.embed_tokens(token_ids)
        inject = knowledge is not None and knowledge.shape[-2] > 0 and self.injection.mode in ("ffn", "attention")
        heads = self.cfg.num_heads
        for layer in self.layers:
            h = nm.layer_norm(x, layer.ln1_gamma.value, layer.ln1_beta.value)
            here = inject and layer.index in self.projections
            if here:
                phi_k, phi_v = project_knowledge(knowledge, self.projections, layer.index)
            if here and self.injection.mode == "attention":
                x = nm.add(x, injected_attention(h, layer, phi_k, phi_v, heads))
            else:
                x = nm.add(x, self_attention(h, layer, heads))
            h = nm.layer_norm(x, layer.ln2_gamma.value, layer.ln2_beta.value)
            if here and self.injection.mode == "ffn":
                out, act = injected_ffn(h, layer, phi_k, phi_v, return_activation=True)
                if activations is not None:
                    activations[layer.index] = act.data[..., self.cfg.intermediate :].copy()
                x = nm.add(x, out)
            else:
                x = nm.add(x, ffn_forward(h, layer))
        return nm.layer_norm(x, self.final_gamma.value, self.final_beta.value)

    def knowledge_bags(self, knowledge_tokens: Sequence[Sequence[int]]) -> np.ndarray:
        return bag_matrix(knowledge_tokens, self.cfg.vocab_size, self.cfg.max_seq_len)

    def sequence_logits(self, sequences: Sequence[Sequence[int]], bags: Sequence[np.ndarray | None]) -> Tensor:
        """One logit per sequence; ``bags[i]`` is the ``[N_i, vocab]`` knowledge bag or None.

        Sequences sharing a length and knowledge count are encoded as one batch.
        """
        groups: dict[tuple[int, int], list[int]] = {}
        for i, (seq, bag) in enumerate(zip(sequences, bags)):
            n_k = 0 if bag is None else bag.shape[0]
            groups.setdefault((len(seq), n_k), []).append(i)
        parts, order = [], []
        for (_, n_k), idx in sorted(groups.items()):
            ids = np.array([sequences[i] for i in idx], dtype=np.int64)
            knowledge = None
            if n_k and self.knowledge_embedder is not None:
                knowledge = embed_knowledge_batch(self.knowledge_embedder, np.stack([bags[i] for i in idx]))
            h = self.encode(ids, knowledge)
            cls = nm.getitem(h, (slice(None), 0))
            parts.append(nm.reshape(nm.matmul(cls, self.head.value), (len(idx),)))
            order.extend(idx)
        logits = parts[0] if len(parts) == 1 else nm.concat(parts, axis=0)
        if order != sorted(order):
            logits = nm.getitem(logits, np.argsort(order))
        return logits

    def option_sequences(
        self,
        cls_id: int,
        sep_id: int,
        question: Sequence[int],
        options: Sequence[Sequence[int]],
        knowledge_tokens: Sequence[Sequence[int]] = (),
    ) -> tuple[list[list[int]], np.ndarray | None]:
        """Input sequences for every option plus the shared knowledge bag (if any)."""
        mode = self.injection.mode
        if mode == "concat":
            joined = [t for text in knowledge_tokens for t in text]
            seqs = [
                build_option_sequence(cls_id, sep_id, question, opt, self.cfg.max_seq_len, joined)
                for opt in options
            ]
            return seqs, None
        seqs = [build_option_sequence(cls_id, sep_id, question, opt, self.cfg.max_seq_len) for opt in options]
        if mode in ("ffn", "attention") and knowledge_tokens:
            return seqs, self.knowledge_bags(knowledge_tokens)
        return seqs, None

    def mcq_score(
        self,
        cls_id: int,
        sep_id: int,
        question: Sequence[int],
        options: Sequence[Sequence[int]],
        knowledge_tokens: Sequence[Sequence[int]] = (),
    ) -> np.ndarray:
        """Probability of each option."""
        if len(options) < 2:
            raise SequenceError("need at least two options")
        seqs, bag = self.option_sequences(cls_id, sep_id, question, options, knowledge_tokens)
        logits = self.sequence_logits(seqs, [bag] * len(seqs))
        return nm.softmax(logits).data.copy()

    def config_dict(self) -> dict:
        out = {f"model.{k}": v for k, v in asdict(self.cfg).items()}
        inj = self.injection
        out["injection.mode"] = inj.mode
        out["injection.layers"] = ",".join(str(x) for x in self.injected_layers) or "-"
        out["injection.top_n"] = inj.top_n
        out["injection.sparse_m"] = inj.sparse_m
        return out
