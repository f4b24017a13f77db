"""Knowledge injection into the feed-forward and attention sublayers.

A knowledge text becomes one vector: the mean of its token embeddings taken
from a dedicated embedding table (initialized as a copy of the encoder's input
embeddings, then trained separately). Each injected layer owns two bias-free
``d x d`` maps producing knowledge keys ``phi_k = k W_k^T`` and values
``phi_v = k W_v^T``.

In the FFN, those rows are appended after the layer's own memory slots::

    FFN_E(H) = gelu(H [K; phi_k]^T) [V; phi_v]

so every knowledge row acts as one extra key/value memory. The attention
variant instead appends them to the per-head keys and values of self-attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from kformer import numeric as nm
from kformer.numeric import Parameter, Tensor

MODES = ("none", "ffn", "attention", "concat")


class InjectionConfigError(ValueError):
    pass


@dataclass
class InjectionConfig:
    mode: str = "ffn"
    layers: tuple[int, ...] | None = None  # 1-based; None -> top three layers
    top_n: int = 3
    sparse_m: int = 100

    def resolved_layers(self, num_layers: int) -> tuple[int, ...]:
        if self.mode in ("none", "concat"):
            return ()
        if self.layers is None:
            return tuple(range(max(1, num_layers - 2), num_layers + 1))
        return tuple(sorted(set(self.layers)))

    def validate(self, num_layers: int) -> None:
        if self.mode not in MODES:
            raise InjectionConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.top_n < 0 or self.sparse_m < 1:
            raise InjectionConfigError("top_n must be >= 0 and sparse_m >= 1")
        if self.top_n > self.sparse_m:
            raise InjectionConfigError(f"top_n ({self.top_n}) exceeds sparse_m ({self.sparse_m})")
        if self.mode == "concat" and self.layers:
            raise InjectionConfigError("mode=concat takes no injection layers")
        for layer in self.layers or ():
            if not 1 <= layer <= num_layers:
                raise InjectionConfigError(f"injection layer {layer} outside [1, {num_layers}]")

    @property
    def uses_retrieval(self) -> bool:
        return self.mode != "none" and self.top_n > 0


@dataclass
class LayerProjection:
    layer: int
    w_k: Parameter
    w_v: Parameter


@dataclass
class KnowledgeEmbedder:
    """Embedding table used only for knowledge texts (and dense retrieval)."""

    table: Parameter
    max_len: int = 64

    @classmethod
    def from_token_embedding(cls, token_embedding: np.ndarray, max_len: int = 64) -> "KnowledgeEmbedder":
        # separate storage; starts equal to the encoder table
        return cls(Parameter("knowledge.embedding", np.array(token_embedding, copy=True)), max_len)

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    def vector(self, token_ids: Sequence[int]) -> np.ndarray:
        """Untaped mean embedding, for retrieval scoring."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("knowledge text has no tokens")
        return self.table.value.data[ids].mean(axis=0)


def embed_knowledge(embedder: KnowledgeEmbedder, token_ids: Sequence[int]) -> Tensor:
    """Mean of the knowledge-embedding rows of ``token_ids``; no position term."""
    if len(token_ids) == 0:
        raise ValueError("cannot embed an empty knowledge text")
    if len(token_ids) > embedder.max_len:
        raise ValueError(f"knowledge text of {len(token_ids)} tokens exceeds max {embedder.max_len}")
    return nm.mean(nm.take_rows(embedder.table.value, list(token_ids)), axis=0)


def bag_matrix(token_lists: Iterable[Sequence[int]], vocab_size: int, max_len: int = 64) -> np.ndarray:
    """Row i holds token counts of text i divided by its length.

    ``bag @ table`` is then the stacked mean embeddings, which lets a whole
    batch of knowledge texts be embedded with one matmul.
    """
    token_lists = list(token_lists)
    out = np.zeros((len(token_lists), vocab_size))
    for i, ids in enumerate(token_lists):
        if len(ids) == 0:
            raise ValueError("cannot embed an empty knowledge text")
        ids = list(ids)[:max_len]
        np.add.at(out[i], ids, 1.0 / len(ids))
    return out


def embed_knowledge_batch(embedder: KnowledgeEmbedder, bags: np.ndarray) -> Tensor:
    """``bags`` is ``[..., N, vocab]`` from :func:`bag_matrix`; returns ``[..., N, d]``."""
    return nm.matmul(Tensor(bags), embedder.table.value)


def project_knowledge(
    k: Tensor, projections: dict[int, LayerProjection], layer: int
) -> tuple[Tensor, Tensor]:
    proj = projections.get(layer)
    if proj is None:
        raise InjectionConfigError(f"no knowledge projection for layer {layer}")
    return nm.matmul(k, proj.w_k.value.T), nm.matmul(k, proj.w_v.value.T)


def injected_ffn(H: Tensor, layer, phi_k: Tensor, phi_v: Tensor, return_activation: bool = False):
    """FFN with knowledge rows appended after the layer's ``d_m`` memory slots.

    Computes ``gelu(H [K; phi_k]^T) [V; phi_v]``; the expanded matrices are
    never materialized per batch, the products are taken block by block.

    ``H`` is ``[len, d]`` or ``[B, len, d]``; ``phi_k``/``phi_v`` are ``[N, d]``
    or ``[B, N, d]`` to match. With ``return_activation`` the gelu output
    ``[..., len, d_m + N]`` is returned too.
    """
    # H K_E^T and act V_E evaluated blockwise: memory slots first, knowledge after
    scores = nm.concat(
        [nm.matmul(H, nm.swap_last(layer.ffn_keys.value)), nm.matmul(H, nm.swap_last(phi_k))], axis=-1
    )
    act = nm.gelu(scores)
    dm = layer.ffn_keys.shape[0]
    memory = nm.matmul(nm.getitem(act, (Ellipsis, slice(None, dm))), layer.ffn_values.value)
    knowledge = nm.matmul(nm.getitem(act, (Ellipsis, slice(dm, None))), phi_v)
    out = nm.add(memory, knowledge)
    return (out, act) if return_activation else out


def injected_attention(
    H: Tensor, layer, phi_k: Tensor, phi_v: Tensor, num_heads: int, return_weights: bool = False
):
    """Self-attention whose per-head keys/values are ``[phi_k; H W_k]`` / ``[phi_v; H W_v]``.

    Knowledge rows carry no position term and are sliced into heads exactly
    like token keys. Scores are scaled by ``1/sqrt(d/h)``, the per-head width.
    """
    squeeze = H.ndim == 2
    if squeeze:
        H = nm.reshape(H, (1,) + H.shape)
        phi_k = nm.reshape(phi_k, (1,) + phi_k.shape)
        phi_v = nm.reshape(phi_v, (1,) + phi_v.shape)
    B, n, d = H.shape
    dh = d // num_heads

    def heads(x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return nm.transpose(nm.reshape(x, (b, t, num_heads, dh)), (0, 2, 1, 3))

    q = heads(nm.matmul(H, layer.wq.value))
    k = nm.concat([heads(phi_k), heads(nm.matmul(H, layer.wk.value))], axis=-2)
    v = nm.concat([heads(phi_v), heads(nm.matmul(H, layer.wv.value))], axis=-2)
    scores = nm.scale(nm.matmul(q, nm.swap_last(k)), 1.0 / math.sqrt(dh))
    weights = nm.softmax(scores, axis=-1)
    ctx = nm.reshape(nm.transpose(nm.matmul(weights, v), (0, 2, 1, 3)), (B, n, d))
    out = nm.matmul(ctx, layer.wo.value)
    if squeeze:
        out = nm.reshape(out, (n, d))
    return (out, weights) if return_weights else out
