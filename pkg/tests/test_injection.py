import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kformer import numeric as nm
from kformer.encoder import Kformer, ModelConfig, ffn_forward, self_attention
from kformer.injection import (
    InjectionConfig,
    InjectionConfigError,
    KnowledgeEmbedder,
    bag_matrix,
    embed_knowledge,
    embed_knowledge_batch,
    injected_attention,
    injected_ffn,
    project_knowledge,
)
from kformer.numeric import ComputationRecord, Tensor


def small_model(mode="ffn", layers=None, **kw):
    cfg = ModelConfig(num_layers=3, hidden=8, intermediate=16, num_heads=2, vocab_size=20, max_seq_len=16, **kw)
    return Kformer(cfg, InjectionConfig(mode=mode, layers=layers, top_n=3, sparse_m=10))


def gelu_np(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 5))
def test_zero_projections_leave_ffn_unchanged(seed, n_tok, n_k):
    model = small_model(seed=seed % 7)
    layer = model.layers[-1]
    rng = np.random.default_rng(seed)
    H = Tensor(rng.normal(size=(n_tok, 8)))
    zeros = Tensor(np.zeros((n_k, 8)))
    diff = injected_ffn(H, layer, zeros, zeros).data - ffn_forward(H, layer).data
    assert np.abs(diff).max() < 1e-12


@pytest.mark.parametrize("n_k", [1, 5, 20])
def test_injection_adds_slot_sum(n_k):
    model = small_model()
    layer = model.layers[1]
    rng = np.random.default_rng(n_k)
    H = rng.normal(size=(4, 8))
    phi_k, phi_v = rng.normal(size=(n_k, 8)), rng.normal(size=(n_k, 8))
    delta = injected_ffn(Tensor(H), layer, Tensor(phi_k), Tensor(phi_v)).data - ffn_forward(Tensor(H), layer).data
    expect = sum(gelu_np(H @ phi_k[i])[:, None] * phi_v[i][None, :] for i in range(n_k))
    assert np.abs(delta - expect).max() < 1e-9


def test_ffn_equals_memory_slot_sum():
    model = small_model()
    layer = model.layers[0]
    H = np.random.default_rng(0).normal(size=(3, 8))
    K, V = layer.ffn_keys.value.data, layer.ffn_values.value.data
    expect = sum(gelu_np(H @ K[i])[:, None] * V[i][None, :] for i in range(K.shape[0]))
    np.testing.assert_allclose(ffn_forward(Tensor(H), layer).data, expect, atol=1e-12)


def test_injected_ffn_batched_matches_per_example():
    model = small_model()
    layer = model.layers[0]
    rng = np.random.default_rng(1)
    H, pk, pv = rng.normal(size=(2, 4, 8)), rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 3, 8))
    out, act = injected_ffn(Tensor(H), layer, Tensor(pk), Tensor(pv), return_activation=True)
    assert act.shape == (2, 4, 16 + 3)
    for b in range(2):
        single = injected_ffn(Tensor(H[b]), layer, Tensor(pk[b]), Tensor(pv[b])).data
        np.testing.assert_allclose(out.data[b], single, atol=1e-12)


def test_attention_injection_softmax_spans_tokens_and_knowledge():
    model = small_model(mode="attention")
    layer = model.layers[0]
    H = Tensor(np.random.default_rng(2).normal(size=(5, 8)))
    zeros = Tensor(np.zeros((2, 8)))
    out, w = injected_attention(H, layer, zeros, zeros, 2, return_weights=True)
    assert out.shape == (5, 8)
    assert w.shape == (1, 2, 5, 7)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_injection_hand_rolled_single_head():
    model = small_model(mode="attention")
    layer = model.layers[0]
    rng = np.random.default_rng(3)
    H, pk, pv = rng.normal(size=(3, 8)), rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    q = H @ layer.wq.value.data
    k = np.vstack([pk, H @ layer.wk.value.data])
    v = np.vstack([pv, H @ layer.wv.value.data])
    heads = []
    for h in range(2):
        s = slice(4 * h, 4 * h + 4)
        sc = q[:, s] @ k[:, s].T / 2.0
        w = np.exp(sc - sc.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        heads.append(w @ v[:, s])
    expect = np.hstack(heads) @ layer.wo.value.data
    got = injected_attention(Tensor(H), layer, Tensor(pk), Tensor(pv), 2).data
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_knowledge_embedding_is_mean_of_rows():
    table = np.arange(12.0).reshape(4, 3)
    emb = KnowledgeEmbedder.from_token_embedding(table)
    np.testing.assert_allclose(embed_knowledge(emb, [0, 2, 2]).data, (table[0] + 2 * table[2]) / 3)
    np.testing.assert_allclose(emb.vector([1, 3]), (table[1] + table[3]) / 2)
    bags = bag_matrix([[0, 2, 2], [1, 3]], 4)
    np.testing.assert_allclose(embed_knowledge_batch(emb, bags).data[1], (table[1] + table[3]) / 2)


def test_knowledge_embedder_is_separate_storage():
    model = small_model()
    assert np.array_equal(model.knowledge_embedder.table.value.data, model.token_embedding.value.data)
    assert not np.shares_memory(model.knowledge_embedder.table.value.data, model.token_embedding.value.data)
    assert model.knowledge_embedder.table is not model.token_embedding


def test_empty_knowledge_rejected():
    emb = KnowledgeEmbedder.from_token_embedding(np.ones((3, 2)))
    with pytest.raises(ValueError):
        embed_knowledge(emb, [])
    with pytest.raises(ValueError):
        bag_matrix([[]], 3)


def test_projection_for_uninjected_layer():
    model = small_model(layers=(3,))
    with pytest.raises(InjectionConfigError):
        project_knowledge(Tensor(np.ones((1, 8))), model.projections, 1)


def test_projection_values():
    model = small_model()
    p = model.projections[3]
    k = np.random.default_rng(4).normal(size=(2, 8))
    pk, pv = project_knowledge(Tensor(k), model.projections, 3)
    np.testing.assert_allclose(pk.data, k @ p.w_k.value.data.T)
    np.testing.assert_allclose(pv.data, k @ p.w_v.value.data.T)


@pytest.mark.parametrize(
    "kw, match",
    [
        ({"mode": "bogus"}, "mode"),
        ({"top_n": 200, "sparse_m": 100}, "exceeds"),
        ({"layers": (0,)}, "outside"),
        ({"layers": (9,)}, "outside"),
        ({"mode": "concat", "layers": (1,)}, "concat"),
    ],
)
def test_injection_config_errors(kw, match):
    with pytest.raises(InjectionConfigError, match=match):
        InjectionConfig(**kw).validate(4)


def test_default_layers_are_top_three():
    assert InjectionConfig().resolved_layers(4) == (2, 3, 4)
    assert InjectionConfig().resolved_layers(12) == (10, 11, 12)
    assert InjectionConfig(mode="none").resolved_layers(4) == ()


def test_injection_gradients_reach_projections_and_embedder():
    model = small_model()
    ids = np.array([[2, 5, 6, 3, 7]])
    bags = bag_matrix([[8, 9], [10, 11, 12]], 20)[None]
    with ComputationRecord() as rec:
        k = embed_knowledge_batch(model.knowledge_embedder, bags)
        # a plain sum of layer-normed rows is constant, so weight it
        w = Tensor(np.random.default_rng(5).normal(size=(1, 5, 8)))
        loss = nm.sum(nm.mul(model.encode(ids, k), w))
    params = model.parameters()
    nm.backward(rec, loss, params)
    names = {p.name: p for p in params}
    for n in ("layers.3.inject.w_k", "layers.3.inject.w_v", "knowledge.embedding"):
        assert np.abs(names[n].grad).sum() > 0
