import struct

import numpy as np
import pytest

from kformer.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from kformer.encoder import Kformer, ModelConfig
from kformer.injection import InjectionConfig
from kformer.text import Vocabulary

CFG = ModelConfig(num_layers=2, hidden=8, intermediate=16, num_heads=2, vocab_size=12, max_seq_len=10, seed=5)


@pytest.mark.parametrize(
    "inj",
    [InjectionConfig(mode="none"), InjectionConfig(mode="ffn", layers=(2,), top_n=4, sparse_m=9), InjectionConfig(mode="concat")],
)
def test_round_trip_restores_everything(tmp_path, inj):
    model = Kformer(CFG, inj)
    model.head.assign(np.arange(8.0).reshape(8, 1) / 7)
    vocab = Vocabulary(["alpha", "beta"])
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, vocab, {"run.note": "x"})
    again, v2, header = load_checkpoint(path)
    assert v2.itos == vocab.itos
    assert header["run.note"] == "x"
    assert again.injection.mode == inj.mode
    assert again.injected_layers == model.injected_layers
    assert again.injection.top_n == inj.top_n
    for p, q in zip(model.parameters(), again.parameters()):
        assert p.name == q.name
        assert p.value.data.tobytes() == q.value.data.tobytes()


def test_save_is_deterministic(tmp_path):
    model = Kformer(CFG, InjectionConfig(mode="ffn"))
    save_checkpoint(tmp_path / "a", model)
    save_checkpoint(tmp_path / "b", model)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_header_layout(tmp_path):
    save_checkpoint(tmp_path / "a", Kformer(CFG))
    raw = (tmp_path / "a").read_bytes()
    assert raw[:8] == MAGIC
    version, hlen = struct.unpack_from("<II", raw, 8)
    assert version == 1
    assert b"model.hidden=8" in raw[16 : 16 + hlen]


def test_rejects_bad_magic_and_version(tmp_path):
    path = tmp_path / "a"
    save_checkpoint(path, Kformer(CFG))
    raw = bytearray(path.read_bytes())
    (tmp_path / "m").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "m")
    raw[8:12] = struct.pack("<I", 7)
    (tmp_path / "v").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 7"):
        read_checkpoint(tmp_path / "v")


def test_rejects_parameter_mismatch(tmp_path):
    model = Kformer(CFG, InjectionConfig(mode="ffn"))
    header = model.config_dict()
    # header claims a plain encoder while the payload carries injection weights
    model.config_dict = lambda: {**header, "injection.mode": "none", "injection.layers": "-"}
    save_checkpoint(tmp_path / "a", model)
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(tmp_path / "a")
