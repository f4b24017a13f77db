"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"KFMRCKPT"                       magic, 8 bytes
    u32 version
    u32 header_len, header bytes      UTF-8 ``key=value`` lines
    u32 n_params
    per parameter:
        u16 name_len, name bytes
        u8 ndim, u32 * ndim dims
        float64 little-endian values, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from kformer.encoder import Kformer, ModelConfig
from kformer.injection import InjectionConfig
from kformer.text import Vocabulary

MAGIC = b"KFMRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _format_header(items: dict[str, object]) -> bytes:
    lines = []
    for key, value in items.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise CheckpointError(f"header entry {key!r} cannot be stored on one line")
        lines.append(f"{key}={text}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_header(raw: bytes) -> dict[str, str]:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            out[key] = value
    return out


def save_checkpoint(path: str | Path, model: Kformer, vocab: Vocabulary | None = None, extra: dict | None = None) -> None:
    header = model.config_dict()
    if vocab is not None:
        header["tokenizer.vocab"] = json.dumps(vocab.itos, separators=(",", ":"))
    header.update(extra or {})
    hbytes = _format_header(header)
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", p.value.ndim))
            fh.write(struct.pack(f"<{p.value.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.value.data, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    version, hlen = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} unsupported (want {VERSION})")
    header = _parse_header(data[pos : pos + hlen])
    pos += hlen
    (n_params,) = struct.unpack_from("<I", data, pos)
    pos += 4
    blobs = {}
    for _ in range(n_params):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return header, blobs


def load_checkpoint(path: str | Path) -> tuple[Kformer, Vocabulary | None, dict[str, str]]:
    header, blobs = read_checkpoint(path)
    cfg = ModelConfig(**{k: int(header[f"model.{k}"]) for k in ModelConfig.__dataclass_fields__})
    layers = header.get("injection.layers", "-")
    injection = InjectionConfig(
        mode=header.get("injection.mode", "none"),
        layers=tuple(int(x) for x in layers.split(",") if x and x != "-"),
        top_n=int(header.get("injection.top_n", InjectionConfig.top_n)),
        sparse_m=int(header.get("injection.sparse_m", InjectionConfig.sparse_m)),
    )
    model = Kformer(cfg, injection)
    params = model.named_parameters()
    if set(params) != set(blobs):
        missing = sorted(set(params) ^ set(blobs))
        raise CheckpointError(f"{path}: parameter set mismatch: {missing[:5]}")
    for name, p in params.items():
        p.assign(blobs[name])
    vocab = None
    if "tokenizer.vocab" in header:
        vocab = Vocabulary()
        for w in json.loads(header["tokenizer.vocab"])[len(vocab):]:
            vocab.add(w)
    return model, vocab, header
