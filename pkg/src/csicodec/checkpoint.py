"""Checkpoint files: named float32 tensors, model metadata and the coding
tables derived from the density parameters.

Layout (little-endian)::

    magic "DCMC" | version u16 | meta_len u32 | meta (UTF-8 JSON)
    n_tensors u32 | per tensor: name_len u16, name, ndim u8, dims u32 * ndim,
                    float32 values
    n_tables u16  | per table: model_id u32, n_channels u16,
                    per channel: n_min i32, width u32, freqs u32 * width

Tables are stored for inspection and are regenerated on load; a checkpoint
whose stored tables differ from the regenerated ones is rejected.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .codec import CodecConfig, CsiCodec, MultiUserCsiCodec, ModelMeta
from .rangecoder import ChannelTable, PmfTable

MAGIC = b"DCMC"
VERSION = 1


class CheckpointError(Exception):
    pass


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return out

    def bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out


def _tables_of(model) -> list[PmfTable]:
    t = model.tables
    return [x for x in (t if isinstance(t, list) else [t]) if x is not None]


def save_checkpoint(model, path) -> None:
    model.tables  # freezes the model if it is not already
    meta = {
        "kind": model.kind,
        "n_users": model.n_users,
        "config": model.config.to_dict(),
        "meta": asdict(model.meta),
        "model_id": model.model_id(),
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    out = bytearray(MAGIC + struct.pack("<HI", VERSION, len(blob)) + blob)
    state = model.state_dict()
    out += struct.pack("<I", len(state))
    for name in sorted(state):
        value = np.ascontiguousarray(state[name], dtype="<f4")
        key = name.encode()
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape)
        out += value.tobytes()
    tables = _tables_of(model)
    out += struct.pack("<H", len(tables))
    for table in tables:
        out += struct.pack("<IH", table.model_id, table.n_channels)
        for ch in table.channels:
            out += struct.pack("<iI", ch.n_min, ch.freqs.size)
            out += np.asarray(ch.freqs, dtype="<u4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    """Rebuild a :class:`CsiCodec` or :class:`MultiUserCsiCodec`."""
    raw = Path(path).read_bytes()
    rd = _Reader(raw, path)
    (magic,) = rd.take("<4s")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    version, meta_len = rd.take("<HI")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta = json.loads(rd.bytes(meta_len).decode())
    state = {}
    (count,) = rd.take("<I")
    for _ in range(count):
        (name_len,) = rd.take("<H")
        name = rd.bytes(name_len).decode()
        (ndim,) = rd.take("<B")
        shape = rd.take(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(rd.bytes(4 * n), dtype="<f4").astype(np.float64).reshape(shape)
    stored = []
    (n_tables,) = rd.take("<H")
    for _ in range(n_tables):
        model_id, n_ch = rd.take("<IH")
        channels = []
        for _ in range(n_ch):
            n_min, width = rd.take("<iI")
            freqs = np.frombuffer(rd.bytes(4 * width), dtype="<u4").astype(np.int64)
            channels.append(ChannelTable(n_min, freqs))
        stored.append(PmfTable(channels, model_id))

    config = CodecConfig.from_dict(meta["config"])
    model_meta = ModelMeta(**meta["meta"])
    if meta["kind"] == "single":
        model = CsiCodec(config, meta=model_meta)
    elif meta["kind"] == "distributed":
        model = MultiUserCsiCodec(config, meta["n_users"], meta=model_meta)
    else:
        raise CheckpointError(f"{path}: unknown model kind {meta['kind']!r}")
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    model.freeze()
    if model.model_id() != meta["model_id"]:
        raise CheckpointError(f"{path}: weights do not match the recorded model id")
    fresh = _tables_of(model)
    same = len(fresh) == len(stored) and all(
        a.model_id == b.model_id
        and len(a.channels) == len(b.channels)
        and all(x.n_min == y.n_min and np.array_equal(x.freqs, y.freqs) for x, y in zip(a.channels, b.channels))
        for a, b in zip(fresh, stored)
    )
    if not same:
        raise CheckpointError(f"{path}: stored coding tables differ from the regenerated ones")
    return model
