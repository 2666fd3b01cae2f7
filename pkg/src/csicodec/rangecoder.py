"""Static multi-symbol range coder driven by fixed-point PMF tables.

The coder keeps a 64-bit ``low`` and ``range``, renormalises byte-wise when
the top byte of the interval is settled or the range drops below 2**32, and
never propagates carries (Subbotin's construction). Termination emits the
shortest bit string whose every continuation lands inside the final
interval; the decoder reads zeros past the end of the payload.

Symbols outside a table's support are coded as the table's escape symbol
followed by the raw value as a signed 32-bit integer (two uniform 16-bit
chunks), so every int32 sequence is codable.
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION

_MASK = (1 << 64) - 1
_TOP = 1 << 56
_BOT = 1 << 32

MAGIC = b"CMCB"
VERSION = 1
_HEADER = struct.Struct("<4sBIHHHHI")


class CodingError(Exception):
    """Base class for bitstream errors."""


class TruncatedStreamError(CodingError):
    pass


class ModelMismatchError(CodingError):
    pass


class HeaderError(CodingError):
    pass


@dataclass
class ChannelTable:
    """Fixed-point PMF of one channel: symbol ``n_min + i`` has frequency
    ``freqs[i]``; the last entry of ``freqs`` is the escape symbol."""

    n_min: int
    freqs: np.ndarray
    cum: list[int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.freqs = np.asarray(self.freqs, dtype=np.int64)
        if self.freqs.ndim != 1 or self.freqs.size < 1:
            raise ValueError("frequency table must be a non-empty vector")
        if np.any(self.freqs < 1):
            raise ValueError("every frequency must be >= 1")
        if int(self.freqs.sum()) != TOTAL:
            raise ValueError(f"frequencies sum to {int(self.freqs.sum())}, expected {TOTAL}")
        self.cum = [0] + np.cumsum(self.freqs).tolist()

    @property
    def n_max(self) -> int:
        return self.n_min + self.freqs.size - 2

    @property
    def escape(self) -> int:
        return self.freqs.size - 1

    def probabilities(self) -> np.ndarray:
        return self.freqs / TOTAL

    def cost_bits(self, symbols: np.ndarray) -> float:
        """Ideal code length of ``symbols`` under this table, escape payloads
        included."""
        symbols = np.asarray(symbols, dtype=np.int64).ravel()
        idx = symbols - self.n_min
        inside = (idx >= 0) & (idx < self.escape)
        p = np.where(inside, self.freqs[np.clip(idx, 0, self.escape)], self.freqs[self.escape])
        bits = -np.log2(p / TOTAL)
        return float(bits.sum() + 32 * np.count_nonzero(~inside))


@dataclass
class PmfTable:
    """Per-channel coding tables plus the identifier of the model that
    produced them."""

    channels: list[ChannelTable]
    model_id: int = 0

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def cost_bits(self, symbols: np.ndarray) -> float:
        symbols = np.asarray(symbols)
        if symbols.shape[0] != self.n_channels:
            raise ValueError("leading axis of symbols must index channels")
        return sum(t.cost_bits(s) for t, s in zip(self.channels, symbols))


@dataclass
class Bitstream:
    model_id: int
    lambda_code: int
    shape: tuple[int, int, int]
    payload: bytes
    payload_bits: int

    @property
    def total_bits(self) -> int:
        return 8 * _HEADER.size + self.payload_bits

    def to_bytes(self) -> bytes:
        c, h, w = self.shape
        head = _HEADER.pack(MAGIC, VERSION, self.model_id, self.lambda_code, c, h, w, self.payload_bits)
        return head + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size:
            raise TruncatedStreamError(f"stream has {len(data)} bytes, header needs {_HEADER.size}")
        magic, version, model_id, lam, c, h, w, nbits = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise HeaderError(f"bad magic {magic!r}")
        if version != VERSION:
            raise HeaderError(f"unsupported version {version}")
        payload = data[_HEADER.size:]
        need = (nbits + 7) // 8
        if len(payload) < need:
            raise TruncatedStreamError(f"payload has {len(payload)} bytes, header declares {need}")
        return cls(model_id, lam, (c, h, w), bytes(payload[:need]), nbits)


class _Encoder:
    def __init__(self) -> None:
        self.low = 0
        self.range = _MASK
        self.out = bytearray()
        self.used = False

    def put(self, cum: int, freq: int) -> None:
        self.used = True
        r = self.range >> PRECISION
        low = self.low + r * cum
        rng = r * freq
        out = self.out
        while True:
            if (low ^ (low + rng)) >= _TOP:
                if rng >= _BOT:
                    break
                rng = -low & (_BOT - 1)
            out.append(low >> 56)
            low = (low << 8) & _MASK
            rng <<= 8
        self.low, self.range = low, rng

    def finish(self) -> tuple[bytes, int]:
        if not self.used:
            return b"", 0
        low, hi = self.low, self.low + self.range
        # shortest k-bit value v whose whole dyadic cell [v, v + 2^(64-k))
        # fits in the final interval: the code stays prefix-free, so its
        # length never undercuts the information content of the message
        for nbits in range(1, 65):
            step = 1 << (64 - nbits)
            v = -(-low // step) * step
            if v + step <= hi:
                break
        total = 8 * len(self.out) + nbits
        acc = int.from_bytes(bytes(self.out), "big") << nbits | (v >> (64 - nbits))
        return (acc << (-total % 8)).to_bytes((total + 7) // 8, "big"), total


class _Decoder:
    def __init__(self, payload: bytes) -> None:
        self.data = payload
        self.pos = 8
        padded = payload[:8].ljust(8, b"\0")
        self.code = int.from_bytes(padded, "big")
        self.low = 0
        self.range = _MASK

    def target(self) -> int:
        self._r = self.range >> PRECISION
        return min((self.code - self.low) // self._r, TOTAL - 1)

    def consume(self, cum: int, freq: int) -> None:
        r = self._r
        low = self.low + r * cum
        rng = r * freq
        code = self.code
        data, pos = self.data, self.pos
        while True:
            if (low ^ (low + rng)) >= _TOP:
                if rng >= _BOT:
                    break
                rng = -low & (_BOT - 1)
            byte = data[pos] if pos < len(data) else 0
            pos += 1
            code = ((code << 8) | byte) & _MASK
            low = (low << 8) & _MASK
            rng <<= 8
        self.low, self.range, self.code, self.pos = low, rng, code, pos


def _as_3d(symbols) -> np.ndarray:
    arr = np.asarray(symbols)
    if arr.ndim > 3:
        raise ValueError("symbols must have at most 3 axes (C, H, W)")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError("symbols must be finite integers")
    arr = arr.astype(np.int64).reshape((1,) * (3 - arr.ndim) + arr.shape)
    if any(n > 0xFFFF for n in arr.shape):
        raise ValueError(f"symbol tensor shape {arr.shape} does not fit the u16 header fields")
    if arr.size and (arr.min() < -(1 << 31) or arr.max() >= 1 << 31):
        raise ValueError("symbols must fit in a signed 32-bit integer")
    return arr


def encode(symbols, tables: PmfTable, lambda_code: int = 0) -> Bitstream:
    """Range-code an integer tensor ``(C, H, W)`` (fewer axes are padded on
    the left); channel ``c`` uses ``tables.channels[c]``."""
    arr = _as_3d(symbols)
    if arr.shape[0] != tables.n_channels:
        raise ValueError(f"{arr.shape[0]} symbol channels but {tables.n_channels} tables")
    enc = _Encoder()
    for table, plane in zip(tables.channels, arr):
        cum, n_min, esc = table.cum, table.n_min, table.escape
        for s in plane.ravel().tolist():
            i = s - n_min
            if 0 <= i < esc:
                enc.put(cum[i], cum[i + 1] - cum[i])
            else:
                enc.put(cum[esc], cum[esc + 1] - cum[esc])
                raw = s & 0xFFFFFFFF
                enc.put(raw >> 16, 1)
                enc.put(raw & 0xFFFF, 1)
    payload, nbits = enc.finish()
    return Bitstream(tables.model_id, lambda_code, tuple(arr.shape), payload, nbits)


def decode(stream: Bitstream, tables: PmfTable, count: int | None = None) -> np.ndarray:
    """Inverse of :func:`encode`; returns an int64 array of the header shape."""
    if stream.model_id != tables.model_id:
        raise ModelMismatchError(
            f"stream was coded with model {stream.model_id:#010x}, tables are {tables.model_id:#010x}"
        )
    if len(stream.payload) < (stream.payload_bits + 7) // 8:
        raise TruncatedStreamError("payload shorter than its declared bit length")
    c, h, w = stream.shape
    if count is not None and count != c * h * w:
        raise ValueError(f"expected {count} symbols, header declares {c * h * w}")
    if c != tables.n_channels:
        raise ModelMismatchError(f"stream has {c} channels, tables have {tables.n_channels}")
    dec = _Decoder(stream.payload)
    out = np.empty((c, h * w), dtype=np.int64)
    for ci, table in enumerate(tables.channels):
        cum, n_min, esc = table.cum, table.n_min, table.escape
        row = out[ci]
        for k in range(h * w):
            i = bisect_right(cum, dec.target()) - 1
            dec.consume(cum[i], cum[i + 1] - cum[i])
            if i == esc:
                hi = dec.target()
                dec.consume(hi, 1)
                lo = dec.target()
                dec.consume(lo, 1)
                raw = hi << 16 | lo
                row[k] = raw - (1 << 32) if raw >= 1 << 31 else raw
            else:
                row[k] = n_min + i
    return out.reshape(c, h, w)
