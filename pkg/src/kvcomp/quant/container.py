"""CKV1 compressed block container and the dequantization unit.

CKV1 layout (little-endian, no padding)::

    magic     4s  b"CKV1"
    version   u16 1
    layer     u16
    kv_flag   u8  (0 = Key, 1 = Value)
    bits      u8
    token_start u32
    token_count u32
    num_heads u16
    head_dim  u16
    index bitmap   ceil(N/8) bytes, N = token_count*num_heads*head_dim
    label bitmap   ceil(popcount(index)/8) bytes
    payload        ceil(popcount(label)*bits/8) bytes
    level tables   per channel: u16 count, then count * (u32 breakpoint, f32 scale, i16 zero)

Bitmaps and the payload bitstream are LSB-first. Each payload code is the low
``bits`` bits of the centered code ``c = q - z``; since ``c`` spans exactly
``2**bits`` consecutive values for a given zero point, the unpacker recovers
it with the zero point of the level active for that element.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import (
    BadMagicError,
    CorruptionError,
    TruncatedError,
    UnsupportedVersionError,
)

CKV_MAGIC = b"CKV1"
CKV_VERSION = 1
_HEADER = struct.Struct("<4sHHBBIIHH")
_LEVEL = struct.Struct("<Ifh")
HEADER_BYTES = _HEADER.size
LEVEL_ENTRY_BYTES = _LEVEL.size


@dataclass(frozen=True, eq=False)
class CompressedKvBlock:
    layer: int
    kv: int
    token_start: int
    token_count: int
    num_heads: int
    head_dim: int
    bits: int
    index: np.ndarray = field(repr=False)
    label: np.ndarray = field(repr=False)
    payload: np.ndarray = field(repr=False)  # centered signed codes, all non-zero
    level_tables: tuple = field(repr=False)  # per channel: ((breakpoint, scale, zero), ...)

    @property
    def channels(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def num_elements(self) -> int:
        return self.token_count * self.channels

    def section_sizes(self) -> dict:
        kept = int(np.count_nonzero(self.index))
        nz = int(np.count_nonzero(self.label))
        return {
            "header": HEADER_BYTES,
            "index": -(-self.num_elements // 8),
            "label": -(-kept // 8),
            "payload": -(-nz * self.bits // 8),
            "levels": sum(2 + LEVEL_ENTRY_BYTES * len(t) for t in self.level_tables),
        }

    def packed_size(self) -> int:
        return sum(self.section_sizes().values())

    def validate(self):
        n = self.num_elements
        if self.index.size != n:
            raise CorruptionError(f"index bitmap has {self.index.size} bits, block holds {n} elements")
        kept = int(np.count_nonzero(self.index))
        if self.label.size != kept:
            raise CorruptionError(f"label bitmap has {self.label.size} bits, index keeps {kept}")
        nz = int(np.count_nonzero(self.label))
        if self.payload.size != nz:
            raise CorruptionError(f"payload has {self.payload.size} codes, label marks {nz}")
        if len(self.level_tables) != self.channels:
            raise CorruptionError(f"{len(self.level_tables)} level tables for {self.channels} channels")
        if not 2 <= self.bits <= 8:
            raise CorruptionError(f"invalid bit-width {self.bits}")
        for table in self.level_tables:
            bps = [lv[0] for lv in table]
            if any(b2 <= b1 for b1, b2 in zip(bps, bps[1:])):
                raise CorruptionError("level breakpoints must be strictly increasing")
            if any(not lv[1] > 0 for lv in table):
                raise CorruptionError("level scale must be positive")
        if nz:
            pos = self.payload_positions()
            _, z = self.lookup_levels(pos)
            c = self.payload.astype(np.int64)
            qmax = (1 << self.bits) - 1
            if np.any(c == 0) or np.any(c < -z) or np.any(c > qmax - z):
                raise CorruptionError("payload code outside its level's code range")

    def payload_positions(self) -> np.ndarray:
        """Flat element positions (scan order) carrying a payload code."""
        kept_pos = np.flatnonzero(self.index)
        return kept_pos[self.label.astype(bool)]

    def lookup_levels(self, positions: np.ndarray):
        """Scale and zero point of the level active for each flat element position."""
        c = self.channels
        ch = positions % c
        tok = self.token_start + positions // c
        counts = np.array([len(t) for t in self.level_tables], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        flat = [lv for t in self.level_tables for lv in t]
        bps = np.array([lv[0] for lv in flat], dtype=np.int64)
        scales = np.array([lv[1] for lv in flat], dtype=np.float64)
        zeros = np.array([lv[2] for lv in flat], dtype=np.int64)
        chan_of = np.repeat(np.arange(c, dtype=np.int64), counts)
        keys = (chan_of << 33) + bps
        idx = np.searchsorted(keys, (ch << 33) + tok, side="right") - 1
        if positions.size and np.any(idx < offsets[ch]):
            raise CorruptionError("token outside all level intervals")
        return scales[idx], zeros[idx]

    def __eq__(self, other):
        if not isinstance(other, CompressedKvBlock):
            return NotImplemented
        meta = ("layer", "kv", "token_start", "token_count", "num_heads", "head_dim", "bits")
        return (
            all(getattr(self, m) == getattr(other, m) for m in meta)
            and np.array_equal(self.index, other.index)
            and np.array_equal(self.label, other.label)
            and np.array_equal(self.payload.astype(np.int64), other.payload.astype(np.int64))
            and self.level_tables == other.level_tables
        )

    __hash__ = None


@dataclass
class DequantStats:
    multiplies: int = 0
    pruned_skips: int = 0
    zero_code_skips: int = 0

    @property
    def elements(self) -> int:
        return self.multiplies + self.pruned_skips + self.zero_code_skips


def dequantize(block: CompressedKvBlock, stats: DequantStats | None = None) -> np.ndarray:
    """Reconstruct ``[token_count, num_heads, head_dim]`` int8-domain reals.

    Pruned positions and zero codes are written as 0 without arithmetic; only
    labelled elements are multiplied by their level's scale.
    """
    block.validate()
    out = np.zeros(block.num_elements, dtype=np.float64)
    pos = block.payload_positions()
    if pos.size:
        scales, _ = block.lookup_levels(pos)
        out[pos] = block.payload.astype(np.float64) * scales
    if stats is not None:
        kept = int(np.count_nonzero(block.index))
        stats.multiplies += int(pos.size)
        stats.pruned_skips += block.num_elements - kept
        stats.zero_code_skips += kept - int(pos.size)
    return out.reshape(block.token_count, block.num_heads, block.head_dim)


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


def _unpack_bits(buf: bytes, n: int, what: str) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    if np.any(bits[n:]):
        raise CorruptionError(f"non-zero padding bits in {what} section")
    return bits[:n].astype(bool)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Low ``bits`` bits of each code, concatenated LSB-first."""
    u = np.asarray(codes, dtype=np.int64) & ((1 << bits) - 1)
    planes = (u[:, None] >> np.arange(bits)) & 1
    return _pack_bits(planes.reshape(-1))


def unpack_codes(buf: bytes, count: int, bits: int) -> np.ndarray:
    """Unsigned ``bits``-bit fields from an LSB-first stream."""
    planes = _unpack_bits(buf, count * bits, "payload").reshape(count, bits).astype(np.int64)
    return (planes << np.arange(bits)).sum(axis=1)


def pack_block(block: CompressedKvBlock) -> bytes:
    block.validate()
    parts = [
        _HEADER.pack(
            CKV_MAGIC,
            CKV_VERSION,
            block.layer,
            block.kv,
            block.bits,
            block.token_start,
            block.token_count,
            block.num_heads,
            block.head_dim,
        ),
        _pack_bits(block.index),
        _pack_bits(block.label),
        pack_codes(block.payload, block.bits),
    ]
    for table in block.level_tables:
        parts.append(struct.pack("<H", len(table)))
        for bp, s, z in table:
            parts.append(_LEVEL.pack(bp, s, z))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(self.pos + n, len(self.buf), what)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def unpack_block(buf: bytes) -> CompressedKvBlock:
    r = _Reader(bytes(buf))
    magic, version, layer, kv, bits, start, count, heads, head_dim = _HEADER.unpack(r.take(HEADER_BYTES, "header"))
    if magic != CKV_MAGIC:
        if magic[:3] == b"CKV":
            raise UnsupportedVersionError(f"unsupported block format {magic!r}")
        raise BadMagicError(f"not a CKV1 block (magic {magic!r})")
    if version != CKV_VERSION:
        raise UnsupportedVersionError(f"unsupported CKV1 version {version}")
    if not 2 <= bits <= 8:
        raise CorruptionError(f"invalid bit-width {bits}")
    channels = heads * head_dim
    n = count * channels
    index = _unpack_bits(r.take(-(-n // 8), "index bitmap"), n, "index")
    kept = int(index.sum())
    label = _unpack_bits(r.take(-(-kept // 8), "label bitmap"), kept, "label")
    nz = int(label.sum())
    raw = unpack_codes(r.take(-(-nz * bits // 8), "payload"), nz, bits)
    tables = []
    for _ in range(channels):
        (n_levels,) = struct.unpack("<H", r.take(2, "level table"))
        entries = r.take(n_levels * LEVEL_ENTRY_BYTES, "level table")
        tables.append(tuple(
            (bp, float(s), z) for bp, s, z in _LEVEL.iter_unpack(entries)
        ))
    if r.pos != len(r.buf):
        raise CorruptionError(f"{len(r.buf) - r.pos} trailing bytes after level tables")
    block = CompressedKvBlock(
        layer, kv, start, count, heads, head_dim, bits, index, label,
        np.zeros(nz, dtype=np.int16), tuple(tables),
    )
    if nz:
        _, z = block.lookup_levels(block.payload_positions())
        mod = 1 << bits
        codes = ((raw + z) % mod) - z
        block = CompressedKvBlock(
            layer, kv, start, count, heads, head_dim, bits, index, label, codes.astype(np.int16), tuple(tables)
        )
    block.validate()
    return block
