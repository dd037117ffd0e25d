"""KV trace model: shapes, int8 trace container, synthetic generator and the KVT1 file format.

KVT1 layout (little-endian, no padding)::

    magic   4s   b"KVT1"
    version u16  1
    layers  u16
    heads   u16
    head_dim u16
    prefill u32
    decode  u32
    for each layer: K payload, then V payload, each tokens*heads*head_dim int8
    in (token, head, channel) order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence, Union

import numpy as np

from .errors import (
    BadMagicError,
    InvalidArgumentError,
    ShapeMismatchError,
    TruncatedError,
    UnsupportedVersionError,
)

KVT_MAGIC = b"KVT1"
KVT_VERSION = 1
_KVT_HEADER = struct.Struct("<4sHHHHII")

KEY = 0
VALUE = 1


@dataclass(frozen=True)
class LayerShape:
    num_layers: int
    num_heads: int
    head_dim: int

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "head_dim"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer, got {v!r}")

    @property
    def hidden_dim(self) -> int:
        return self.num_heads * self.head_dim

    @classmethod
    def opt_125m(cls) -> "LayerShape":
        return cls(num_layers=12, num_heads=12, head_dim=64)


@dataclass(frozen=True, eq=False)
class KvTrace:
    """Per-layer int8 Key/Value streams.

    ``data`` has shape ``[num_layers, 2, tokens, num_heads, head_dim]`` where
    axis 1 selects Key (0) or Value (1).
    """

    shape: LayerShape
    prefill_len: int
    decode_len: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.prefill_len < 0 or self.decode_len < 0:
            raise InvalidArgumentError("token counts must be non-negative")
        data = np.asarray(self.data)
        if data.dtype != np.int8:
            if data.size and (data.min() < -128 or data.max() > 127):
                raise InvalidArgumentError("KV values must lie in the int8 range")
            data = data.astype(np.int8)
        expected = (self.shape.num_layers, 2, self.num_tokens, self.shape.num_heads, self.shape.head_dim)
        if data.shape != expected:
            raise ShapeMismatchError(f"trace data has shape {data.shape}, expected {expected}")
        data = data.copy() if data.flags.writeable else data
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def num_tokens(self) -> int:
        return self.prefill_len + self.decode_len

    @property
    def channels(self) -> int:
        return self.shape.hidden_dim

    def keys(self, layer: int) -> np.ndarray:
        return self.data[layer, KEY]

    def values(self, layer: int) -> np.ndarray:
        return self.data[layer, VALUE]

    def stream(self, layer: int, kv: int) -> np.ndarray:
        """One layer's K or V as a ``[tokens, channels]`` view."""
        return self.data[layer, kv].reshape(self.num_tokens, self.channels)

    def __eq__(self, other):
        if not isinstance(other, KvTrace):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.prefill_len == other.prefill_len
            and self.decode_len == other.decode_len
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True)
class CompressionConfig:
    """Per-layer pruning thresholds and bit-widths for Key and Value."""

    th_k: tuple
    th_v: tuple
    bits_k: tuple
    bits_v: tuple
    hqe_margin: float = 0.1

    def __post_init__(self):
        for name in ("th_k", "th_v", "bits_k", "bits_v"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        n = len(self.th_k)
        if not (len(self.th_v) == len(self.bits_k) == len(self.bits_v) == n) or n == 0:
            raise InvalidArgumentError("per-layer arrays must be non-empty and of equal length")
        if any(t < 0 for t in self.th_k + self.th_v):
            raise InvalidArgumentError("thresholds must be >= 0")
        if any(not 2 <= b <= 8 for b in self.bits_k + self.bits_v):
            raise InvalidArgumentError("bit-widths must be in [2, 8]")
        if not self.hqe_margin >= 0:
            raise InvalidArgumentError("hqe_margin must be >= 0")

    @property
    def num_layers(self) -> int:
        return len(self.th_k)

    @classmethod
    def uniform(cls, num_layers: int, threshold: int = 0, bits: int = 8, margin: float = 0.1):
        return cls(
            th_k=(threshold,) * num_layers,
            th_v=(threshold,) * num_layers,
            bits_k=(bits,) * num_layers,
            bits_v=(bits,) * num_layers,
            hqe_margin=margin,
        )

    def threshold(self, layer: int, kv: int) -> int:
        return (self.th_k, self.th_v)[kv][layer]

    def bits(self, layer: int, kv: int) -> int:
        return (self.bits_k, self.bits_v)[kv][layer]

    def check_shape(self, shape: LayerShape):
        if self.num_layers != shape.num_layers:
            raise ShapeMismatchError(
                f"config covers {self.num_layers} layers, trace has {shape.num_layers}"
            )

    def with_bits(self, bits_k: Sequence[int], bits_v: Sequence[int]) -> "CompressionConfig":
        return CompressionConfig(self.th_k, self.th_v, tuple(bits_k), tuple(bits_v), self.hqe_margin)

    def to_dict(self) -> dict:
        return {
            "th_k": list(self.th_k),
            "th_v": list(self.th_v),
            "bits_k": list(self.bits_k),
            "bits_v": list(self.bits_v),
            "hqe_margin": self.hqe_margin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionConfig":
        unknown = set(d) - {"th_k", "th_v", "bits_k", "bits_v", "hqe_margin"}
        if unknown:
            raise InvalidArgumentError(f"unknown compression config keys: {sorted(unknown)}")
        try:
            return cls(d["th_k"], d["th_v"], d["bits_k"], d["bits_v"], float(d.get("hqe_margin", 0.1)))
        except KeyError as exc:
            raise InvalidArgumentError(f"missing compression config key {exc}") from None


def outlier_channels(shape: LayerShape, seed: int, outlier_channel_fraction: float) -> np.ndarray:
    """Boolean mask ``[layers, 2, heads, head_dim]`` of the channels the generator amplifies."""
    if not 0.0 <= outlier_channel_fraction <= 1.0:
        raise InvalidArgumentError("outlier_channel_fraction must be in [0, 1]")
    # round() guards against 0.1*10 style float noise before ceil
    n_out = math.ceil(round(outlier_channel_fraction * shape.head_dim, 9))
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    mask = np.zeros((shape.num_layers, 2, shape.num_heads, shape.head_dim), dtype=bool)
    for layer in range(shape.num_layers):
        for kv in (KEY, VALUE):
            for head in range(shape.num_heads):
                picked = rng.choice(shape.head_dim, size=n_out, replace=False)
                mask[layer, kv, head, picked] = True
    return mask


def generate_synthetic_trace(
    shape: LayerShape,
    prefill_len: int,
    decode_len: int,
    seed: int,
    outlier_channel_fraction: float = 0.0,
    outlier_gain: float = 1.0,
    *,
    base_std: float = 8.0,
    key_std_scale: float = 1.0,
) -> KvTrace:
    """Seeded stand-in for int8 KV activations.

    Every channel is zero-mean Gaussian with ``base_std``; the outlier channels
    (``ceil(fraction * head_dim)`` per head) use ``base_std * outlier_gain``.
    ``key_std_scale`` widens all Key channels relative to Value.
    """
    if prefill_len < 1 or decode_len < 1:
        raise InvalidArgumentError("prefill_len and decode_len must both be >= 1")
    if outlier_gain < 0 or base_std < 0 or key_std_scale < 0:
        raise InvalidArgumentError("gains and std must be non-negative")
    mask = outlier_channels(shape, seed, outlier_channel_fraction)
    std = np.where(mask, base_std * outlier_gain, base_std)
    std[:, KEY] *= key_std_scale
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])
    tokens = prefill_len + decode_len
    noise = rng.standard_normal((shape.num_layers, 2, tokens, shape.num_heads, shape.head_dim))
    raw = noise * std[:, :, None, :, :]
    data = np.clip(np.rint(raw), -128, 127).astype(np.int8)
    return KvTrace(shape, prefill_len, decode_len, data)


PathOrFile = Union[str, Path, BinaryIO]


def trace_to_bytes(trace: KvTrace) -> bytes:
    s = trace.shape
    header = _KVT_HEADER.pack(
        KVT_MAGIC, KVT_VERSION, s.num_layers, s.num_heads, s.head_dim, trace.prefill_len, trace.decode_len
    )
    # data is already (layer, kv, token, head, channel) ordered
    return header + np.ascontiguousarray(trace.data).tobytes()


def trace_from_bytes(buf: bytes) -> KvTrace:
    if len(buf) < _KVT_HEADER.size:
        raise TruncatedError(_KVT_HEADER.size, len(buf), "header")
    magic, version, layers, heads, head_dim, prefill, decode = _KVT_HEADER.unpack_from(buf)
    if magic != KVT_MAGIC:
        if magic[:3] == b"KVT":
            raise UnsupportedVersionError(f"unsupported trace format {magic!r}")
        raise BadMagicError(f"not a KVT1 stream (magic {magic!r})")
    if version != KVT_VERSION:
        raise UnsupportedVersionError(f"unsupported KVT1 version {version}")
    try:
        shape = LayerShape(layers, heads, head_dim)
    except InvalidArgumentError as exc:
        raise ShapeMismatchError(f"invalid shape in header: {exc}") from None
    tokens = prefill + decode
    expected = _KVT_HEADER.size + layers * 2 * tokens * heads * head_dim
    if len(buf) < expected:
        raise TruncatedError(expected, len(buf))
    if len(buf) > expected:
        raise ShapeMismatchError(f"{len(buf) - expected} trailing bytes after payload")
    data = np.frombuffer(buf, dtype=np.int8, offset=_KVT_HEADER.size)
    data = data.reshape(layers, 2, tokens, heads, head_dim)
    return KvTrace(shape, prefill, decode, data)


def write_trace(trace: KvTrace, destination: PathOrFile) -> int:
    payload = trace_to_bytes(trace)
    if isinstance(destination, (str, Path)):
        Path(destination).write_bytes(payload)
    else:
        destination.write(payload)
    return len(payload)


def read_trace(source: PathOrFile) -> KvTrace:
    if isinstance(source, (str, Path)):
        buf = Path(source).read_bytes()
    elif isinstance(source, (bytes, bytearray)):
        buf = bytes(source)
    else:
        buf = source.read()
    return trace_from_bytes(buf)


def load_compression_config(path) -> CompressionConfig:
    with open(path) as fh:
        return CompressionConfig.from_dict(json.load(fh))


def save_compression_config(cfg: CompressionConfig, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")


__all__ = [
    "LayerShape",
    "KvTrace",
    "CompressionConfig",
    "generate_synthetic_trace",
    "outlier_channels",
    "write_trace",
    "read_trace",
    "trace_to_bytes",
    "trace_from_bytes",
    "KEY",
    "VALUE",
]
