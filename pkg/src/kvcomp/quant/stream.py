"""Vectorized cascade pruning + hierarchical quantization over a token stream.

One :class:`StreamCompressor` owns one layer's Key or Value stream. Channels
are processed together with numpy; tokens arrive in order (the whole prefill
at once, then one decode token at a time).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgumentError, OrderingError, ShapeMismatchError
from ..prune import prune_mask
from ..trace import CompressionConfig, KvTrace
from .container import CompressedKvBlock, dequantize
from .levels import MAX_SENTINEL, MIN_SENTINEL, QuPhase, QuScheduler, level_params, round_half_away


@dataclass
class _TokenRecord:
    index: np.ndarray  # bool[C]
    label: np.ndarray  # bool[kept]
    codes: np.ndarray  # int16[nonzero]


class StreamCompressor:
    def __init__(self, channels: int, threshold: int, bits: int, margin: float = 0.1, *, num_heads: int = 1, layer: int = 0, kv: int = 0):
        if channels < 1 or channels % num_heads:
            raise InvalidArgumentError("channels must be a positive multiple of num_heads")
        if threshold < 0:
            raise InvalidArgumentError("threshold must be >= 0")
        if not 2 <= bits <= 8:
            raise InvalidArgumentError("bits must be in [2, 8]")
        self.channels = channels
        self.num_heads = num_heads
        self.threshold = threshold
        self.bits = bits
        self.margin = margin
        self.layer = layer
        self.kv = kv
        self.qmax = (1 << bits) - 1
        self.scheduler = QuScheduler()
        self.scheduler.advance(QuPhase.PREFILL)

        self.running_min = np.full(channels, MIN_SENTINEL, dtype=np.int64)
        self.running_max = np.full(channels, MAX_SENTINEL, dtype=np.int64)
        # active level, per channel
        self.scale = np.ones(channels)
        self.zero = np.zeros(channels, dtype=np.int64)
        self.r_min = np.zeros(channels)
        self.r_max = np.zeros(channels)
        self.tr_lo = np.full(channels, -0.5)
        self.tr_hi = np.full(channels, 0.5)
        self.levels = [[] for _ in range(channels)]  # (breakpoint, scale, zero)

        self.prefill_len = 0
        self._records: list[_TokenRecord] = []
        self.token_quantizations = Counter()  # token index -> channel slots quantized
        self.quant_arith_ops = 0
        self.new_level_events: list[tuple[int, int]] = []

    @property
    def num_tokens(self) -> int:
        return len(self._records)

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads

    def _check_width(self, arr):
        if arr.shape[-1] != self.channels:
            raise ShapeMismatchError(f"expected {self.channels} channels, got {arr.shape[-1]}")

    def prefill(self, values) -> None:
        """Max-min finder over the prefill tokens, level-0 creation, then quantize them."""
        self.scheduler.require(QuPhase.PREFILL)
        values = np.asarray(values, dtype=np.int64).reshape(-1, self.channels)
        p = values.shape[0]
        mask = prune_mask(values, self.threshold)
        if p:
            self.running_min = np.minimum(self.running_min, np.where(mask, values, MIN_SENTINEL).min(axis=0))
            self.running_max = np.maximum(self.running_max, np.where(mask, values, MAX_SENTINEL).max(axis=0))
        self.prefill_len = p

        self.scheduler.advance(QuPhase.QUANT)
        live = self.running_min <= self.running_max
        lo = np.minimum(self.running_min, 0).astype(np.float64)
        hi = np.maximum(self.running_max, 0).astype(np.float64)
        # dummy placeholders keep level_params away from a zero width
        s, z, tr_lo, tr_hi = level_params(np.where(live, lo, -1.0), np.where(live, hi, 1.0), self.bits)
        self.scale = np.where(live, s, 1.0)
        self.zero = np.where(live, z, 0)
        self.r_min = np.where(live, lo, 0.0)
        self.r_max = np.where(live, hi, 0.0)
        self.tr_lo = np.where(live, tr_lo, -0.5)
        self.tr_hi = np.where(live, tr_hi, 0.5)
        for ch in range(self.channels):
            self.levels[ch].append((0, float(self.scale[ch]), int(self.zero[ch])))

        for t in range(p):
            self._quantize_token(t, values[t], mask[t])
        self.scheduler.advance(QuPhase.DECODE)

    def decode(self, token) -> None:
        """Channel monitor + quantization of one generated token."""
        self.scheduler.require(QuPhase.DECODE)
        token = np.asarray(token, dtype=np.int64).reshape(-1)
        self._check_width(token)
        t = self.num_tokens
        mask = prune_mask(token, self.threshold)
        x = token.astype(np.float64)
        out = mask & ((x < self.tr_lo) | (x > self.tr_hi))
        if out.any():
            xo, r_min, r_max = x[out], self.r_min[out], self.r_max[out]
            lo = np.minimum(r_min, xo)
            hi = np.maximum(r_max, xo)
            width = hi - lo
            hi = np.where(xo > r_max, hi + self.margin * width, hi)
            lo = np.where(xo < r_min, lo - self.margin * width, lo)
            s, z, tr_lo, tr_hi = level_params(lo, hi, self.bits)
            self.scale[out] = s
            self.zero[out] = z
            self.r_min[out] = lo
            self.r_max[out] = hi
            self.tr_lo[out] = tr_lo
            self.tr_hi[out] = tr_hi
            for ch in np.flatnonzero(out):
                self.levels[ch].append((t, float(self.scale[ch]), int(self.zero[ch])))
            self.new_level_events.append((t, int(out.sum())))
        self._quantize_token(t, token, mask)

    def _quantize_token(self, t: int, row: np.ndarray, mask: np.ndarray):
        if t != self.num_tokens:
            raise OrderingError(f"token {t} quantized out of order")
        kept = row[mask].astype(np.float64)
        s = self.scale[mask]
        z = self.zero[mask]
        q = np.clip(round_half_away(kept / s) + z, 0, self.qmax).astype(np.int64)
        centered = q - z
        label = centered != 0
        self._records.append(_TokenRecord(mask.copy(), label, centered[label].astype(np.int16)))
        self.token_quantizations[t] += self.channels
        self.quant_arith_ops += int(mask.sum())

    def feed(self, values: np.ndarray, prefill_len: int):
        """Compress a whole ``[tokens, channels]`` stream."""
        values = np.asarray(values).reshape(-1, self.channels)
        self.prefill(values[:prefill_len])
        for row in values[prefill_len:]:
            self.decode(row)
        return self

    # -- statistics ---------------------------------------------------------

    def kept_per_token(self) -> np.ndarray:
        return np.array([int(r.index.sum()) for r in self._records], dtype=np.int64)

    def nonzero_per_token(self) -> np.ndarray:
        return np.array([int(r.codes.size) for r in self._records], dtype=np.int64)

    def index_matrix(self) -> np.ndarray:
        return np.array([r.index for r in self._records], dtype=bool).reshape(-1, self.channels)

    def nonzero_matrix(self) -> np.ndarray:
        """bool[tokens, channels]: element survives pruning and quantizes to a non-zero code."""
        out = np.zeros((self.num_tokens, self.channels), dtype=bool)
        for t, r in enumerate(self._records):
            pos = np.flatnonzero(r.index)
            out[t, pos[r.label]] = True
        return out

    def pruning_ratio(self) -> float:
        total = self.num_tokens * self.channels
        if total == 0:
            raise InvalidArgumentError("empty stream")
        return 1.0 - float(self.kept_per_token().sum()) / total

    def level_counts(self) -> np.ndarray:
        return np.array([len(lv) for lv in self.levels], dtype=np.int64)

    def level_table_bytes(self) -> int:
        return 2 * self.channels + 10 * int(self.level_counts().sum())

    def new_levels_per_token(self) -> np.ndarray:
        out = np.zeros(self.num_tokens, dtype=np.int64)
        for t, n in self.new_level_events:
            out[t] += n
        return out

    # -- container ----------------------------------------------------------

    def block(self, token_start: int = 0, token_count: int | None = None) -> CompressedKvBlock:
        if token_count is None:
            token_count = self.num_tokens - token_start
        end = token_start + token_count
        if token_start < 0 or end > self.num_tokens:
            raise InvalidArgumentError("token range outside the compressed stream")
        recs = self._records[token_start:end]
        if recs:
            index = np.concatenate([r.index for r in recs])
            label = np.concatenate([r.label for r in recs])
            payload = np.concatenate([r.codes for r in recs]).astype(np.int16)
        else:
            index = np.zeros(0, dtype=bool)
            label = np.zeros(0, dtype=bool)
            payload = np.zeros(0, dtype=np.int16)
        tables = tuple(
            tuple(lv for lv in levels if lv[0] < max(end, 1)) for levels in self.levels
        )
        return CompressedKvBlock(
            layer=self.layer,
            kv=self.kv,
            token_start=token_start,
            token_count=token_count,
            num_heads=self.num_heads,
            head_dim=self.head_dim,
            bits=self.bits,
            index=index,
            label=label,
            payload=payload,
            level_tables=tables,
        )

    def reconstruct(self) -> np.ndarray:
        """Dequantized ``[tokens, channels]`` stream through the container path."""
        return dequantize(self.block()).reshape(self.num_tokens, self.channels)


@dataclass
class CompressedTrace:
    trace: KvTrace
    config: CompressionConfig
    streams: dict = field(default_factory=dict)  # (layer, kv) -> StreamCompressor

    def stream(self, layer: int, kv: int) -> StreamCompressor:
        return self.streams[(layer, kv)]

    def avg_pruning_ratio(self) -> float:
        return float(np.mean([s.pruning_ratio() for s in self.streams.values()]))

    def reconstruct(self) -> np.ndarray:
        """Dequantized trace as float ``[layers, 2, tokens, heads, head_dim]``."""
        t = self.trace
        out = np.zeros(t.data.shape, dtype=np.float64)
        for (layer, kv), s in self.streams.items():
            out[layer, kv] = s.reconstruct().reshape(t.num_tokens, t.shape.num_heads, t.shape.head_dim)
        return out


def compress_stream(values, prefill_len: int, threshold: int, bits: int, margin: float = 0.1, **kw) -> StreamCompressor:
    values = np.asarray(values)
    comp = StreamCompressor(values.shape[-1] if values.ndim == 2 else values[0].size, threshold, bits, margin, **kw)
    return comp.feed(values.reshape(values.shape[0], -1), prefill_len)


def compress_trace(trace: KvTrace, cfg: CompressionConfig) -> CompressedTrace:
    cfg.check_shape(trace.shape)
    out = CompressedTrace(trace, cfg)
    for layer in range(trace.shape.num_layers):
        for kv in (0, 1):
            comp = StreamCompressor(
                trace.channels,
                cfg.threshold(layer, kv),
                cfg.bits(layer, kv),
                cfg.hqe_margin,
                num_heads=trace.shape.num_heads,
                layer=layer,
                kv=kv,
            )
            out.streams[(layer, kv)] = comp.feed(trace.stream(layer, kv), trace.prefill_len)
    return out
