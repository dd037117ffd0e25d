"""Quantization-parameter overhead of per-channel, per-token and group-wise schemes,
operation-count oracles for re-quantization, and a group-wise reference quantizer."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..errors import InvalidArgumentError

SCHEMES = ("PCQ", "PTQ", "GPCQ")
POLICIES = ("naive-PCQ", "HQE")


class Overhead(NamedTuple):
    param_count: int  # (scale, zero point) sets per head
    param_bytes: int


def scheme_overhead(scheme: str, context_len: int, head_dim: int, group_size: int | None = None,
                    scale_bytes: int = 4, zero_bytes: int = 2) -> Overhead:
    """Quantization parameter sets one attention head needs for ``context_len`` tokens.

    PCQ shares parameters along tokens (one set per channel), PTQ along
    channels (one set per token), GPCQ keeps one set per channel per token
    group of ``group_size``.
    """
    if context_len < 1 or head_dim < 1:
        raise InvalidArgumentError("context_len and head_dim must be >= 1")
    scheme = scheme.upper()
    if scheme == "PCQ":
        sets = head_dim
    elif scheme == "PTQ":
        sets = context_len
    elif scheme == "GPCQ":
        if not group_size:
            raise InvalidArgumentError("GPCQ needs a positive group_size")
        if context_len % group_size:
            raise InvalidArgumentError(f"group_size {group_size} does not divide context_len {context_len}")
        sets = head_dim * (context_len // group_size)
    else:
        raise InvalidArgumentError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    return Overhead(sets, sets * (scale_bytes + zero_bytes))


def requant_ops_oracle(prefill: int, decode: int, policy: str) -> int:
    """Token quantizations per channel.

    Naive per-channel quantization re-quantizes the whole history on every
    decode step: ``p + sum(t for t in p+1..p+d)``. The hierarchical scheme
    touches each token once: ``p + d``.
    """
    if prefill < 1 or decode < 0:
        raise InvalidArgumentError("need prefill >= 1 and decode >= 0")
    if policy == "naive-PCQ":
        n = prefill + decode
        return prefill + n * (n + 1) // 2 - prefill * (prefill + 1) // 2
    if policy == "HQE":
        return prefill + decode
    raise InvalidArgumentError(f"unknown policy {policy!r}; expected one of {POLICIES}")


def gpcq_fake_quant(values: np.ndarray, mask: np.ndarray, bits: int, group_size: int) -> np.ndarray:
    """Group-wise per-channel quantize/dequantize of a ``[tokens, channels]`` block.

    Each group of ``group_size`` consecutive tokens gets its own per-channel
    scale and zero point from the kept elements (range widened to include 0,
    scale rounded up to float32). Unkept elements come back as 0.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if group_size < 1:
        raise InvalidArgumentError("group_size must be >= 1")
    qmax = 2 ** bits - 1
    out = np.zeros_like(values)
    tokens, channels = values.shape
    for g0 in range(0, tokens, group_size):
        for ch in range(channels):
            col = values[g0:g0 + group_size, ch]
            keep = mask[g0:g0 + group_size, ch]
            if not keep.any():
                continue
            lo = min(0.0, col[keep].min())
            hi = max(0.0, col[keep].max())
            scale = float(np.float32((hi - lo) / qmax))
            if scale < (hi - lo) / qmax:
                scale = float(np.nextafter(np.float32(scale), np.float32(np.inf)))
            zero = min(max(_half_away(-lo / scale), 0), qmax)
            for i in np.flatnonzero(keep):
                q = min(max(_half_away(col[i] / scale) + zero, 0), qmax)
                out[g0 + i, ch] = (q - zero) * scale
    return out


def _half_away(x: float) -> int:
    return int(np.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)
