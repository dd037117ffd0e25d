"""Bit-width refinement on top of a chosen pruning configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import InfeasibleError, InvalidArgumentError
from ..prune import prune_mask
from ..trace import KEY, VALUE, CompressionConfig, KvTrace
from .evaluator import genome_to_config
from .nsga2 import Individual


@dataclass
class Stage2Result:
    config: CompressionConfig
    baseline_quality: float  # uniform 8-bit
    sweep: dict  # uniform bits -> quality
    knee_bits: int | None  # largest uniform width that violated the budget
    sensitive: str | None  # "key" or "value"
    k_low_quality: float | None = None
    v_low_quality: float | None = None
    raised_layers: tuple = ()
    steps: list = field(default_factory=list)  # (description, quality)

    @property
    def quality(self) -> float:
        return self.steps[-1][1] if self.steps else self.baseline_quality


def layer_spreads(trace: KvTrace, cfg: CompressionConfig, kv: int) -> np.ndarray:
    """Per layer: max over channels of (max - min) of the values surviving pruning."""
    out = np.zeros(trace.shape.num_layers)
    for layer in range(trace.shape.num_layers):
        x = trace.stream(layer, kv).astype(np.float64)
        m = prune_mask(trace.stream(layer, kv), cfg.threshold(layer, kv))
        hi = np.where(m, x, -np.inf).max(axis=0)
        lo = np.where(m, x, np.inf).min(axis=0)
        live = np.isfinite(hi)
        out[layer] = float((hi - lo)[live].max()) if live.any() else 0.0
    return out


def stage2_bitwidth_search(
    front_best: Individual | CompressionConfig,
    evaluator: Callable[[CompressionConfig], float],
    trace: KvTrace | None = None,
    bit_range: tuple = (2, 8),
    quality_budget: float = math.inf,
    spread_factor: float = 2.0,
    margin: float = 0.1,
) -> Stage2Result:
    """Sweep uniform widths down, rank Key vs Value sensitivity at the knee, then raise bits.

    ``quality_budget`` is the largest allowed quality drop below the uniform
    8-bit configuration. ``trace`` is needed only for the per-layer spread
    rule; without it no individual layers are raised.
    """
    lo_b, hi_b = bit_range
    if not 2 <= lo_b <= hi_b <= 8:
        raise InvalidArgumentError("bit_range must satisfy 2 <= low <= high <= 8")
    if isinstance(front_best, Individual):
        base = genome_to_config(front_best.genome, 8, 8, margin)
    else:
        base = front_best
    n = base.num_layers

    def cfg_for(bk, bv):
        bk = (bk,) * n if isinstance(bk, int) else tuple(bk)
        bv = (bv,) * n if isinstance(bv, int) else tuple(bv)
        return base.with_bits(bk, bv)

    q8 = evaluator(cfg_for(8, 8))
    sweep = {}

    def ok(q):
        return q8 - q <= quality_budget

    if not ok(q8):
        raise InfeasibleError(f"quality budget {quality_budget} unreachable even at 8 bits", sweep={8: q8})

    knee = None
    for b in range(hi_b, lo_b - 1, -1):
        sweep[b] = q8 if b == 8 else evaluator(cfg_for(b, b))
        if not ok(sweep[b]):
            knee = b
            break
    if knee is None:
        return Stage2Result(cfg_for(lo_b, lo_b), q8, sweep, None, None, steps=[("uniform", sweep[lo_b])])
    if knee == hi_b:
        # even the top of the range violates; nothing below it is admissible
        if hi_b == 8:
            return Stage2Result(cfg_for(8, 8), q8, sweep, knee, None, steps=[("uniform", q8)])
        raise InfeasibleError(f"budget violated at the top of bit_range ({hi_b} bits)", sweep=sweep)

    safe = knee + 1
    q_klow = evaluator(cfg_for(knee, safe))
    q_vlow = evaluator(cfg_for(safe, knee))
    sensitive = "key" if q_klow < q_vlow else "value"
    result = Stage2Result(None, q8, sweep, knee, sensitive, q_klow, q_vlow)

    sens = [safe] * n
    insens = [knee] * n

    def current():
        return cfg_for(sens, insens) if sensitive == "key" else cfg_for(insens, sens)

    q = evaluator(current())
    result.steps.append((f"{sensitive} raised to {safe} bits", q))
    if not ok(q) and trace is not None:
        kv = VALUE if sensitive == "key" else KEY
        spreads = layer_spreads(trace, base, kv)
        med = float(np.median(spreads))
        raised = tuple(i for i in range(n) if spreads[i] > spread_factor * med)
        if raised:
            for i in raised:
                insens[i] = safe
            result.raised_layers = raised
            q = evaluator(current())
            result.steps.append((f"wide-range layers {list(raised)} raised to {safe} bits", q))
    if not ok(q):
        # last resort: the uniform width the sweep accepted
        insens = [safe] * n
        q = sweep[safe]
        result.steps.append((f"uniform {safe} bits", q))
    result.config = current()
    return result
