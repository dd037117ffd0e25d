"""Per-channel hierarchical quantization state and the scalar QU operations.

A channel starts in the prefill phase where the max-min finder tracks the
range of its kept (non-pruned) elements. Finalizing the prefill creates
level 0; every later decode value is checked against the active level's
tolerance range and, when it falls outside, a wider level is appended whose
breakpoint is that token's index. Each token is quantized exactly once with
whatever level is active for it.

These functions operate on one channel and are kept deliberately simple;
:mod:`kvcomp.quant.stream` is the vectorized equivalent used in bulk.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

from ..errors import CorruptionError, InvalidArgumentError, OrderingError, StateMachineError
from ..prune import PrunedTokens

MIN_SENTINEL = 127
MAX_SENTINEL = -128


class QuPhase(enum.Enum):
    IDLE = "idle"
    PREFILL = "prefill"
    QUANT = "quant"
    DECODE = "decode"


_TRANSITIONS = {
    QuPhase.IDLE: {QuPhase.PREFILL},
    QuPhase.PREFILL: {QuPhase.QUANT},
    QuPhase.QUANT: {QuPhase.DECODE},
    QuPhase.DECODE: {QuPhase.DECODE, QuPhase.IDLE},
}


class QuScheduler:
    """Four-state FSM sequencing the max-min finder, non-zero quantizer and channel monitor."""

    def __init__(self, state: QuPhase = QuPhase.IDLE):
        self.state = state
        self.history = [state]

    def advance(self, target: QuPhase) -> QuPhase:
        check_transition(self.state, target)
        self.state = target
        self.history.append(target)
        return target

    def require(self, *allowed: QuPhase):
        if self.state not in allowed:
            names = "/".join(p.value for p in allowed)
            raise StateMachineError(f"operation requires {names} state, scheduler is {self.state.value}")


def check_transition(current: QuPhase, target: QuPhase):
    if target not in _TRANSITIONS[current]:
        raise StateMachineError(f"illegal QU transition {current.value} -> {target.value}")


def round_half_away(x):
    """Round half away from zero (platform independent, unlike banker's rounding)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, np.floor(x + 0.5), -np.floor(-x + 0.5))


def f32_ceil(x):
    """Smallest float32 value >= x, returned as float64."""
    x = np.asarray(x, dtype=np.float64)
    y = x.astype(np.float32)
    y = np.where(y.astype(np.float64) < x, np.nextafter(y, np.float32(np.inf)), y)
    return y.astype(np.float64)


def level_params(r_min, r_max, bits: int):
    """Scale, zero point and tolerance range for a covered range ``[r_min, r_max]``.

    The range must already contain zero. The scale is rounded up to float32 so
    it survives the container format unchanged; the tolerance range is the
    quantization grid widened by half a step on each side, which is exactly
    the set of values reproducible within ``s/2``. Works elementwise.
    """
    qmax = (1 << bits) - 1
    r_min = np.asarray(r_min, dtype=np.float64)
    r_max = np.asarray(r_max, dtype=np.float64)
    s = f32_ceil((r_max - r_min) / qmax)
    z = np.clip(round_half_away(-r_min / s), 0, qmax).astype(np.int64)
    tr_lo = (-z - 0.5) * s
    tr_hi = (qmax - z + 0.5) * s
    return s, z, tr_lo, tr_hi


@dataclass(frozen=True)
class QuantLevel:
    scale: float
    zero_point: int
    breakpoint: int
    r_min: float
    r_max: float
    tr_lo: float
    tr_hi: float

    @classmethod
    def from_range(cls, r_min: float, r_max: float, bits: int, breakpoint: int) -> "QuantLevel":
        s, z, lo, hi = level_params(r_min, r_max, bits)
        return cls(float(s), int(z), int(breakpoint), float(r_min), float(r_max), float(lo), float(hi))

    @classmethod
    def dummy(cls, breakpoint: int) -> "QuantLevel":
        # all-pruned channel: never used for a payload code
        return cls(1.0, 0, int(breakpoint), 0.0, 0.0, -0.5, 0.5)

    @property
    def tolerance(self) -> tuple:
        return (self.tr_lo, self.tr_hi)

    def contains(self, value: float) -> bool:
        return self.tr_lo <= value <= self.tr_hi

    def quantize(self, x, bits: int):
        """Centered code ``clamp(round(x/s) + z, 0, 2^b-1) - z``."""
        qmax = (1 << bits) - 1
        q = np.clip(round_half_away(np.asarray(x, dtype=np.float64) / self.scale) + self.zero_point, 0, qmax)
        return q.astype(np.int64) - self.zero_point


@dataclass(frozen=True)
class ChannelQuantState:
    bits: int = 8
    margin: float = 0.1
    running_min: int = MIN_SENTINEL
    running_max: int = MAX_SENTINEL
    levels: tuple = ()
    phase: QuPhase = QuPhase.PREFILL
    tokens_seen: int = 0
    last_token: int = -1
    quantized_tokens: int = 0
    quant_log: tuple = field(default=(), repr=False)

    @property
    def tolerance(self):
        return self.levels[-1].tolerance if self.levels else None

    @property
    def active_level(self) -> QuantLevel:
        if not self.levels:
            raise StateMachineError("no quantization level is active")
        return self.levels[-1]

    @property
    def is_degenerate(self) -> bool:
        return self.running_min > self.running_max

    def _to(self, phase: QuPhase, **changes) -> "ChannelQuantState":
        check_transition(self.phase, phase)
        return dataclasses.replace(self, phase=phase, **changes)


def _require(state: ChannelQuantState, *allowed: QuPhase):
    if state.phase not in allowed:
        names = "/".join(p.value for p in allowed)
        raise StateMachineError(f"operation requires {names} state, channel is {state.phase.value}")


def mmf_update(state: ChannelQuantState, index, tokens) -> ChannelQuantState:
    """Fold kept values into the running range; ``tokens`` are the non-zero data for the set index bits."""
    _require(state, QuPhase.PREFILL)
    index = np.asarray(index, dtype=bool).reshape(-1)
    data = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if int(index.sum()) != data.size:
        raise CorruptionError(f"index selects {int(index.sum())} elements but {data.size} were given")
    lo, hi = state.running_min, state.running_max
    if data.size:
        lo = min(lo, int(data.min()))
        hi = max(hi, int(data.max()))
    return dataclasses.replace(
        state, running_min=lo, running_max=hi, tokens_seen=state.tokens_seen + index.size
    )


def finalize_prefill(state: ChannelQuantState, bits: int | None = None, margin: float | None = None):
    """Create level 0 from the prefill range and move to the quant phase."""
    _require(state, QuPhase.PREFILL)
    bits = state.bits if bits is None else bits
    margin = state.margin if margin is None else margin
    if not 2 <= bits <= 8:
        raise InvalidArgumentError(f"bit-width must be in [2, 8], got {bits}")
    # level 0 covers the stream from its first token
    if state.is_degenerate:
        level = QuantLevel.dummy(0)
    else:
        level = QuantLevel.from_range(min(state.running_min, 0), max(state.running_max, 0), bits, 0)
    return state._to(QuPhase.QUANT, bits=bits, margin=margin, levels=(level,), last_token=state.tokens_seen - 1)


def nzq_quantize(state: ChannelQuantState, pruned: PrunedTokens, token_start: int | None = None):
    """Quantize the kept values of ``pruned`` with the active level.

    Returns ``(codes, label, state')`` where ``codes`` are the non-zero centered
    codes in scan order and ``label`` marks which kept elements produced one.
    The first call (the prefill tokens) moves the channel to the decode phase.
    """
    _require(state, QuPhase.QUANT, QuPhase.DECODE)
    pruned.check()
    level = state.active_level
    centered = level.quantize(pruned.kept_values, state.bits)
    label = centered != 0
    start = state.quantized_tokens if token_start is None else token_start
    log = state.quant_log + tuple(range(start, start + pruned.original_len))
    new = state._to(QuPhase.DECODE, quantized_tokens=state.quantized_tokens + pruned.original_len, quant_log=log)
    return centered[label], label, new


def cm_observe(state: ChannelQuantState, token_value, token_index: int, bits: int | None = None, margin: float | None = None):
    """Check a kept decode value against the tolerance range; extend the hierarchy if needed.

    Returns ``(state', level_used)``. The triggering value is itself quantized
    with the new level.
    """
    _require(state, QuPhase.DECODE)
    bits = state.bits if bits is None else bits
    margin = state.margin if margin is None else margin
    if token_index <= state.last_token:
        raise OrderingError(f"token {token_index} observed after token {state.last_token}")
    level = state.active_level
    x = float(token_value)
    if level.contains(x):
        return dataclasses.replace(state, last_token=token_index), level
    new_level = extend_level(level, x, bits, margin, token_index)
    return (
        dataclasses.replace(state, levels=state.levels + (new_level,), last_token=token_index, bits=bits, margin=margin),
        new_level,
    )


def extend_level(level: QuantLevel, x: float, bits: int, margin: float, breakpoint: int) -> QuantLevel:
    lo = min(level.r_min, x)
    hi = max(level.r_max, x)
    width = hi - lo
    if x > level.r_max:
        hi += margin * width
    if x < level.r_min:
        lo -= margin * width
    return QuantLevel.from_range(lo, hi, bits, breakpoint)
