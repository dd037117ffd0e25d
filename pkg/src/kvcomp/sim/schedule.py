"""Computing-engine workload scheduling and the prefill stage-pipeline timing model."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import InvalidArgumentError


class WorkloadCase(enum.Enum):
    SUB = "Sub"
    EXACT_MULTIPLE = "ExactMultiple"
    MULTIPLE_PLUS_FRACTION = "MultiplePlusFraction"


@dataclass(frozen=True)
class WorkloadSchedule:
    n: int
    capability: int
    case: WorkloadCase
    full_passes: int
    fraction: float

    @property
    def passes(self) -> int:
        return -(-self.n // self.capability)


def schedule_workload(n: int, capability: int) -> WorkloadSchedule:
    """Classify an input vector of ``n`` MACs against a CE that does ``capability`` per pass."""
    if n < 1 or capability < 1:
        raise InvalidArgumentError("n and capability must be >= 1")
    x, rem = divmod(n, capability)
    if x == 0:
        return WorkloadSchedule(n, capability, WorkloadCase.SUB, 0, n / capability)
    if rem == 0:
        return WorkloadSchedule(n, capability, WorkloadCase.EXACT_MULTIPLE, x, 0.0)
    return WorkloadSchedule(n, capability, WorkloadCase.MULTIPLE_PLUS_FRACTION, x, rem / capability)


def core_finish_times(costs: np.ndarray, ready: np.ndarray, icpi: bool) -> np.ndarray:
    """Completion cycle of every token on one core.

    ``costs`` is ``[stages, tokens]``; ``ready[t]`` is when token t's input
    arrives. Without the intra-core pipeline a token occupies the whole core;
    with it every stage is its own resource.
    """
    stages, tokens = costs.shape
    finish = np.zeros(tokens, dtype=np.int64)
    if not icpi:
        busy = 0
        totals = costs.sum(axis=0)
        for t in range(tokens):
            busy = max(busy, int(ready[t])) + int(totals[t])
            finish[t] = busy
        return finish
    prev = np.asarray(ready, dtype=np.int64).copy()
    for s in range(stages):
        free = 0
        row = costs[s]
        for t in range(tokens):
            free = max(free, int(prev[t])) + int(row[t])
            finish[t] = free
        prev = finish.copy()
    return prev


def multicore_finish_times(per_core_costs: Sequence[np.ndarray], icpi: bool, icpa: bool) -> list:
    """Token completion times on each core of a layer-per-core chain.

    With inter-core parallelism core i+1 starts token t as soon as core i
    finishes it; otherwise core i+1 waits for all of core i's tokens.
    """
    out = []
    ready = None
    for costs in per_core_costs:
        costs = np.asarray(costs, dtype=np.int64)
        if ready is None:
            ready = np.zeros(costs.shape[1], dtype=np.int64)
        finish = core_finish_times(costs, ready, icpi)
        out.append(finish)
        ready = finish.copy() if icpa else np.full_like(finish, finish.max() if finish.size else 0)
    return out


def pipeline_ttft(stages, prefill_len: int, num_cores: int = 1, icpi: bool = True, icpa: bool = True) -> int:
    """Cycle at which the last prefill token leaves the last core.

    ``stages`` is either one cost per stage (identical for every token and
    core) or a ``[stages, prefill_len]`` matrix of per-token costs.
    """
    if prefill_len < 1 or num_cores < 1:
        raise InvalidArgumentError("prefill_len and num_cores must be >= 1")
    arr = np.asarray(stages, dtype=np.int64)
    if arr.ndim == 1:
        arr = np.repeat(arr[:, None], prefill_len, axis=1)
    if arr.shape[1] != prefill_len or arr.shape[0] < 1:
        raise InvalidArgumentError("stage matrix must be [stages, prefill_len]")
    if np.any(arr < 1):
        raise InvalidArgumentError("stage costs must be >= 1")
    finish = multicore_finish_times([arr] * num_cores, icpi, icpa)
    return int(finish[-1][-1])


def sequential_ttft(stages: Sequence[int], prefill_len: int, num_cores: int = 1) -> int:
    return prefill_len * int(np.sum(stages)) * num_cores
