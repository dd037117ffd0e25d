"""Quality evaluators: attention-output reconstruction error and external commands."""

from __future__ import annotations

import json
import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import EvaluatorError, InvalidArgumentError
from ..prune import prune_mask
from ..quant.stream import compress_trace
from ..trace import CompressionConfig, KvTrace

# int8 code -> real activation units
DEFAULT_VALUE_SCALE = 1 / 16


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v with a causal mask; inputs ``[heads, tokens, d]``."""
    d = q.shape[-1]
    scores = np.einsum("htd,hsd->hts", q, k) / math.sqrt(d)
    t = scores.shape[-1]
    scores = np.where(np.tril(np.ones((t, t), dtype=bool)), scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v


def _heads(x: np.ndarray) -> np.ndarray:
    # [tokens, heads, d] -> [heads, tokens, d]
    return np.ascontiguousarray(np.swapaxes(x, 0, 1), dtype=np.float64)


def reconstructed_kv(trace: KvTrace, cfg: CompressionConfig, quantize: bool = True) -> np.ndarray:
    """Float ``[layers, 2, tokens, heads, d]`` KV after pruning (and quantization if asked)."""
    cfg.check_shape(trace.shape)
    if quantize:
        return compress_trace(trace, cfg).reconstruct()
    out = trace.data.astype(np.float64)
    for layer in range(trace.shape.num_layers):
        for kv in (0, 1):
            out[layer, kv][~prune_mask(trace.data[layer, kv], cfg.threshold(layer, kv))] = 0.0
    return out


def synthetic_queries(trace: KvTrace, seed: int = 0, value_scale: float = DEFAULT_VALUE_SCALE) -> np.ndarray:
    """Gaussian queries ``[layers, tokens, heads, d]`` with each channel's spread matched to its keys.

    A token's own key is a poor query: it always scores itself highest and
    saturates the softmax, hiding key errors.
    """
    rng = np.random.default_rng(seed)
    keys = trace.data[:, 0].astype(np.float64) * value_scale
    std = keys.std(axis=1, keepdims=True)
    return rng.standard_normal(keys.shape) * std


def evaluate_reconstruction(
    trace: KvTrace,
    cfg: CompressionConfig,
    quantize: bool = True,
    value_scale: float = DEFAULT_VALUE_SCALE,
    query_seed: int = 0,
) -> float:
    """Negative mean relative error of attention outputs, original vs compressed KV.

    Averaged over layers, heads and query tokens. Deterministic for a given
    ``query_seed``.
    """
    rec = reconstructed_kv(trace, cfg, quantize) * value_scale
    ref = trace.data.astype(np.float64) * value_scale
    queries = synthetic_queries(trace, query_seed, value_scale)
    errs = []
    for layer in range(trace.shape.num_layers):
        q = _heads(queries[layer])
        o_ref = causal_attention(q, _heads(ref[layer, 0]), _heads(ref[layer, 1]))
        o_rec = causal_attention(q, _heads(rec[layer, 0]), _heads(rec[layer, 1]))
        num = np.linalg.norm(o_ref - o_rec, axis=-1)
        den = np.linalg.norm(o_ref, axis=-1)
        errs.append(num / np.maximum(den, 1e-12))
    return -float(np.mean(errs))


def avg_pruning_ratio(trace: KvTrace, cfg: CompressionConfig) -> float:
    total = 0
    for layer in range(trace.shape.num_layers):
        for kv in (0, 1):
            total += int(np.count_nonzero(~prune_mask(trace.data[layer, kv], cfg.threshold(layer, kv))))
    return total / trace.data.size


def genome_to_config(genome: Sequence[int], bits_k=8, bits_v=8, margin: float = 0.1) -> CompressionConfig:
    """Genome layout is ``[th_k0, th_v0, th_k1, th_v1, ...]``."""
    if len(genome) % 2:
        raise InvalidArgumentError("genome length must be even (Key and Value per layer)")
    n = len(genome) // 2
    bk = (bits_k,) * n if isinstance(bits_k, int) else tuple(bits_k)
    bv = (bits_v,) * n if isinstance(bits_v, int) else tuple(bits_v)
    return CompressionConfig(tuple(genome[0::2]), tuple(genome[1::2]), bk, bv, margin)


def config_to_genome(cfg: CompressionConfig) -> tuple:
    return tuple(x for pair in zip(cfg.th_k, cfg.th_v) for x in pair)


def pruning_objectives(trace: KvTrace, quantize: bool = False, bits: int = 8, **kw) -> Callable:
    """Stage-1 fitness: genome -> (quality, average pruning ratio)."""

    def evaluate(genome):
        cfg = genome_to_config(genome, bits, bits)
        return evaluate_reconstruction(trace, cfg, quantize, **kw), avg_pruning_ratio(trace, cfg)

    return evaluate


@dataclass
class EvaluatorSpec:
    kind: str = "reconstruction"
    trace: KvTrace | None = None
    quantize: bool = True
    command: Sequence[str] | str = field(default_factory=list)
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.kind not in ("reconstruction", "external"):
            raise InvalidArgumentError(f"unknown evaluator kind {self.kind!r}")
        if self.kind == "reconstruction" and self.trace is None:
            raise InvalidArgumentError("reconstruction evaluator needs a trace")
        if self.kind == "external" and not self.command:
            raise InvalidArgumentError("external evaluator needs a command")


def make_evaluator(spec: EvaluatorSpec) -> Callable[[CompressionConfig], float]:
    if spec.kind == "reconstruction":
        return lambda cfg: evaluate_reconstruction(spec.trace, cfg, spec.quantize)
    return lambda cfg: run_external_evaluator(spec, cfg)


def run_external_evaluator(spec: EvaluatorSpec, cfg: CompressionConfig) -> float:
    """Run ``spec.command`` on a JSON config file and read one decimal back.

    ``{input}`` and ``{output}`` in the command are replaced by the file
    paths; without placeholders the two paths are appended as arguments.
    """
    argv = shlex.split(spec.command) if isinstance(spec.command, str) else list(spec.command)
    with tempfile.TemporaryDirectory(prefix="kvcomp-eval-") as tmp:
        inp = os.path.join(tmp, "config.json")
        out = os.path.join(tmp, "quality.txt")
        with open(inp, "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2)
        if any("{input}" in a or "{output}" in a for a in argv):
            argv = [a.replace("{input}", inp).replace("{output}", out) for a in argv]
        else:
            argv = argv + [inp, out]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=spec.timeout_s)
        except subprocess.TimeoutExpired:
            raise EvaluatorError(f"evaluator timed out after {spec.timeout_s} s") from None
        except OSError as exc:
            raise EvaluatorError(f"cannot run evaluator: {exc}") from None
        if proc.returncode != 0:
            raise EvaluatorError(f"evaluator exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
        try:
            with open(out) as fh:
                text = fh.read().strip()
        except FileNotFoundError:
            raise EvaluatorError("evaluator did not write its output file") from None
    lines = text.splitlines()
    if len(lines) != 1:
        raise EvaluatorError(f"expected one line of output, got {len(lines)}")
    try:
        value = float(lines[0])
    except ValueError:
        raise EvaluatorError(f"malformed quality value {lines[0]!r}") from None
    if not math.isfinite(value):
        raise EvaluatorError(f"non-finite quality value {lines[0]!r}")
    return value
