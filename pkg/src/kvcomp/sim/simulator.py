"""Event-driven cycle, traffic and energy model of a layer-per-core accelerator.

Every decoder layer runs on its own core. A core has CIM blocks for the
six weight matrices, one computing engine (CE) per head with zero
detection, and (depending on mode) pruning, quantization and
dequantization units. The KV cache lives off-chip.

Modes:

``baseline-reload``  weights and raw KV are re-fetched for every forward pass
``cim-only``         weights resident in CIM, raw int8 KV off-chip
``cim+pruning``      KV stored as index bitmap + kept int8 values
``cim+cpq``          KV stored as CKV1 sections (index, label, b-bit payload)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import InvalidArgumentError
from ..prune import prune_mask
from ..quant.stream import CompressedTrace, compress_trace
from ..trace import CompressionConfig, KvTrace
from .hardware import MODULES, HardwareConfig
from .schedule import multicore_finish_times, schedule_workload

MODES = ("baseline-reload", "cim-only", "cim+pruning", "cim+cpq")
CATEGORIES = ("static-weights", "kv-payload", "index", "label", "quant-params", "activations")
ENERGY_KEYS = MODULES + ("hbm",)


@dataclass
class SimReport:
    mode: str
    icpi: bool
    icpa: bool
    num_layers: int
    num_heads: int
    head_dim: int
    prefill_len: int
    decode_len: int
    output_tokens: int
    total_cycles: int
    ttft_cycles: int
    ttft_sequential_cycles: int
    ttft_icpi_cycles: int
    ttft_icpi_icpa_cycles: int
    decode_cycles: int
    runtime_s: float
    tokens_per_s: float
    tokens_per_j: float
    bytes_by_category: dict
    total_bytes: int
    energy_mj: dict
    total_energy_mj: float
    macs_scheduled: int
    macs_performed: int
    macs_skipped: int
    avg_pruning_ratio: float
    level_table_bytes: int
    diagnostics: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimReport":
        return cls(**d)

    @property
    def ttft_speedup(self) -> float:
        return self.ttft_sequential_cycles / self.ttft_cycles


@dataclass
class _LayerView:
    """What one core sees of its Key and Value streams."""

    kept: tuple          # per kv: int64[T]
    nonzero: tuple       # per kv: int64[T]
    prefill_nz: tuple    # per kv: bool[T, C] operands the CE sees during prefill
    decode_nz: tuple     # per kv: bool[T, C] operands the CE sees during decode
    bits: tuple
    table_final: int = 0


def _views(trace: KvTrace, cfg: CompressionConfig, mode: str, compressed: CompressedTrace | None):
    views = []
    for layer in range(trace.shape.num_layers):
        kept, nonzero, pre, dec, bits = [], [], [], [], []
        t_final = 0
        for kv in (0, 1):
            x = trace.stream(layer, kv)
            if mode in ("baseline-reload", "cim-only"):
                nz = x != 0
                kept.append(np.full(x.shape[0], x.shape[1], dtype=np.int64))
                nonzero.append(nz.sum(axis=1))
                pre.append(nz)
                dec.append(nz)
                bits.append(8)
            elif mode == "cim+pruning":
                m = prune_mask(x, cfg.threshold(layer, kv))
                kept.append(m.sum(axis=1).astype(np.int64))
                nonzero.append(kept[-1])
                pre.append(m)
                dec.append(m)
                bits.append(8)
            else:
                s = compressed.stream(layer, kv)
                kept.append(s.kept_per_token())
                nonzero.append(s.nonzero_per_token())
                pre.append(s.index_matrix())
                dec.append(s.nonzero_matrix())
                bits.append(s.bits)
                t_final += s.level_table_bytes()
        views.append(_LayerView(tuple(kept), tuple(nonzero), tuple(pre), tuple(dec), tuple(bits), t_final))
    return views


def kv_transfer_bytes(mode: str, channels: int, bits: int, cum_kept, cum_nz, start, end) -> dict:
    """Bytes for moving tokens ``[start, end)`` of one stream, per category.

    ``cum_kept``/``cum_nz`` are prefix sums with a leading 0. Each section
    of a transfer is rounded up to whole bytes. Works elementwise on arrays.
    """
    start = np.asarray(start, dtype=np.int64)
    end = np.asarray(end, dtype=np.int64)
    n = (end - start) * channels
    kept = cum_kept[end] - cum_kept[start]
    nz = cum_nz[end] - cum_nz[start]
    zero = np.zeros_like(n)
    if mode in ("baseline-reload", "cim-only"):
        return {"kv-payload": n, "index": zero, "label": zero}
    index = -(-n // 8)
    if mode == "cim+pruning":
        return {"kv-payload": kept, "index": index, "label": zero}
    return {"kv-payload": -(-nz * bits // 8), "index": index, "label": -(-kept // 8)}


def _macs(qnz: np.ndarray, view_k: np.ndarray, view_v: np.ndarray, rows: slice):
    """Performed score and AV MACs for the queries in ``rows``.

    Query t attends to history rows 0..t. A score MAC is skipped if either
    the query or the key element is zero; an AV MAC is skipped if the value
    element is zero.
    """
    ck = np.cumsum(view_k, axis=0, dtype=np.int64)[rows]
    cv = np.cumsum(view_v, axis=0, dtype=np.int64)[rows]
    return int((qnz[rows] * ck).sum()) + int(cv.sum())


def simulate(
    trace: KvTrace,
    cfg: CompressionConfig,
    hw: HardwareConfig,
    mode: str = "cim+cpq",
    icpi: bool = True,
    icpa: bool = True,
    compressed: CompressedTrace | None = None,
) -> SimReport:
    if mode not in MODES:
        raise InvalidArgumentError(f"unknown mode {mode!r}; expected one of {MODES}")
    shape = trace.shape
    hw.check_shape(shape)
    cfg.check_shape(shape)
    L, H, D = shape.num_layers, shape.num_heads, shape.head_dim
    C = shape.hidden_dim
    p, d = trace.prefill_len, trace.decode_len
    T = p + d
    f = hw.frequency_hz
    bpc = hw.bytes_per_cycle
    pruning = mode in ("cim+pruning", "cim+cpq")
    cpq = mode == "cim+cpq"
    diagnostics = []

    if cpq and compressed is None:
        compressed = compress_trace(trace, cfg)
    views = _views(trace, cfg, mode, compressed)

    # -- per-token stage costs (identical across cores) -----------------------
    s_qkv = max(hw.cim_cycles(b) for b in ("Q", "K", "V"))
    s_out, s_fc1, s_fc2 = hw.cim_cycles("Out"), hw.cim_cycles("FC1"), hw.cim_cycles("FC2")
    cim_per_token = s_qkv + s_out + s_fc1 + s_fc2
    pu = -(-C // hw.pu_parallelism) if pruning else 0
    qu_tok = -(-C // hw.qu_parallelism) if cpq else 0
    ctx = np.arange(1, T + 1, dtype=np.int64)  # keys attended by query t
    ce = np.array([2 * schedule_workload(int(n) * D, hw.macs_per_ce).passes for n in ctx], dtype=np.int64)
    softmax = hw.softmax_cycles_per_token

    rows = [np.full(p, s_qkv)]
    if pruning:
        rows.append(np.full(p, pu + qu_tok))
    rows += [ce[:p] + softmax, np.full(p, s_out), np.full(p, s_fc1), np.full(p, s_fc2)]
    stage_costs = np.stack(rows).astype(np.int64)

    def ttft_for(a, b):
        return int(multicore_finish_times([stage_costs] * L, a, b)[-1][-1])

    weight_layer = hw.weight_bytes_per_layer()
    reload_cycles = int(np.ceil(weight_layer / bpc)) if mode == "baseline-reload" else 0
    ttft_variants = {(False, False): ttft_for(False, False), (True, False): ttft_for(True, False),
                     (True, True): ttft_for(True, True)}
    if (icpi, icpa) not in ttft_variants:
        ttft_variants[(icpi, icpa)] = ttft_for(icpi, icpa)
    # a reloading platform fetches each layer's weights before its prefill pass
    ttft_variants = {k: v + L * reload_cycles for k, v in ttft_variants.items()}
    ttft = ttft_variants[(icpi, icpa)]

    # -- traffic and decode timing -------------------------------------------
    cat = dict.fromkeys(CATEGORIES, 0)
    passes = 1 + d
    cat["static-weights"] = weight_layer * L * (passes if mode == "baseline-reload" else 1)
    cat["activations"] = (T * 2 * C * L) if mode == "baseline-reload" else T * 2 * C

    steps = np.arange(p, T, dtype=np.int64)  # decode pass j feeds token p + j
    decode_layer_cycles = np.zeros(d, dtype=np.int64)
    dqu_total = 0
    macs_sched = macs_perf = 0
    level_bytes = 0
    qu_post = -(-(p * C) // hw.qu_parallelism) if cpq else 0
    for layer, v in enumerate(views):
        read = np.zeros(d, dtype=np.int64)
        nz_hist = np.zeros(d, dtype=np.int64)
        for kv in (0, 1):
            ck = np.concatenate([[0], np.cumsum(v.kept[kv])])
            cn = np.concatenate([[0], np.cumsum(v.nonzero[kv])])
            b = v.bits[kv]
            pre = kv_transfer_bytes(mode, C, b, ck, cn, 0, p)
            wr = kv_transfer_bytes(mode, C, b, ck, cn, steps, steps + 1)
            rd = kv_transfer_bytes(mode, C, b, ck, cn, np.zeros_like(steps), steps)
            for key in ("kv-payload", "index", "label"):
                cat[key] += int(pre[key]) + int(wr[key].sum()) + int(rd[key].sum())
                read += rd[key]
            nz_hist += cn[steps]
        if cpq:
            spill = max(0, v.table_final - hw.sz_buffer_bytes)
            # tables live in the SZ buffer; only the overflow goes off-chip
            cat["quant-params"] += spill * (1 + d)
            read += spill
            level_bytes += v.table_final
            if spill:
                diagnostics.append(
                    f"layer {layer}: level tables {v.table_final} B exceed SZ buffer "
                    f"{hw.sz_buffer_bytes} B; {spill} B spilled off-chip"
                )
        hbm = np.ceil(read / bpc).astype(np.int64)
        dqu = -(-nz_hist // (hw.dqu_elements_per_cycle_per_ce * hw.num_ces)) if cpq else np.zeros(d, dtype=np.int64)
        dqu_total += int(dqu.sum())
        s3 = np.maximum(np.maximum(hbm, dqu), ce[p:]) + softmax
        decode_layer_cycles += cim_per_token + pu + qu_tok + s3 + reload_cycles

        qnz = trace.stream(layer, 0) != 0
        macs_sched += 2 * int(ctx.sum()) * C
        macs_perf += _macs(qnz, v.prefill_nz[0], v.prefill_nz[1], slice(0, p))
        macs_perf += _macs(qnz, v.decode_nz[0], v.decode_nz[1], slice(p, T))

    working_set = 2 * p * C + 2 * C
    if working_set > hw.global_buffer_bytes:
        diagnostics.append(
            f"global buffer overflow: prefill working set {working_set} B exceeds {hw.global_buffer_bytes} B per core"
        )

    decode_cycles = int(decode_layer_cycles.sum())
    total_cycles = ttft + decode_cycles
    runtime = total_cycles / f
    total_bytes = int(sum(cat.values()))

    # -- energy ---------------------------------------------------------------
    ce_cycles = L * int(ce.sum())
    activity = macs_perf / macs_sched if macs_sched else 0.0
    ce_factor = hw.ce_static_fraction + (1 - hw.ce_static_fraction) * activity
    cycles = {
        "dcim": L * T * cim_per_token,
        "ce": ce_cycles * ce_factor,
        "pu": L * T * pu,
        "qu": L * (T * qu_tok + qu_post),
        "dqu": dqu_total,
        "buffers": L * total_cycles,
        "others": L * total_cycles,
    }
    energy = {m: hw.power_mw[m] * cycles[m] / f for m in MODULES}
    energy["hbm"] = total_bytes * hw.hbm_energy_pj_per_byte * 1e-9
    total_energy = float(sum(energy.values()))

    out_tokens = 1 + d
    return SimReport(
        mode=mode,
        icpi=bool(icpi),
        icpa=bool(icpa),
        num_layers=L,
        num_heads=H,
        head_dim=D,
        prefill_len=p,
        decode_len=d,
        output_tokens=out_tokens,
        total_cycles=int(total_cycles),
        ttft_cycles=int(ttft),
        ttft_sequential_cycles=ttft_variants[(False, False)],
        ttft_icpi_cycles=ttft_variants[(True, False)],
        ttft_icpi_icpa_cycles=ttft_variants[(True, True)],
        decode_cycles=decode_cycles,
        runtime_s=runtime,
        tokens_per_s=out_tokens / runtime,
        tokens_per_j=out_tokens / (total_energy * 1e-3) if total_energy > 0 else float("inf"),
        bytes_by_category={k: int(v) for k, v in cat.items()},
        total_bytes=total_bytes,
        energy_mj={k: float(energy[k]) for k in ENERGY_KEYS},
        total_energy_mj=total_energy,
        macs_scheduled=int(macs_sched),
        macs_performed=int(macs_perf),
        macs_skipped=int(macs_sched - macs_perf),
        avg_pruning_ratio=_pruning_ratio(views, T, C),
        level_table_bytes=int(level_bytes),
        diagnostics=diagnostics,
    )


def _pruning_ratio(views, T, C) -> float:
    kept = sum(int(k.sum()) for v in views for k in v.kept)
    return 1.0 - kept / (len(views) * 2 * T * C)
