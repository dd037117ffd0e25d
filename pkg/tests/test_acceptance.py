"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` (the lines are printed even without -s).
"""

import time

import numpy as np
import pytest

from blockgen import expected_packed_size, random_block
from oracles import brute_force_ranks, ranks_from_fronts
from kvcomp.dse import (
    DEFAULT_OPTIONS,
    Individual,
    evaluate_reconstruction,
    fast_non_dominated_sort,
    hypervolume_2d,
    pruning_objectives,
    random_search,
    run_nsga2,
    stage2_bitwidth_search,
)
from kvcomp.prune import prune_mask
from kvcomp.quant import compress_trace, pack_block, requant_ops_oracle, scheme_overhead, unpack_block
from kvcomp.sim import HardwareConfig, MODES, pipeline_ttft, sequential_ttft, simulate
from kvcomp.trace import CompressionConfig, KvTrace, LayerShape, generate_synthetic_trace


@pytest.fixture
def verdict(capsys, request):
    """Print one PASS/FAIL line for the criterion, then assert it."""

    def check(ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {request.node.name}: {detail}")
        assert ok, detail

    return check


def test_scheme_overhead(verdict):
    t0 = time.perf_counter()
    ptq = scheme_overhead("PTQ", 2048, 64)
    pcq = scheme_overhead("PCQ", 2048, 64)
    elapsed = time.perf_counter() - t0
    ratio = ptq.param_count / pcq.param_count
    ok = ratio == 32 and ptq.param_bytes == 32 * pcq.param_bytes and elapsed < 1e-3
    verdict(ok, f"PTQ/PCQ = {ratio:g}x (L=2048, d=64) in {elapsed * 1e6:.0f} us")


def _active_scales(levels, T):
    """[T] scale per token for one channel via breakpoint search."""
    bps = np.array([bp for bp, _, _ in levels])
    scales = np.array([s for _, s, _ in levels])
    return scales[np.searchsorted(bps, np.arange(T), side="right") - 1]


def test_cpq_roundtrip(verdict):
    t0 = time.perf_counter()
    violations = checked = 0
    n_traces = 120
    for seed in range(n_traces):
        rng = np.random.default_rng(seed)
        shape = LayerShape(int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 9)))
        p, d = int(rng.integers(1, 17)), int(rng.integers(1, 49))
        trace = generate_synthetic_trace(shape, p, d, seed, float(rng.uniform(0, 0.5)), float(rng.uniform(1, 8)))
        n = shape.num_layers
        cfg = CompressionConfig(
            tuple(int(x) for x in rng.integers(0, 6, n)), tuple(int(x) for x in rng.integers(0, 6, n)),
            tuple(int(x) for x in rng.integers(2, 9, n)), tuple(int(x) for x in rng.integers(2, 9, n)),
            float(rng.choice([0.0, 0.1, 0.25])),
        )
        ct = compress_trace(trace, cfg)
        for (layer, kv), comp in ct.streams.items():
            x = trace.stream(layer, kv).astype(np.float64)
            rec = comp.reconstruct()
            keep = prune_mask(trace.stream(layer, kv), cfg.threshold(layer, kv))
            violations += int(np.count_nonzero(rec[~keep]))
            s = np.stack([_active_scales(comp.levels[ch], trace.num_tokens) for ch in range(x.shape[1])], axis=1)
            violations += int(np.count_nonzero(keep & (np.abs(rec - x) > s / 2 + 1e-9)))
            checked += x.size
    elapsed = time.perf_counter() - t0
    verdict(violations == 0 and elapsed < 30,
            f"{n_traces} traces, {checked} elements, {violations} violations, {elapsed:.1f} s")


def test_single_quantization(verdict):
    bad = 0
    for seed in range(10):
        trace = generate_synthetic_trace(LayerShape(2, 2, 8), 1 + seed, 30, seed, 0.25, 6)
        ct = compress_trace(trace, CompressionConfig.uniform(2, seed % 4, 2 + seed % 7))
        for comp in ct.streams.values():
            bad += sum(comp.token_quantizations.values()) != trace.num_tokens * trace.channels
            bad += any(v != trace.channels for v in comp.token_quantizations.values())
    # brute force: every decode step touches the whole history again
    brute = 1 + sum(len(range(t)) for t in range(2, 1025))
    naive = requant_ops_oracle(1, 1023, "naive-PCQ")
    hqe = requant_ops_oracle(1, 1023, "HQE")
    ok = bad == 0 and naive == brute == 524_800 and hqe == 1024
    verdict(ok, f"HQE counter == tokens x channels on 10 traces; naive-PCQ {naive} vs HQE {hqe} ops, "
                f"ratio {naive / hqe:.2f}x (reference annotation 384.75x, not asserted)")


def test_hqe_level_boundedness(verdict):
    t0 = time.perf_counter()
    shape, p = LayerShape(12, 12, 64), 128
    means, first, second = [], 0, 0
    for seed in range(3):
        trace = generate_synthetic_trace(shape, p, 1024 - p, seed)
        ct = compress_trace(trace, CompressionConfig.uniform(12, 0, 4))
        means.append(np.mean([c.level_counts().mean() for c in ct.streams.values()]))
        events = sum(c.new_levels_per_token() for c in ct.streams.values())[p:]
        half = len(events) // 2
        first += int(events[:half].sum())
        second += int(events[half:].sum())
    elapsed = time.perf_counter() - t0
    ok = max(means) <= 13 and second <= first and elapsed < 60
    verdict(ok, f"mean levels/channel {max(means):.2f} (<= 13), new levels first/second half of decode "
                f"{first}/{second}, {elapsed:.1f} s")


def test_packing_exactness(verdict):
    rng = np.random.default_rng(2024)
    size_err = roundtrip_err = 0
    for _ in range(1000):
        block = random_block(rng)
        buf = pack_block(block)
        size_err += len(buf) != expected_packed_size(block)
        roundtrip_err += unpack_block(buf) != block
    verdict(size_err == roundtrip_err == 0,
            f"1000 fuzzed blocks: {size_err} size mismatches, {roundtrip_err} roundtrip mismatches")


def _sim_cases():
    # pruning must clear well over 1/8 of the elements and b <= 6 (see the mode ordering analysis)
    for seed, (shape, p, d) in enumerate([
        (LayerShape(2, 2, 8), 12, 20),
        (LayerShape(3, 2, 16), 32, 48),
        (LayerShape(2, 4, 8), 1, 40),
        (LayerShape(12, 12, 64), 128, 128),
    ]):
        trace = generate_synthetic_trace(shape, p, d, seed, 0.25, 4)
        for th, bits in [(4, 2), (8, 4), (16, 6)]:
            yield trace, CompressionConfig.uniform(shape.num_layers, th, bits)


def test_simulator_accounting(verdict):
    failures = []
    n = 0
    for trace, cfg in _sim_cases():
        hw = HardwareConfig.for_shape(trace.shape)
        comp = compress_trace(trace, cfg)
        r = {m: simulate(trace, cfg, hw, m, compressed=comp if m == "cim+cpq" else None) for m in MODES}
        n += 1
        w = hw.weight_bytes_per_layer() * trace.shape.num_layers
        b = {m: r[m].total_bytes for m in MODES}
        if any(sum(x.bytes_by_category.values()) != x.total_bytes for x in r.values()):
            failures.append("conservation")
        if not b["cim+cpq"] <= b["cim+pruning"] <= b["cim-only"] <= b["baseline-reload"]:
            failures.append(f"ordering {b}")
        if r["cim-only"].bytes_by_category["static-weights"] != w:
            failures.append("cim weights")
        if r["baseline-reload"].bytes_by_category["static-weights"] != w * (1 + trace.decode_len):
            failures.append("baseline weights")
    verdict(not failures, f"{n} trace/config pairs x 4 modes; failures: {failures or 'none'}")


def test_zero_skip(verdict):
    bad = 0
    runs = 0
    for trace, cfg in _sim_cases():
        if trace.shape.num_layers > 3:
            continue
        hw = HardwareConfig.for_shape(trace.shape)
        for m in MODES:
            r = simulate(trace, cfg, hw, m)
            runs += 1
            bad += r.macs_performed + r.macs_skipped != r.macs_scheduled
    shape = LayerShape(2, 2, 4)
    zero = KvTrace(shape, 4, 6, np.zeros((2, 2, 10, 2, 4), dtype=np.int8))
    hw = HardwareConfig.for_shape(shape)
    skipped_all = all(
        (r := simulate(zero, CompressionConfig.uniform(2, bits=4), hw, m)).macs_performed == 0
        and r.macs_skipped == r.macs_scheduled > 0
        for m in MODES
    )
    verdict(bad == 0 and skipped_all,
            f"{runs} runs conserve MACs ({bad} violations); all-zero trace skips 100%: {skipped_all}")


def test_dataflow(verdict):
    mismatches = 0
    for s in range(1, 7):
        for p in range(1, 17):
            for t in (1, 3, 8):
                stages = [t] * s
                mismatches += pipeline_ttft(stages, p, 1, False, False) != s * p * t
                mismatches += pipeline_ttft(stages, p, 1, True, False) != (s + p - 1) * t
                mismatches += sequential_ttft(stages, p) != s * p * t
    rng = np.random.default_rng(0)
    out_of_bounds = 0
    for _ in range(2000):
        stages = rng.integers(1, 30, size=int(rng.integers(1, 7))).tolist()
        p, cores = int(rng.integers(1, 33)), int(rng.integers(1, 5))
        speedup = sequential_ttft(stages, p, cores) / pipeline_ttft(stages, p, cores, True, True)
        out_of_bounds += not 1 <= speedup <= min(len(stages) * cores, p)

    trace = generate_synthetic_trace(LayerShape(12, 12, 64), 128, 8, 0, 0.25, 4)
    cfg = CompressionConfig.uniform(12, 8, 4)
    r = simulate(trace, cfg, HardwareConfig.for_shape(trace.shape), "cim+cpq")
    icpi = r.ttft_sequential_cycles / r.ttft_icpi_cycles
    both = r.ttft_sequential_cycles / r.ttft_icpi_icpa_cycles
    verdict(mismatches == 0 and out_of_bounds == 0,
            f"closed forms exhaustive (S<=6, p<=16): {mismatches} mismatches; 2000 random configs within "
            f"[1, min(S*cores, p)]: {out_of_bounds} violations; 12x768 p=128 TTFT speedup ICPI {icpi:.2f}x, "
            f"ICPI+ICPA {both:.2f}x, ICPA over ICPI {both / icpi:.2f}x (reference 1.33x/1.22x, not asserted)")


def test_nsga2(verdict):
    t0 = time.perf_counter()
    grid = [(x, y) for x in range(3) for y in range(3)]
    sort_err = 0
    n_exhaustive = 0
    from itertools import combinations_with_replacement
    for size in range(1, 9):
        for pop in combinations_with_replacement(grid, size):
            n_exhaustive += 1
            sort_err += ranks_from_fronts(fast_non_dominated_sort(pop), size) != brute_force_ranks(pop)
    rng = np.random.default_rng(7)
    for _ in range(1000):
        pop = [tuple(x) for x in rng.integers(0, 6, size=(20, 2)).tolist()]
        sort_err += ranks_from_fronts(fast_non_dominated_sort(pop), 20) != brute_force_ranks(pop)

    wins = 0
    hvs = []
    for seed in range(5):
        trace = generate_synthetic_trace(LayerShape(4, 2, 8), 24, 40, seed)
        ev = pruning_objectives(trace)
        opts = [DEFAULT_OPTIONS] * 8
        run = run_nsga2(20, 10, opts, ev, seed=seed)
        rand = random_search(run.requested, opts, ev, seed=seed + 1000)
        pts_n = list(run.archive.values())
        pts_r = [i.fitness for i in rand]
        ref = (min(q for q, _ in pts_n + pts_r), 0.0)
        hv_n = hypervolume_2d([i.fitness for i in run.front], ref)
        hv_r = hypervolume_2d(pts_r, ref)
        hvs.append((hv_n, hv_r))
        wins += hv_n >= hv_r
    elapsed = time.perf_counter() - t0
    ok = sort_err == 0 and wins >= 4 and elapsed < 300
    verdict(ok, f"sort vs brute force: {n_exhaustive} exhaustive + 1000 random, {sort_err} mismatches; "
                f"front hypervolume >= random search on {wins}/5 seeds "
                f"({', '.join(f'{a:.4f}/{b:.4f}' for a, b in hvs)}); {elapsed:.1f} s")


def test_stage2_key_sensitivity(verdict):
    picks = []
    for seed in range(5):
        trace = generate_synthetic_trace(LayerShape(4, 2, 8), 24, 40, seed, key_std_scale=8.0)
        r = stage2_bitwidth_search(Individual((1,) * 8), lambda c: evaluate_reconstruction(trace, c),
                                   trace, quality_budget=0.05)
        picks.append(r.sensitive)
    verdict(picks == ["key"] * 5, f"sensitive side per seed: {picks}")
