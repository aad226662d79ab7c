"""Kernel benchmark: correctness gate, timings, thread invariance and accounting.

The naive/optimized agreement check runs first; a mismatch stops the
benchmark before any timing is reported.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import deform, network, tensor

FULL_PARAMS_REFERENCE = 55.8e6
FULL_FLOPS_REFERENCE = 635.8e9
AGREEMENT_TOL = 1e-10


class AgreementError(AssertionError):
    def __init__(self, diffs: Dict[str, float]):
        self.diffs = diffs
        worst = max(diffs, key=diffs.get)
        super().__init__(f"naive/optimized mismatch: max abs diff {diffs[worst]:.3e} in {worst} "
                         f"(tolerance {AGREEMENT_TOL:g})")


def random_instance(seed: int, n: int, c: int, size: int, dtype=np.float64):
    rng = tensor.generator(seed)
    spatial = (size,) * 3
    K = deform.DEFAULT_GRID.K
    x = rng.standard_normal((n, c) + spatial).astype(dtype)
    w = rng.standard_normal((c, K)).astype(dtype)
    off = (rng.uniform(-2.5, 2.5, (n, 3 * K) + spatial)).astype(dtype)
    b = rng.standard_normal(c).astype(dtype)
    gy = rng.standard_normal((n, c) + spatial).astype(dtype)
    return x, w, off, b, gy


def agreement(seed: int = 0, trials: int = 3) -> Dict[str, float]:
    """Max abs naive-vs-fast difference for every forward/backward output."""
    diffs = {"forward": 0.0, "grad_input": 0.0, "grad_weight": 0.0, "grad_offsets": 0.0, "grad_bias": 0.0}
    for t in range(trials):
        x, w, off, b, gy = random_instance(seed + t, 2, 5, 6)
        mask = deform.PlaneMask.from_name(["tri-planar", "x-y", "x-z", "y-z"][t % 4])
        fast = [deform.ddc_forward(x, w, off, b, mask=mask)] + list(deform.ddc_backward(gy, x, w, off, mask=mask))
        slow = [deform.ddc_forward(x, w, off, b, mask=mask, naive=True)] + list(
            deform.ddc_backward(gy, x, w, off, mask=mask, naive=True))
        for key, a, r in zip(diffs, fast, slow):
            diffs[key] = max(diffs[key], float(np.abs(a - r).max()))
    if max(diffs.values()) > AGREEMENT_TOL:
        raise AgreementError(diffs)
    return diffs


def _time(fn, repeat: int) -> float:
    fn()  # warm-up, includes compilation
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def thread_invariance(threads: int, seed: int = 0, size: int = 12, channels: int = 16) -> bool:
    """Fast-path outputs at 1 thread and at ``threads`` threads are bit-identical."""
    x, w, off, b, gy = random_instance(seed, 2, channels, size)
    prev = deform.get_threads()
    outs = []
    try:
        for n in (1, threads):
            deform.set_threads(n)
            res = [deform.ddc_forward(x, w, off, b)] + list(deform.ddc_backward(gy, x, w, off))
            outs.append([r.tobytes() for r in res])
    finally:
        deform.set_threads(prev)
    return outs[0] == outs[1]


def run(cfg: network.NetworkConfig, threads: int, repeat: int = 3, size: int = 32, channels: int = 16,
        seed: int = 0, naive: bool = True) -> dict:
    """Full benchmark report; raises ``AgreementError`` before timing on mismatch."""
    report = {"agreement": agreement(seed), "threads": threads}
    prev = deform.get_threads()
    deform.set_threads(threads)
    report["threads_effective"] = deform.get_threads()
    try:
        x, w, off, b, gy = random_instance(seed, 1, channels, size)
        voxels = x.shape[0] * size**3
        timings = {
            "fast_forward_s": _time(lambda: deform.ddc_forward(x, w, off, b), repeat),
            "fast_backward_s": _time(lambda: deform.ddc_backward(gy, x, w, off), repeat),
        }
        if naive:
            timings["naive_forward_s"] = _time(lambda: deform.ddc_forward(x, w, off, b, naive=True), 1)
            timings["naive_backward_s"] = _time(lambda: deform.ddc_backward(gy, x, w, off, naive=True), 1)
            timings["speedup_forward"] = timings["naive_forward_s"] / timings["fast_forward_s"]
            timings["speedup_backward"] = timings["naive_backward_s"] / timings["fast_backward_s"]
        timings["voxels_per_s_forward"] = voxels / timings["fast_forward_s"]
        timings["voxels_per_s_backward"] = voxels / timings["fast_backward_s"]
    finally:
        deform.set_threads(prev)
    report["workload"] = {"batch": 1, "channels": channels, "extent": size}
    report["timings"] = timings
    report["threads_bit_identical"] = thread_invariance(threads, seed)
    report["network"] = {"params": network.closed_form_param_count(cfg),
                         "flops_96": network.flops_estimate(cfg, (96, 96, 96))}
    report["full_config"] = {"params": network.closed_form_param_count(network.FULL),
                              "params_reference": FULL_PARAMS_REFERENCE,
                              "flops_96": network.flops_estimate(network.FULL, (96, 96, 96)),
                              "flops_reference": FULL_FLOPS_REFERENCE}
    return report


def format_report(r: dict) -> str:
    t = r["timings"]
    lines = ["agreement (max abs diff, naive vs optimized):"]
    lines += [f"  {k:<14}{v:.3e}" for k, v in r["agreement"].items()]
    wl = r["workload"]
    lines.append(f"workload: N={wl['batch']} C={wl['channels']} {wl['extent']}^3, "
                 f"threads={r['threads']} (effective {r['threads_effective']})")
    for k, v in t.items():
        lines.append(f"  {k:<22}{v:.4g}")
    lines.append(f"threads 1 vs {r['threads']} bit-identical: {r['threads_bit_identical']}")
    n, p = r["network"], r["full_config"]
    lines.append(f"config params: {n['params']:,}  FLOPs@96^3: {n['flops_96'] / 1e9:.2f} G")
    lines.append(f"full-size config params: {p['params']:,} (reference {p['params_reference'] / 1e6:.1f}M, "
                 f"ratio {p['params'] / p['params_reference']:.3f})")
    lines.append(f"full-size config FLOPs@96^3: {p['flops_96'] / 1e9:.1f} G (reference {p['flops_reference'] / 1e9:.1f} G)")
    return "\n".join(lines)
