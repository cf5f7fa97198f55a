"""Inference throughput of a network on a fixed batch."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from ..nets import NetParams, forward


@dataclass
class BenchResult:
    role: str
    fps: float            # median over timed iterations
    iters: int
    warmup: int
    batch_size: int
    per_iter: list


def bench_fps(params: NetParams, batch: dict, iters: int = 30, warmup: int = 3,
              threads: int = 1, clock=time.perf_counter) -> BenchResult:
    """Frames per second of ``forward`` on ``batch``; warm-up calls are not timed.

    BLAS is pinned to ``threads`` so numbers are comparable across runs.
    """
    if iters < 1 or warmup < 0:
        raise ValueError("iters must be >= 1 and warmup >= 0")
    n = int(np.shape(batch["cam_view"])[0])
    rates = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            forward(params, batch)
        for _ in range(iters):
            t0 = clock()
            forward(params, batch)
            dt = clock() - t0
            rates.append(n / max(dt, 1e-12))
    return BenchResult(params.role, statistics.median(rates), iters, warmup, n, rates)
