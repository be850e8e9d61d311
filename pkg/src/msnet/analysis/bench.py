"""Micro-benchmark of one depthwise k x k + pointwise convolution pair per stage.

Timing runs single-threaded (BLAS pools are clamped with threadpoolctl),
in float32, with warm-ups before the timed repeats; the reported statistic
is the median. Absolute numbers depend on the machine, only orderings
between kernel sizes are meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from ..core import ops
from ..core.tensor import Tensor, no_grad

# (spatial size, channels) of the four stages for a 640x640 input
STAGE_SPECS: Tuple[Tuple[int, int], ...] = ((320, 160), (160, 320), (80, 640), (40, 1280))
KERNELS = (3, 5, 7, 9)


@dataclass
class BenchCell:
    size: int
    channels: int
    kernel: int
    median_s: float
    repeats: int

    @property
    def rate(self) -> float:
        return 1.0 / self.median_s if self.median_s > 0 else float("inf")

    def to_row(self) -> dict:
        return {"size": self.size, "channels": self.channels, "kernel": self.kernel,
                "median_ms": self.median_s * 1e3, "fps": self.rate, "repeats": self.repeats}


def _conv_pair(size: int, channels: int, kernel: int, rng: np.random.Generator):
    x = Tensor(rng.standard_normal((1, channels, size, size)).astype(np.float32))
    dw = Tensor(rng.standard_normal((channels, 1, kernel, kernel)).astype(np.float32))
    pw = Tensor(rng.standard_normal((channels, channels, 1, 1)).astype(np.float32))
    pad = (kernel - 1) // 2

    def run():
        y = ops.conv2d(x, dw, padding=pad, groups=channels)
        return ops.conv2d(y, pw)
    return run


def time_cell(size: int, channels: int, kernel: int, repeats: int = 100, warmup: int = 10,
              seed: int = 0) -> BenchCell:
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and positive, got {kernel}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    run = _conv_pair(size, channels, kernel, np.random.default_rng(seed))
    times = []
    with no_grad(), threadpool_limits(limits=1):
        for _ in range(warmup):
            run()
        for _ in range(repeats):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
    return BenchCell(size, channels, kernel, float(np.median(times)), repeats)


def bench_conv(stage_specs: Sequence[Tuple[int, int]] = STAGE_SPECS,
               kernels: Sequence[int] = KERNELS, repeats: int = 100,
               warmup: int = 10) -> List[BenchCell]:
    """Median time for every (stage spec, kernel) cell, stage-major order."""
    return [time_cell(size, ch, k, repeats, warmup)
            for size, ch in stage_specs for k in kernels]


def to_csv(cells: Sequence[BenchCell]) -> str:
    lines = ["size,channels,kernel,median_ms,fps,repeats"]
    for c in cells:
        lines.append(f"{c.size},{c.channels},{c.kernel},{c.median_s * 1e3:.4f},{c.rate:.3f},{c.repeats}")
    return "\n".join(lines) + "\n"
