"""Wall-clock micro-benchmarks of the sparse ops over random occupancy grids."""

from __future__ import annotations

import time

import numpy as np

from . import ops
from .lrp import LrpConfig, SelectionParams, lrp_forward
from .voxel import SparseTensor

BENCH_COLUMNS = ("op", "dilation", "grid", "voxels", "channels", "median_ms")


def _median_ms(fn, reps: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def bench_ops(grids=(16, 32), occupancy: float = 0.3, dilations=(1, 3, 9), channels: int = 32,
              reps: int = 20, warmup: int = 3, seed: int = 0) -> list[dict]:
    """Median time of each op per (op, dilation, grid); kernel maps are built during warmup."""
    if reps < 1 or warmup < 0:
        raise ValueError("reps must be >= 1 and warmup >= 0")
    rng = np.random.default_rng(seed)
    rows = []
    for g in grids:
        mask = rng.random((g, g, g)) < occupancy
        cells = np.argwhere(mask)
        coords = np.hstack([np.zeros((len(cells), 1), dtype=np.int64), cells])
        x = SparseTensor(coords, rng.standard_normal((len(cells), channels)))
        w = rng.standard_normal((27, channels, channels)) / np.sqrt(27 * channels)
        cp = ops.ConvParams(w, np.zeros(channels))
        for d in dilations:
            cases = {
                "maxpool": lambda d=d: ops.sparse_maxpool(x, d),
                "avgpool": lambda d=d: ops.sparse_avgpool(x, d),
                "conv": lambda d=d: ops.sparse_conv(x, cp, ops.submanifold_map(x, d)),
            }
            for op, fn in cases.items():
                rows.append({"op": op, "dilation": str(d), "grid": g, "voxels": len(cells),
                             "channels": channels, "median_ms": _median_ms(fn, reps, warmup)})
        cfg = LrpConfig()
        sel = SelectionParams(rng.standard_normal((channels, 3 * channels)) * 0.1, np.zeros(3 * channels))
        rows.append({"op": "lrp", "dilation": "-".join(map(str, cfg.dilations)), "grid": g,
                     "voxels": len(cells), "channels": channels,
                     "median_ms": _median_ms(lambda: lrp_forward(x, sel, cfg), reps, warmup)})
    return rows
