"""Sparse kernels checked against the dense references in :mod:`lrpnet.oracle`.

Each check returns a :class:`CheckResult`.  ``run_all`` is what the
``oracle-check`` command prints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .erf import reachable_set
from .lrp import LrpConfig, SelectionParams, lrp_forward
from .oracle import (DenseGrid, dense_lrp, dense_masked_conv, dense_masked_pool,
                     numeric_gradient, relative_error)
from .voxel import SparseTensor


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


def random_occupancy(rng, extent: int, occupancy: float) -> np.ndarray:
    """Occupied cells (M x 3) of a random grid, never empty."""
    mask = rng.random((extent,) * 3) < occupancy
    if not mask.any():
        mask[tuple(rng.integers(extent, size=3))] = True
    return np.argwhere(mask)


def _tensor(cells, feats, cache=None) -> SparseTensor:
    coords = np.hstack([np.zeros((len(cells), 1), dtype=np.int64), cells])
    return SparseTensor(coords, feats, cache=cache)


def _timed(fn):
    def wrapper(*args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_pooling(scenes: int = 200, extent: int = 16, dilations=(1, 3, 9),
                  occupancies=(0.05, 0.3, 0.9), channels: int = 4, seed: int = 0) -> CheckResult:
    """Max pooling exactly equal, average pooling within 1e-12.

    ``scenes`` per dilation, occupancy cycling through ``occupancies``.
    """
    rng = np.random.default_rng(seed)
    max_bad, avg_err, count = 0, 0.0, 0
    for d in dilations:
        for i in range(scenes):
            cells = random_occupancy(rng, extent, occupancies[i % len(occupancies)])
            feats = rng.standard_normal((len(cells), channels))
            t = _tensor(cells, feats)
            grid = DenseGrid.from_points(cells, feats, extent)
            mx = ops.sparse_maxpool(t, d).output.features
            av = ops.sparse_avgpool(t, d).output.features
            max_bad += int(not np.array_equal(mx, dense_masked_pool(grid, d, "max").at(cells)))
            avg_err = max(avg_err, float(np.max(np.abs(av - dense_masked_pool(grid, d, "mean").at(cells)))))
            count += 1
    ok = max_bad == 0 and avg_err <= 1e-12
    return CheckResult("pooling vs dense", ok,
                       f"{count} scenes, max mismatches {max_bad}, avg max|diff| {avg_err:.2e}")


@_timed
def check_conv(scenes: int = 20, extent: int = 10, dilations=(1, 2, 3), occupancy: float = 0.3,
               seed: int = 1) -> CheckResult:
    """Submanifold convolution within 1e-12 of the dense masked convolution."""
    rng = np.random.default_rng(seed)
    err = 0.0
    for d in dilations:
        for _ in range(scenes):
            cells = random_occupancy(rng, extent, occupancy)
            cin, cout = rng.integers(1, 5, size=2)
            feats = rng.standard_normal((len(cells), cin))
            w, b = rng.standard_normal((27, cin, cout)), rng.standard_normal(cout)
            t = _tensor(cells, feats)
            out = ops.sparse_conv(t, ops.ConvParams(w, b), ops.submanifold_map(t, d)).output.features
            ref = dense_masked_conv(DenseGrid.from_points(cells, feats, extent), w, b, d).at(cells)
            err = max(err, float(np.max(np.abs(out - ref))))
    return CheckResult("conv vs dense", err <= 1e-12, f"max|diff| {err:.2e}")


@_timed
def check_cascade(scenes: int = 50, extent: int = 12, channels: int = 4,
                  occupancies=(0.05, 0.3, 0.9), seed: int = 2) -> CheckResult:
    """Max-pool LRP block against the dense cascade with separately applied selection."""
    rng = np.random.default_rng(seed)
    cfg = LrpConfig()
    err = 0.0
    for i in range(scenes):
        cells = random_occupancy(rng, extent, occupancies[i % len(occupancies)])
        feats = rng.standard_normal((len(cells), channels))
        w, b = rng.standard_normal((channels, 3 * channels)), rng.standard_normal(3 * channels)
        out = lrp_forward(_tensor(cells, feats), SelectionParams(w, b), cfg).output.features
        ref = dense_lrp(DenseGrid.from_points(cells, feats, extent), w, b, cfg.dilations).at(cells)
        err = max(err, float(np.max(np.abs(out - ref))))
    return CheckResult("LRP cascade vs dense", err < 1e-12, f"{scenes} scenes, max|diff| {err:.2e}")


def _cube(radius, extent, centre):
    lo = [max(0, c - radius) for c in centre]
    hi = [min(extent - 1, c + radius) for c in centre]
    return {(x, y, z) for x in range(lo[0], hi[0] + 1) for y in range(lo[1], hi[1] + 1)
            for z in range(lo[2], hi[2] + 1)}


@_timed
def check_reachability(extent: int = 31, gap: int = 14) -> CheckResult:
    """Dense grid gives the 27^3 cube; clusters split by ``gap`` empty cells stay apart."""
    full = np.argwhere(np.ones((extent,) * 3, dtype=bool))
    c = extent // 2
    cube_ok = reachable_set(full, (1, 3, 9), (c, c, c)) == _cube(13, extent, (c, c, c))
    # two 4^3 blocks along x with ``gap`` empty planes between them
    a = [(x, y, z) for x in range(4) for y in range(4) for z in range(4)]
    b = [(x + 4 + gap, y, z) for x, y, z in a]
    split = reachable_set(np.array(a + b), (1, 3, 9), (1, 1, 1))
    split_ok = bool(split) and split <= set(a)
    return CheckResult("reachability", cube_ok and split_ok,
                       f"dense cube {'ok' if cube_ok else 'wrong'}, clusters {'apart' if split_ok else 'joined'}")


# ---------------------------------------------------------------------------
# gradients


def tie_free_features(rng, n: int, c: int, gap: float = 1e-3) -> np.ndarray:
    """Features whose pairwise differences are all at least ``gap``."""
    return (rng.permutation(n * c).reshape(n, c) * gap - 0.5 * n * c * gap).astype(np.float64)


def _grad_case(f_forward, args, analytic):
    """Max relative error over all arguments; ``f_forward(*args)`` returns an array."""
    worst = 0.0
    for i, a in enumerate(args):
        def f(v, i=i):
            cur = list(args)
            cur[i] = v
            return f_forward(*cur)
        worst = max(worst, relative_error(analytic[i], numeric_gradient(f, a)))
    return worst


def gradient_errors(instances: int = 5, seed: int = 3) -> dict:
    """Worst finite-difference relative error per differentiable op."""
    rng = np.random.default_rng(seed)
    worst = {}

    def note(name, e):
        worst[name] = max(worst.get(name, 0.0), e)

    for _ in range(instances):
        cells = random_occupancy(rng, 5, 0.4)
        n = len(cells)
        cache = {}
        mk = lambda f: _tensor(cells, f, cache)
        cin, cout = 3, 2
        x = rng.standard_normal((n, cin))
        proj = rng.standard_normal((n, cout))

        w, b = rng.standard_normal((27, cin, cout)), rng.standard_normal(cout)
        km = ops.submanifold_map(mk(x), 1)
        conv = lambda x, w, b: float(np.sum(ops.sparse_conv(mk(x), ops.ConvParams(w, b), km).output.features * proj))
        node = ops.sparse_conv(mk(x), ops.ConvParams(w, b), km)
        note("conv", _grad_case(conv, [x, w, b], node.backward(proj)))

        lw, lb = rng.standard_normal((cin, cout)), rng.standard_normal(cout)
        lin = lambda x, w, b: float(np.sum(ops.linear(mk(x), w, b).output.features * proj))
        note("linear", _grad_case(lin, [x, lw, lb], ops.linear(mk(x), lw, lb).backward(proj)))

        if n >= 2:
            gamma, beta = rng.uniform(0.5, 1.5, cin), rng.standard_normal(cin)
            proj3 = rng.standard_normal((n, cin))

            def bn_out(x, g, bt):
                p = ops.BnParams(g, bt, np.zeros(cin), np.ones(cin))
                return ops.batchnorm(mk(x), p, True)

            bnf = lambda x, g, bt: float(np.sum(bn_out(x, g, bt).output.features * proj3))
            note("batchnorm", _grad_case(bnf, [x, gamma, beta], bn_out(x, gamma, beta).backward(proj3)))

        proj3 = rng.standard_normal((n, cin))
        avg = lambda x: float(np.sum(ops.sparse_avgpool(mk(x), 1).output.features * proj3))
        note("avgpool", _grad_case(avg, [x], ops.sparse_avgpool(mk(x), 1).backward(proj3)))

        xt = tie_free_features(rng, n, cin)
        mp = lambda x: float(np.sum(ops.sparse_maxpool(mk(x), 1).output.features * proj3))
        note("maxpool", _grad_case(mp, [xt], ops.sparse_maxpool(mk(xt), 1).backward(proj3)))

        sw, sb = rng.standard_normal((cin, 3 * cin)), rng.standard_normal(3 * cin)
        cfg = LrpConfig()
        sel = lambda x, w, b: float(np.sum(lrp_forward(mk(x), SelectionParams(w, b), cfg).output.features * proj3))
        note("selection", _grad_case(sel, [xt, sw, sb],
                                     lrp_forward(mk(xt), SelectionParams(sw, sb), cfg).backward(proj3)))

        labels = rng.integers(-1, cout + 1, size=n)
        cw = rng.uniform(0.5, 2.0, cout + 1)
        z = rng.standard_normal((n, cout + 1))
        for weights in (None, cw):
            ce = lambda z: ops.softmax_cross_entropy(mk(z), labels, weights).output
            note("cross-entropy", _grad_case(ce, [z], ops.softmax_cross_entropy(mk(z), labels, weights).backward(1.0)))
    return worst


@_timed
def check_gradients(instances: int = 5, tol: float = 1e-5, seed: int = 3) -> CheckResult:
    worst = gradient_errors(instances, seed)
    ok = all(e < tol for e in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return CheckResult("finite-difference gradients", ok, detail)


def run_all(quick: bool = False) -> list[CheckResult]:
    if quick:
        return [check_pooling(scenes=10), check_conv(scenes=5), check_cascade(scenes=10),
                check_reachability(), check_gradients(instances=2)]
    return [check_pooling(), check_conv(), check_cascade(), check_reachability(), check_gradients()]
