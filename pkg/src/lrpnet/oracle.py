"""Brute-force references on small dense grids, and finite-difference gradients.

Nothing here imports the sparse kernels: neighbourhoods are found by shifting
padded dense arrays (or by plain Python loops), never through coordinate
hashing or kernel maps.  Tests compare the two routes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_EXTENT = 32


@dataclass
class DenseGrid:
    mask: np.ndarray  # D x D x D bool occupancy
    features: np.ndarray  # D x D x D x C, ignored where mask is False

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.mask.ndim != 3 or self.features.shape[:3] != self.mask.shape:
            raise ValueError("mask must be D^3 and features D^3 x C")
        if max(self.mask.shape) > MAX_EXTENT:
            raise ValueError(f"dense oracle limited to {MAX_EXTENT}^3 grids")

    @property
    def channels(self) -> int:
        return self.features.shape[3]

    @classmethod
    def from_points(cls, cells, values, extent) -> "DenseGrid":
        """Scatter per-cell rows ``values`` at integer ``cells`` (M x 3) into a grid."""
        cells = np.asarray(cells, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        shape = (extent,) * 3 if np.isscalar(extent) else tuple(extent)
        mask = np.zeros(shape, dtype=bool)
        feats = np.zeros(shape + (values.shape[1],))
        for cell, row in zip(cells, values):
            mask[tuple(cell)] = True
            feats[tuple(cell)] = row
        return cls(mask, feats)

    def at(self, cells) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64)
        return self.features[cells[:, 0], cells[:, 1], cells[:, 2]]


def _window(dilation):
    d = int(dilation)
    return [(a, b, c) for a in (-d, 0, d) for b in (-d, 0, d) for c in (-d, 0, d)]


def _shifted(array, offset, pad, fill):
    """View of ``array`` displaced so element p holds array[p + offset]."""
    padded = np.pad(array, [(pad, pad)] * 3 + [(0, 0)] * (array.ndim - 3), constant_values=fill)
    sl = tuple(slice(pad + o, pad + o + n) for o, n in zip(offset, array.shape[:3]))
    return padded[sl]


def dense_masked_pool(grid: DenseGrid, dilation: int, mode: str = "max") -> DenseGrid:
    """Max or mean over occupied cells at offsets {-d,0,d}^3; outside the grid counts as empty."""
    if mode not in ("max", "mean"):
        raise ValueError("mode must be 'max' or 'mean'")
    d = int(dilation)
    f, m = grid.features, grid.mask
    if mode == "max":
        acc = np.full(f.shape, -np.inf)
    else:
        acc = np.zeros(f.shape)
        count = np.zeros(m.shape)
    for off in _window(d):
        nm = _shifted(m, off, d, False)
        nf = _shifted(f, off, d, 0.0)
        if mode == "max":
            acc = np.where(nm[..., None], np.maximum(acc, nf), acc)
        else:
            acc += np.where(nm[..., None], nf, 0.0)
            count += nm
    if mode == "mean":
        acc = acc / np.maximum(count, 1)[..., None]
    out = np.where(m[..., None], acc, 0.0)
    return DenseGrid(m.copy(), out)


def dense_masked_pool_loops(grid: DenseGrid, dilation: int, mode: str = "max") -> DenseGrid:
    """Cell-by-cell version of :func:`dense_masked_pool`, offsets walked in reverse."""
    d = int(dilation)
    nx, ny, nz = grid.mask.shape
    out = np.zeros_like(grid.features)
    window = _window(d)[::-1]
    for z in range(nz - 1, -1, -1):
        for y in range(ny - 1, -1, -1):
            for x in range(nx - 1, -1, -1):
                if not grid.mask[x, y, z]:
                    continue
                vals = []
                for dx, dy, dz in window:
                    p = (x + dx, y + dy, z + dz)
                    if 0 <= p[0] < nx and 0 <= p[1] < ny and 0 <= p[2] < nz and grid.mask[p]:
                        vals.append(grid.features[p])
                vals = np.array(vals)
                out[x, y, z] = vals.max(axis=0) if mode == "max" else vals.sum(axis=0) / len(vals)
    return DenseGrid(grid.mask.copy(), out)


def dense_masked_conv(grid: DenseGrid, weights: np.ndarray, bias: np.ndarray, dilation: int) -> DenseGrid:
    """bias + sum over occupied neighbours at {-d,0,d}^3 of feature @ weights[slot].

    Slots follow the lexicographic offset order (x slowest).
    """
    d = int(dilation)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != 27 or weights.shape[1] != grid.channels:
        raise ValueError("weights must be 27 x C_in x C_out")
    f, m = grid.features, grid.mask
    acc = np.zeros(m.shape + (weights.shape[2],))
    for slot, off in enumerate(_window(d)):
        nm = _shifted(m, off, d, False)
        nf = _shifted(f, off, d, 0.0)
        acc += np.where(nm[..., None], nf, 0.0) @ weights[slot]
    out = np.where(m[..., None], acc + bias, 0.0)
    return DenseGrid(m.copy(), out)


def dense_cascade(grid: DenseGrid, dilations, mode: str = "max") -> list[DenseGrid]:
    """Taps of chained dense pooling, each stage consuming the previous one."""
    taps, g = [], grid
    for d in dilations:
        g = dense_masked_pool(g, d, mode)
        taps.append(g)
    return taps


def dense_lrp(grid: DenseGrid, sel_weight, sel_bias, dilations, taps=None, mode="max",
              per_channel=True) -> DenseGrid:
    """Cascade taps blended by affine selection weights computed from the input grid."""
    cascade = dense_cascade(grid, dilations, mode)
    taps = range(len(dilations)) if taps is None else taps
    chosen = [cascade[t] for t in taps]
    c = grid.channels
    s = grid.features @ np.asarray(sel_weight) + np.asarray(sel_bias)
    out = np.zeros_like(grid.features)
    for b, tap in enumerate(chosen):
        w = s[..., b * c:(b + 1) * c] if per_channel else s[..., b:b + 1]
        out += w * tap.features
    return DenseGrid(grid.mask.copy(), np.where(grid.mask[..., None], out, 0.0))


def numeric_gradient(f, x, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (any shape), one coordinate at a time."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a, b) -> float:
    """max over entries of |a - b| / max(1, |a|, |b|)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))
