"""Differentiable sparse primitives.

Every op returns a :class:`TapeNode` holding the forward result and a
``backward`` closure.  ``backward(grad_out)`` returns a tuple of gradients, one
per input tensor followed by one per parameter, in the order of the op's
signature.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .voxel import AXIS_LIMIT, ShapeError, SparseTensor, pack_coords, pack_offsets


@dataclass
class TapeNode:
    output: Any
    backward: Callable[..., tuple]


@dataclass
class ConvParams:
    weights: np.ndarray  # K x C_in x C_out
    bias: np.ndarray  # C_out

    @property
    def shape(self):
        return self.weights.shape


@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BnParams":
        return cls(
            np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels),
            momentum, epsilon,
        )


# ---------------------------------------------------------------------------
# offsets and kernel maps


def dilated_offsets(dilation: int) -> np.ndarray:
    """The 27 offsets {-d, 0, d}^3 in lexicographic order; slot 13 is the centre."""
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    d = int(dilation)
    return np.array(list(itertools.product((-d, 0, d), repeat=3)), dtype=np.int64)


def cube_offsets(size: int) -> np.ndarray:
    """Offsets {0..size-1}^3, used by strided down/up-sampling."""
    return np.array(list(itertools.product(range(size), repeat=3)), dtype=np.int64)


CENTER_SLOT = 13


@dataclass
class KernelMap:
    """Execution plan of a sparse op: triples (in_row, out_row, slot).

    Triples are stored grouped by slot and, within a slot, by output row;
    ``pairs[s]`` gives the (in_rows, out_rows) arrays for slot ``s``.
    """

    in_rows: np.ndarray
    out_rows: np.ndarray
    slots: np.ndarray
    num_in: int
    num_out: int
    num_slots: int
    out_coords: np.ndarray
    out_stride: int = 1
    out_cache: dict | None = field(default=None, repr=False)
    pairs: list = field(init=False, repr=False)

    def __post_init__(self):
        bounds = np.searchsorted(self.slots, np.arange(self.num_slots + 1))
        self.pairs = [
            (self.in_rows[a:b], self.out_rows[a:b]) for a, b in zip(bounds[:-1], bounds[1:])
        ]

    def __len__(self) -> int:
        return len(self.in_rows)

    def triples(self) -> set[tuple[int, int, int]]:
        return set(zip(self.in_rows.tolist(), self.out_rows.tolist(), self.slots.tolist()))

    def match_counts(self) -> np.ndarray:
        return np.bincount(self.out_rows, minlength=self.num_out)

    def neighbor_table(self) -> np.ndarray:
        """num_out x width table of matched input rows, ascending per row.

        Unused cells hold ``num_in`` (a padding row).  Cached.
        """
        table = getattr(self, "_table", None)
        if table is None:
            counts = self.match_counts()
            width = int(counts.max()) if self.num_out else 0
            order = np.lexsort((self.in_rows, self.out_rows))
            rows, ins = self.out_rows[order], self.in_rows[order]
            starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
            pos = np.arange(len(rows)) - starts[rows]
            table = np.full((self.num_out, max(width, 1)), self.num_in, dtype=np.int64)
            table[rows, pos] = ins
            self._table = table
        return table

    def transpose(self, in_coords: np.ndarray, in_stride: int, in_cache: dict | None = None) -> "KernelMap":
        """Swap roles of inputs and outputs; ``in_coords`` become the output sites."""
        order = np.lexsort((self.in_rows, self.slots))
        return KernelMap(
            self.out_rows[order], self.in_rows[order], self.slots[order],
            self.num_out, self.num_in, self.num_slots,
            in_coords, in_stride, in_cache,
        )


def _sorted_map(in_rows, out_rows, slots, **kw) -> KernelMap:
    order = np.lexsort((out_rows, slots))
    return KernelMap(in_rows[order], out_rows[order], slots[order], **kw)


def build_kernel_map(inp: SparseTensor, out_coords: np.ndarray, offsets: np.ndarray) -> KernelMap:
    """All (i, o, s) with ``inp.coords[i] == out_coords[o] + offsets[s]``.

    Offsets are in lattice steps of the tensor's own level.
    """
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, 4)
    offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, 3)
    k, m = len(offsets), len(out_coords)
    shared = out_coords is inp.coords
    if m == 0 or len(inp) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return KernelMap(empty, empty, empty, len(inp), m, k, out_coords, inp.stride,
                         inp.cache if shared else None)
    reach = np.abs(offsets).max()
    if np.abs(out_coords[:, 1:]).max() + reach > AXIS_LIMIT:
        raise ValueError("neighbour query outside the encodable coordinate range")
    keys = pack_coords(out_coords)[None, :] + pack_offsets(offsets)[:, None]
    rows = inp.index().lookup_keys(keys.ravel()).reshape(k, m)
    slot_idx, out_idx = np.nonzero(rows >= 0)
    # np.nonzero already yields slot-major, out-row-minor order
    return KernelMap(
        rows[slot_idx, out_idx], out_idx.astype(np.int64), slot_idx.astype(np.int64),
        num_in=len(inp), num_out=m, num_slots=k, out_coords=out_coords,
        out_stride=inp.stride, out_cache=inp.cache if shared else None,
    )


def submanifold_map(inp: SparseTensor, dilation: int) -> KernelMap:
    """Cached stride-1 map of ``inp`` onto its own sites with offsets {-d,0,d}^3."""
    key = ("sub", int(dilation))
    km = inp.cache.get(key)
    if km is None:
        km = inp.cache[key] = build_kernel_map(inp, inp.coords, dilated_offsets(dilation))
    return km


def pointwise_map(inp: SparseTensor) -> KernelMap:
    key = ("point",)
    km = inp.cache.get(key)
    if km is None:
        n = len(inp)
        rows = np.arange(n, dtype=np.int64)
        km = inp.cache[key] = KernelMap(
            rows, rows, np.zeros(n, dtype=np.int64), n, n, 1, inp.coords, inp.stride, inp.cache
        )
    return km


def downsample_map(inp: SparseTensor, factor: int = 2) -> KernelMap:
    """Map from ``inp`` to its floor-divided coarse sites over {0..factor-1}^3 slots.

    The coarse site of a fine voxel c is c // factor and its slot encodes c mod factor.
    """
    key = ("down", int(factor))
    km = inp.cache.get(key)
    if km is not None:
        return km
    fine = inp.coords
    coarse = fine.copy()
    coarse[:, 1:] = np.floor_divide(coarse[:, 1:], factor)
    keys = pack_coords(coarse)
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    rem = fine[:, 1:] - coarse[:, 1:] * factor
    slots = (rem[:, 0] * factor + rem[:, 1]) * factor + rem[:, 2]
    km = _sorted_map(
        np.arange(len(fine), dtype=np.int64), inverse.reshape(-1).astype(np.int64), slots,
        num_in=len(fine), num_out=len(first), num_slots=factor**3,
        out_coords=coarse[first], out_stride=inp.stride * factor, out_cache={},
    )
    inp.cache[key] = km
    return km


def upsample_map(coarse: SparseTensor, fine: SparseTensor, factor: int = 2) -> KernelMap:
    """Transpose of ``downsample_map(fine)``: scatters coarse sites to the stored fine sites."""
    key = ("up", int(factor))
    km = fine.cache.get(key)
    if km is None:
        down = downsample_map(fine, factor)
        km = fine.cache[key] = down.transpose(fine.coords, fine.stride, fine.cache)
    if km.num_in != len(coarse):
        raise ShapeError("coarse tensor does not match the fine tensor's downsample map")
    return km


def _output_tensor(km: KernelMap, feats: np.ndarray) -> SparseTensor:
    if km.out_cache is None:
        km.out_cache = {}
    return SparseTensor(km.out_coords, feats, km.out_stride, check=False, cache=km.out_cache)


def _check_map(inp: SparseTensor, km: KernelMap):
    if km.num_in != len(inp):
        raise ShapeError(f"kernel map expects {km.num_in} input rows, tensor has {len(inp)}")


# ---------------------------------------------------------------------------
# convolution


def sparse_conv(inp: SparseTensor, params: ConvParams, km: KernelMap) -> TapeNode:
    """out[o] = bias + sum over (i, o, s) of in[i] @ W[s]."""
    _check_map(inp, km)
    w, b = params.weights, params.bias
    if w.ndim != 3 or w.shape[0] != km.num_slots or w.shape[1] != inp.channels:
        raise ShapeError(
            f"conv weights {w.shape} incompatible with {km.num_slots} slots and "
            f"{inp.channels} input channels"
        )
    if b.shape != (w.shape[2],):
        raise ShapeError(f"conv bias {b.shape} does not match {w.shape[2]} output channels")
    x = inp.features
    out = np.zeros((km.num_out, w.shape[2]))
    for s, (i_s, o_s) in enumerate(km.pairs):
        if len(i_s):
            # within a slot every output row occurs once, so += does not collide
            out[o_s] += x[i_s] @ w[s]
    out += b

    def backward(g):
        dx = np.zeros_like(x)
        dw = np.zeros_like(w)
        for s, (i_s, o_s) in enumerate(km.pairs):
            if len(i_s):
                g_s = g[o_s]
                dx[i_s] += g_s @ w[s].T
                dw[s] = x[i_s].T @ g_s
        return dx, dw, g.sum(axis=0)

    return TapeNode(_output_tensor(km, out), backward)


# ---------------------------------------------------------------------------
# pooling


def sparse_maxpool(inp: SparseTensor, dilation: int | None = None, km: KernelMap | None = None) -> TapeNode:
    """Channel-wise max over occupied neighbours at offsets {-d,0,d}^3.

    Only occupied sites take part.  Ties go to the smallest input row, which is
    also where the gradient is routed.
    """
    if km is None:
        if len(inp) == 0:
            raise ValueError("max pooling needs a non-empty tensor")
        km = submanifold_map(inp, dilation)
    _check_map(inp, km)
    x = inp.features
    n_in, c = len(inp), inp.channels
    table = km.neighbor_table()
    if km.num_out and np.any(table[:, 0] == n_in):
        raise ValueError("output site without any occupied neighbour")
    padded = np.vstack([x, np.full((1, c), -np.inf)])
    gathered = padded[table.T]  # width x num_out x C
    best = gathered.max(axis=0)
    # table rows ascend, so the first position equal to the max is the smallest input row
    first = (gathered == best).argmax(axis=0)
    arg = table.T[first, np.arange(km.num_out)[:, None]]
    flat_idx = (arg * c + np.arange(c)).ravel()

    def backward(g):
        dx = np.bincount(flat_idx, weights=np.asarray(g, dtype=np.float64).ravel(),
                         minlength=n_in * c)
        return (dx.reshape(n_in, c),)

    node = TapeNode(_output_tensor(km, best), backward)
    node.argmax = arg
    return node


def sparse_avgpool(inp: SparseTensor, dilation: int | None = None, km: KernelMap | None = None) -> TapeNode:
    """Mean over occupied neighbours; the divisor is the per-site match count."""
    if km is None:
        if len(inp) == 0:
            raise ValueError("average pooling needs a non-empty tensor")
        km = submanifold_map(inp, dilation)
    _check_map(inp, km)
    x = inp.features
    counts = km.match_counts().astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("output site without any occupied neighbour")
    total = np.zeros((km.num_out, inp.channels))
    for i_s, o_s in km.pairs:
        if len(i_s):
            total[o_s] += x[i_s]
    out = total / counts[:, None]

    def backward(g):
        gc = g / counts[:, None]
        dx = np.zeros_like(x)
        for i_s, o_s in km.pairs:
            if len(i_s):
                dx[i_s] += gc[o_s]
        return (dx,)

    return TapeNode(_output_tensor(km, out), backward)


# ---------------------------------------------------------------------------
# dense per-row ops


def linear(inp: SparseTensor, weight: np.ndarray, bias: np.ndarray) -> TapeNode:
    x = inp.features
    if weight.ndim != 2 or weight.shape[0] != x.shape[1] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear {weight.shape}/{bias.shape} vs {x.shape[1]} input channels")
    out = x @ weight + bias

    def backward(g):
        return g @ weight.T, x.T @ g, g.sum(axis=0)

    return TapeNode(inp.with_features(out), backward)


def batchnorm(inp: SparseTensor, params: BnParams, training: bool) -> TapeNode:
    """Per-channel normalisation over all rows of the tensor (all batch items)."""
    x = inp.features
    c = x.shape[1]
    if params.gamma.shape != (c,) or params.beta.shape != (c,):
        raise ShapeError(f"batchnorm parameters do not match {c} channels")
    gamma, beta, eps = params.gamma, params.beta, params.epsilon
    n = x.shape[0]
    if training:
        if n == 0:
            raise ValueError("batchnorm in training mode needs at least one row")
        mean = x.mean(axis=0)
        centred = x - mean
        var = (centred * centred).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centred * inv_std
        m = params.momentum
        unbiased = var * n / (n - 1) if n > 1 else var
        params.running_mean *= 1.0 - m
        params.running_mean += m * mean
        params.running_var *= 1.0 - m
        params.running_var += m * unbiased

        def backward(g):
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            dx = (gamma * inv_std / n) * (n * g - dbeta - xhat * dgamma)
            return dx, dgamma, dbeta
    else:
        inv_std = 1.0 / np.sqrt(params.running_var + eps)
        xhat = (x - params.running_mean) * inv_std

        def backward(g):
            return g * (gamma * inv_std), (g * xhat).sum(axis=0), g.sum(axis=0)

    return TapeNode(inp.with_features(gamma * xhat + beta), backward)


def relu(inp: SparseTensor) -> TapeNode:
    mask = inp.features > 0
    out = np.where(mask, inp.features, 0.0)

    def backward(g):
        return (np.where(mask, g, 0.0),)

    return TapeNode(inp.with_features(out), backward)


def add(a: SparseTensor, b: SparseTensor) -> TapeNode:
    if a.features.shape != b.features.shape:
        raise ShapeError(f"cannot add {a.features.shape} and {b.features.shape}")

    def backward(g):
        return g, g

    return TapeNode(a.with_features(a.features + b.features), backward)


def concat(a: SparseTensor, b: SparseTensor) -> TapeNode:
    """Channel concatenation of two tensors over the same sites."""
    if len(a) != len(b):
        raise ShapeError("concatenated tensors must share their sites")
    ca = a.channels

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return TapeNode(a.with_features(np.hstack([a.features, b.features])), backward)


def scale_channels(x: SparseTensor, s: np.ndarray) -> TapeNode:
    """Elementwise x * s where s is N x C or N x 1 (broadcast over channels)."""
    f = x.features
    if s.shape[0] != f.shape[0] or s.shape[1] not in (1, f.shape[1]):
        raise ShapeError(f"scale {s.shape} does not broadcast over {f.shape}")

    def backward(g):
        ds = g * f
        if s.shape[1] == 1:
            ds = ds.sum(axis=1, keepdims=True)
        return g * s, ds

    return TapeNode(x.with_features(f * s), backward)


def softmax_cross_entropy(logits: SparseTensor, labels, class_weights=None) -> TapeNode:
    """Mean over labelled rows of the (optionally class-weighted) negative log softmax.

    Rows labelled -1 are ignored.  ``output`` is the scalar loss.
    """
    z = logits.features
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (z.shape[0],):
        raise ShapeError("one label per logit row required")
    n, k = z.shape
    valid = labels >= 0
    if np.any(labels[valid] >= k):
        raise ValueError("label outside the class range")
    count = int(valid.sum())
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_prob = shifted - log_norm
    rows = np.nonzero(valid)[0]
    y = labels[rows]
    w = np.ones(count) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[y]
    loss = float(-(w * log_prob[rows, y]).sum() / count) if count else 0.0

    def backward(g=1.0):
        dz = np.zeros_like(z)
        if count:
            p = np.exp(log_prob[rows])
            p[np.arange(count), y] -= 1.0
            dz[rows] = p * (w[:, None] * (float(g) / count))
        return (dz,)

    return TapeNode(loss, backward)
