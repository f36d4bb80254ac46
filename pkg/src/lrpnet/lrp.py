"""Long range pooling: cascaded dilated pooling with per-voxel branch selection.

For an input x the block computes

    S = linear(x)                       split into S_1 .. S_B
    P_1 = p(x, d_1), P_k = p(P_{k-1}, d_k)
    out = sum_b S_b * P_{tap_b}

where p is dilated max pooling (or average pooling / convolution for the
ablation variants) with a 3x3x3 window.  Window size of tap k is
1 + 2 * (d_1 + ... + d_k): 3, 9 and 27 for the default ladder (1, 3, 9).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Var, backprop, leaf, record
from .voxel import ShapeError, SparseTensor

OP_KINDS = ("max", "avg", "conv")
SELECTIONS = ("per_channel", "per_voxel_scalar", "none")
PLACEMENTS = ("before", "middle", "after", "parallel")
DEFAULT_LADDER = (1, 3, 9)


def window_sizes(dilations) -> list[int]:
    sizes, reach = [], 0
    for d in dilations:
        reach += d
        sizes.append(1 + 2 * reach)
    return sizes


@dataclass(frozen=True)
class LrpConfig:
    op_kind: str = "max"
    dilations: tuple = DEFAULT_LADDER
    taps: tuple | None = None
    selection: str = "per_channel"
    placement: str = "after"

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.taps is None:
            object.__setattr__(self, "taps", tuple(range(len(self.dilations))))
        else:
            object.__setattr__(self, "taps", tuple(int(t) for t in self.taps))
        if self.op_kind not in OP_KINDS:
            raise ValueError(f"op_kind must be one of {OP_KINDS}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError("dilations must be a non-empty list of positive ints")
        d = self.dilations
        increasing = all(a < b for a, b in zip(d, d[1:]))
        if not increasing and any(x != 1 for x in d):
            raise ValueError("dilations must be strictly increasing (or all 1)")
        t = self.taps
        if not t or any(b <= a for a, b in zip(t, t[1:])) or t[0] < 0 or t[-1] >= len(d):
            raise ValueError("taps must be increasing indices into the dilation ladder")

    @property
    def branches(self) -> int:
        return len(self.taps)

    @property
    def ranges(self) -> list[int]:
        sizes = window_sizes(self.dilations)
        return [sizes[t] for t in self.taps]

    @classmethod
    def from_ranges(cls, ranges, **kw) -> "LrpConfig":
        """Build a config from window sizes drawn from (3, 9, 27).

        The cascade runs the default ladder up to the largest requested window
        and selects the taps whose windows were requested.
        """
        sizes = window_sizes(DEFAULT_LADDER)
        ranges = sorted(int(r) for r in ranges)
        if not ranges or any(r not in sizes for r in ranges):
            raise ValueError(f"ranges must be drawn from {sizes}")
        taps = tuple(sizes.index(r) for r in ranges)
        return cls(dilations=DEFAULT_LADDER[: taps[-1] + 1], taps=taps, **kw)


@dataclass
class SelectionParams:
    weight: np.ndarray
    bias: np.ndarray
    mode: str = "per_channel"

    @classmethod
    def zeros(cls, channels: int, branches: int, mode: str = "per_channel") -> "SelectionParams":
        width = branches * channels if mode == "per_channel" else branches
        return cls(np.zeros((channels, width)), np.zeros(width), mode)


def selection_shape(cfg: LrpConfig, channels: int) -> tuple[int, int] | None:
    if cfg.selection == "per_channel":
        return channels, cfg.branches * channels
    if cfg.selection == "per_voxel_scalar":
        return channels, cfg.branches
    return None


def lrp_param_count(cfg: LrpConfig | None, channels: int) -> int:
    if cfg is None:
        return 0
    total = 0
    shape = selection_shape(cfg, channels)
    if shape is not None:
        total += shape[0] * shape[1] + shape[1]
    if cfg.op_kind == "conv":
        total += len(cfg.dilations) * (27 * channels * channels + channels)
    return total


def lrp_param_shapes(cfg: LrpConfig, channels: int) -> list[tuple[str, tuple]]:
    """(suffix, shape) of every parameter tensor, in declaration order."""
    shapes = []
    sel = selection_shape(cfg, channels)
    if sel is not None:
        shapes += [("sel.weight", sel), ("sel.bias", (sel[1],))]
    if cfg.op_kind == "conv":
        for k in range(len(cfg.dilations)):
            shapes += [
                (f"branch{k}.weight", (27, channels, channels)),
                (f"branch{k}.bias", (channels,)),
            ]
    return shapes


def split_selection(s: np.ndarray, branches: int) -> list[np.ndarray]:
    width = s.shape[1] // branches
    return [s[:, b * width:(b + 1) * width] for b in range(branches)]


def selection_weights(x: SparseTensor, sel: SelectionParams) -> ops.TapeNode:
    """Raw affine branch weights S = x @ W + b (no normalisation)."""
    return ops.linear(x, sel.weight, sel.bias)


def _pool_step(v: Var, cfg: LrpConfig, k: int, params: dict, prefix: str) -> Var:
    d = cfg.dilations[k]
    if cfg.op_kind == "max":
        return record(ops.sparse_maxpool(v.value, d), [v])
    if cfg.op_kind == "avg":
        return record(ops.sparse_avgpool(v.value, d), [v])
    wname, bname = f"{prefix}branch{k}.weight", f"{prefix}branch{k}.bias"
    km = ops.submanifold_map(v.value, d)
    node = ops.sparse_conv(v.value, ops.ConvParams(params[wname], params[bname]), km)
    return record(node, [v], [wname, bname])


def lrp_apply(x: Var, params: dict, prefix: str, cfg: LrpConfig) -> tuple[Var, list[Var]]:
    """Graph-level LRP block.  Parameters are looked up as ``prefix + suffix``.

    Returns the block output and all cascade taps.
    """
    if len(x.value) == 0:
        raise ValueError("LRP needs a non-empty tensor")
    taps, v = [], x
    for k in range(len(cfg.dilations)):
        v = _pool_step(v, cfg, k, params, prefix)
        taps.append(v)
    chosen = [taps[t] for t in cfg.taps]

    if cfg.selection == "none":
        out = chosen[0]
        for p in chosen[1:]:
            out = record(ops.add(out.value, p.value), [out, p])
        return out, taps

    wname, bname = f"{prefix}sel.weight", f"{prefix}sel.bias"
    w, b = params[wname], params[bname]
    expected = selection_shape(cfg, x.value.channels)
    if w.shape != expected:
        raise ShapeError(f"selection weight {w.shape}, expected {expected}")
    s = record(ops.linear(x.value, w, b), [x], [wname, bname])
    parts = _split_var(s, cfg.branches)
    out = None
    for part, p in zip(parts, chosen):
        term = record(ops.scale_channels(p.value, part.value.features), [p, part])
        out = term if out is None else record(ops.add(out.value, term.value), [out, term])
    return out, taps


def _split_var(s: Var, branches: int) -> list[Var]:
    total = s.value.channels
    width = total // branches
    parts = []
    for b in range(branches):
        lo, hi = b * width, (b + 1) * width

        def backward(g, lo=lo, hi=hi, n=len(s.value)):
            full = np.zeros((n, total))
            full[:, lo:hi] = g
            return (full,)

        node = ops.TapeNode(s.value.with_features(s.value.features[:, lo:hi]), backward)
        parts.append(record(node, [s]))
    return parts


def _as_node(x: SparseTensor, params: dict, cfg: LrpConfig) -> ops.TapeNode:
    xv = leaf(x)
    out, taps = lrp_apply(xv, params, "", cfg)
    names = [name for name, _ in lrp_param_shapes(cfg, x.channels)]

    def backward(g):
        grads = backprop(out, g)
        dx = xv.grad if xv.grad is not None else np.zeros_like(x.features)
        return (dx, *[grads.get(n, np.zeros_like(params[n])) for n in names])

    node = ops.TapeNode(out.value, backward)
    node.taps = [t.value for t in taps]
    node.param_names = names
    return node


def lrp_forward(x: SparseTensor, sel: SelectionParams | None, cfg: LrpConfig) -> ops.TapeNode:
    """Max-pool LRP block.  ``backward(g)`` returns (dx, dW_sel, db_sel)."""
    if cfg.op_kind != "max":
        raise ValueError("lrp_forward is the max-pool block; use lrp_variant_forward")
    return _as_node(x, _selection_dict(sel, cfg), cfg)


def lrp_variant_forward(
    x: SparseTensor, sel: SelectionParams | None, cfg: LrpConfig, branch_params=None
) -> ops.TapeNode:
    """Average-pool or convolution variant of the block.

    ``branch_params`` is a list of ConvParams, one per cascade stage, for the
    conv variant.  ``backward(g)`` returns dx, then selection gradients, then
    the conv weight and bias gradients per stage.
    """
    if cfg.op_kind not in ("avg", "conv"):
        raise ValueError("lrp_variant_forward handles the avg and conv variants")
    params = _selection_dict(sel, cfg)
    if cfg.op_kind == "conv":
        if branch_params is None or len(branch_params) != len(cfg.dilations):
            raise ShapeError("conv variant needs one ConvParams per cascade stage")
        for k, cp in enumerate(branch_params):
            params[f"branch{k}.weight"] = cp.weights
            params[f"branch{k}.bias"] = cp.bias
    return _as_node(x, params, cfg)


def _selection_dict(sel: SelectionParams | None, cfg: LrpConfig) -> dict:
    if cfg.selection == "none":
        return {}
    if sel is None:
        raise ShapeError("selection parameters required")
    return {"sel.weight": sel.weight, "sel.bias": sel.bias}
