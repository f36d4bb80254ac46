"""Sparse residual U-Net with optional LRP blocks, parameter bookkeeping and checkpoints."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import Var, leaf, record
from .lrp import LrpConfig, lrp_apply, lrp_param_count, lrp_param_shapes
from .voxel import ShapeError, SparseTensor

NUM_STAGES = 4
DEFAULT_WIDTHS = (32, 64, 128, 256)


@dataclass(frozen=True)
class NetworkConfig:
    stage_channels: tuple = DEFAULT_WIDTHS
    num_classes: int = 7
    in_channels: int = 3
    lrp: LrpConfig | None = None
    selection_init: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        ch = self.stage_channels
        if len(ch) != NUM_STAGES:
            raise ValueError(f"need exactly {NUM_STAGES} stage widths, got {len(ch)}")
        if min(ch) < 1 or any(b < a for a, b in zip(ch, ch[1:])):
            raise ValueError("stage widths must be positive and non-decreasing")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ValueError("num_classes and in_channels must be positive")

    def baseline(self) -> "NetworkConfig":
        return NetworkConfig(self.stage_channels, self.num_classes, self.in_channels, None,
                             self.selection_init)


def stage_layout(cfg: NetworkConfig) -> list[tuple[str, int, int]]:
    """(name, in_channels, out_channels) of each ResBlock stage in execution order."""
    ch = cfg.stage_channels
    stages = [("enc0", cfg.in_channels, ch[0])]
    stages += [(f"enc{s}", ch[s], ch[s]) for s in range(1, NUM_STAGES)]
    stages += [(f"dec{s}", 2 * ch[s], ch[s]) for s in range(NUM_STAGES - 2, -1, -1)]
    return stages


def lrp_width(cfg: NetworkConfig, cin: int, cout: int) -> int:
    return cin if cfg.lrp is not None and cfg.lrp.placement == "before" else cout


def _conv_shapes(name, k, cin, cout):
    return [(f"{name}.weight", (k, cin, cout)), (f"{name}.bias", (cout,))]


def _bn_shapes(name, c):
    return [(f"{name}.gamma", (c,)), (f"{name}.beta", (c,))]


def param_shapes(cfg: NetworkConfig) -> list[tuple[str, tuple]]:
    """Every trainable tensor in declaration order."""
    shapes = []
    ch = cfg.stage_channels
    layout = {name: (cin, cout) for name, cin, cout in stage_layout(cfg)}

    def stage(name):
        cin, cout = layout[name]
        shapes.extend(_conv_shapes(f"{name}.conv1", 27, cin, cout))
        shapes.extend(_bn_shapes(f"{name}.bn1", cout))
        shapes.extend(_conv_shapes(f"{name}.conv2", 27, cout, cout))
        shapes.extend(_bn_shapes(f"{name}.bn2", cout))
        if cin != cout:
            shapes.extend(_conv_shapes(f"{name}.proj", 1, cin, cout))
        if cfg.lrp is not None:
            width = lrp_width(cfg, cin, cout)
            shapes.extend((f"{name}.lrp.{s}", shp) for s, shp in lrp_param_shapes(cfg.lrp, width))

    for s in range(NUM_STAGES):
        stage(f"enc{s}")
        if s < NUM_STAGES - 1:
            shapes.extend(_conv_shapes(f"down{s}.conv", 8, ch[s], ch[s + 1]))
            shapes.extend(_bn_shapes(f"down{s}.bn", ch[s + 1]))
    for s in range(NUM_STAGES - 2, -1, -1):
        shapes.extend(_conv_shapes(f"up{s}.conv", 8, ch[s + 1], ch[s]))
        shapes.extend(_bn_shapes(f"up{s}.bn", ch[s]))
        stage(f"dec{s}")
    shapes.append(("head.weight", (ch[0], cfg.num_classes)))
    shapes.append(("head.bias", (cfg.num_classes,)))
    return shapes


def buffer_names(cfg: NetworkConfig) -> list[str]:
    names = []
    for name, _ in param_shapes(cfg):
        if name.endswith(".gamma"):
            base = name[: -len(".gamma")]
            names += [f"{base}.running_mean", f"{base}.running_var"]
    return names


@dataclass
class Model:
    cfg: NetworkConfig
    params: dict
    buffers: dict = field(default_factory=dict)

    def copy(self) -> "Model":
        return Model(
            self.cfg,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


def init_model(cfg: NetworkConfig, rng: np.random.Generator) -> Model:
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith((".beta", ".bias")) and ".sel." not in name:
            params[name] = np.zeros(shape)
        elif name.endswith("sel.bias"):
            params[name] = np.full(shape, cfg.selection_init)
        elif name.endswith("sel.weight"):
            params[name] = rng.normal(0.0, 0.1 / np.sqrt(shape[0]), size=shape)
        elif name == "head.weight":
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            fan_in = shape[0] * shape[1]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    buffers = {}
    for name in buffer_names(cfg):
        c = params[name.rsplit(".", 1)[0] + ".gamma"].shape
        buffers[name] = np.zeros(c) if name.endswith("mean") else np.ones(c)
    return Model(cfg, params, buffers)


def param_count(params) -> int:
    """Exact number of trainable scalars (a Model, a params dict or a NetworkConfig)."""
    if isinstance(params, NetworkConfig):
        return sum(int(np.prod(s)) for _, s in param_shapes(params))
    if isinstance(params, Model):
        params = params.params
    return sum(int(v.size) for v in params.values())


def baseline_param_count(cfg: NetworkConfig) -> int:
    """Closed-form count for the U-Net without LRP blocks."""
    ch = list(cfg.stage_channels)

    def resblock(cin, cout):
        n = 27 * cin * cout + cout + 27 * cout * cout + cout + 4 * cout
        return n + (cin * cout + cout if cin != cout else 0)

    total = resblock(cfg.in_channels, ch[0])
    total += sum(resblock(c, c) for c in ch[1:])
    total += sum(resblock(2 * c, c) for c in ch[:-1])
    # conv(2^3 offsets) + bias + bn, ending in the coarse width going down and the fine width going up
    total += sum(8 * a * b + 3 * b for a, b in zip(ch[:-1], ch[1:]))
    total += sum(8 * a * b + 3 * a for a, b in zip(ch[:-1], ch[1:]))
    total += ch[0] * cfg.num_classes + cfg.num_classes
    return total


def lrp_overhead(cfg: NetworkConfig) -> int:
    """Parameters added by the LRP blocks of ``cfg`` over its baseline."""
    return sum(lrp_param_count(cfg.lrp, lrp_width(cfg, cin, cout)) for _, cin, cout in stage_layout(cfg))


# ---------------------------------------------------------------------------
# forward


class _Builder:
    def __init__(self, model: Model, training: bool):
        self.p = model.params
        self.b = model.buffers
        self.training = training

    def conv(self, x: Var, name: str, km: ops.KernelMap) -> Var:
        w, b = f"{name}.weight", f"{name}.bias"
        return record(ops.sparse_conv(x.value, ops.ConvParams(self.p[w], self.p[b]), km), [x], [w, b])

    def bn(self, x: Var, name: str) -> Var:
        params = ops.BnParams(
            self.p[f"{name}.gamma"], self.p[f"{name}.beta"],
            self.b[f"{name}.running_mean"], self.b[f"{name}.running_var"],
        )
        return record(ops.batchnorm(x.value, params, self.training), [x],
                      [f"{name}.gamma", f"{name}.beta"])

    def relu(self, x: Var) -> Var:
        return record(ops.relu(x.value), [x])

    def add(self, a: Var, b: Var) -> Var:
        return record(ops.add(a.value, b.value), [a, b])

    def cbr(self, x: Var, conv: str, bn: str, km) -> Var:
        return self.relu(self.bn(self.conv(x, conv, km), bn))

    def lrp_residual(self, x: Var, name: str, cfg: LrpConfig) -> Var:
        out, _ = lrp_apply(x, self.p, f"{name}.lrp.", cfg)
        return self.add(x, out)

    def stage(self, x: Var, name: str, cin: int, cout: int, lrp: LrpConfig | None) -> Var:
        placement = lrp.placement if lrp is not None else None
        if placement == "before":
            x = self.lrp_residual(x, name, lrp)
        km = ops.submanifold_map(x.value, 1)
        h = self.cbr(x, f"{name}.conv1", f"{name}.bn1", km)
        if placement == "middle":
            h = self.lrp_residual(h, name, lrp)
        h = self.cbr(h, f"{name}.conv2", f"{name}.bn2", km)
        skip = x if cin == cout else self.conv(x, f"{name}.proj", ops.pointwise_map(x.value))
        y = self.add(h, skip)
        if placement == "after":
            y = self.lrp_residual(y, name, lrp)
        elif placement == "parallel":
            out, _ = lrp_apply(skip, self.p, f"{name}.lrp.", lrp)
            y = self.add(y, out)
        return y


def _forward(x, model: Model, training: bool, lrp: LrpConfig | None) -> Var:
    cfg = model.cfg
    xv = x if isinstance(x, Var) else leaf(x)
    if len(xv.value) == 0:
        raise ValueError("empty input tensor")
    if xv.value.channels != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {xv.value.channels}")
    nb = _Builder(model, training)
    layout = {name: (cin, cout) for name, cin, cout in stage_layout(cfg)}

    skips = []
    h = xv
    for s in range(NUM_STAGES):
        name = f"enc{s}"
        h = nb.stage(h, name, *layout[name], lrp)
        if s < NUM_STAGES - 1:
            skips.append(h)
            h = nb.cbr(h, f"down{s}.conv", f"down{s}.bn", ops.downsample_map(h.value, 2))
    for s in range(NUM_STAGES - 2, -1, -1):
        fine = skips[s]
        h = nb.cbr(h, f"up{s}.conv", f"up{s}.bn", ops.upsample_map(h.value, fine.value, 2))
        h = record(ops.concat(h.value, fine.value), [h, fine])
        name = f"dec{s}"
        h = nb.stage(h, name, *layout[name], lrp)
    return record(ops.linear(h.value, model.params["head.weight"], model.params["head.bias"]),
                  [h], ["head.weight", "head.bias"])


def unet_forward(x, model: Model, training: bool = False) -> Var:
    """Baseline U-Net logits (LRP parameters, if present, are ignored)."""
    return _forward(x, model, training, None)


def lrpnet_forward(x, model: Model, training: bool = False) -> Var:
    """U-Net logits with an LRP block in every encoder and decoder stage."""
    return _forward(x, model, training, model.cfg.lrp)


def forward(x, model: Model, training: bool = False) -> Var:
    return lrpnet_forward(x, model, training) if model.cfg.lrp is not None else unet_forward(
        x, model, training
    )


def stage_forward(x: Var, model: Model, name: str, training: bool = False,
                  lrp: LrpConfig | None = None) -> Var:
    """Graph-level run of one stage of ``model``, optionally with its LRP block."""
    cin, cout = {n: (ci, co) for n, ci, co in stage_layout(model.cfg)}[name]
    return _Builder(model, training).stage(x, name, cin, cout, lrp)


def resblock_forward(x: SparseTensor, model: Model, name: str, training: bool = False) -> ops.TapeNode:
    """One stage block of ``model`` as a TapeNode; backward returns (dx, *param grads)."""
    from .autograd import backprop

    layout = {n: (cin, cout) for n, cin, cout in stage_layout(model.cfg)}
    cin, cout = layout[name]
    xv = leaf(x)
    out = _Builder(model, training).stage(xv, name, cin, cout, None)
    names = [n for n, _ in param_shapes(model.cfg.baseline()) if n.startswith(name + ".")]

    def backward(g):
        grads = backprop(out, g)
        return (xv.grad, *[grads.get(n, np.zeros_like(model.params[n])) for n in names])

    node = ops.TapeNode(out.value, backward)
    node.param_names = names
    return node


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"LRPN"
FORMAT_VERSION = 1


def save_checkpoint(path, model: Model, meta: dict | None = None) -> None:
    """Binary checkpoint: header, key-value config block, then named float64 tensors.

    Written to a temporary name and renamed into place.
    """
    from .config import network_config_to_kv

    kv = network_config_to_kv(model.cfg)
    for k, v in (meta or {}).items():
        kv[f"meta.{k}"] = str(v)
    text = "".join(f"{k} = {v}\n" for k, v in kv.items()).encode()
    tensors = list(model.params.items()) + [(f"buffer:{k}", v) for k, v in model.buffers.items()]
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(text)), text,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[Model, dict]:
    from .config import network_config_from_kv

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an LRPN checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n_text,) = struct.unpack_from("<I", data, 8)
    pos = 12
    text = data[pos:pos + n_text].decode()
    pos += n_text
    kv = {}
    for line in text.splitlines():
        k, v = line.split(" = ", 1)
        kv[k] = v
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    cfg = network_config_from_kv({k: v for k, v in kv.items() if not k.startswith("meta.")})
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params, buffers = {}, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
        if name.startswith("buffer:"):
            buffers[name[7:]] = arr
        else:
            params[name] = arr
    expected = [n for n, _ in param_shapes(cfg)]
    if list(params) != expected:
        raise ValueError(f"{path}: parameter set does not match its configuration")
    return Model(cfg, params, buffers), meta
