"""Variant grids for the ablation axes, and the runner that trains and scores them."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import replace

import numpy as np

from .lrp import LrpConfig, PLACEMENTS
from .network import NetworkConfig, baseline_param_count, forward, lrp_overhead
from .train import TrainConfig, train
from .voxel import voxelize

AXES = ("position", "op", "range", "component")

# window-size sets per op kind, in table order
RANGE_ROWS = {
    "max": ((3,), (9,), (27,), (9, 27), (3, 9, 27)),
    "avg": ((27,), (9, 27), (3, 9, 27)),
    "conv": ((27,), (9, 27), (3, 9, 27)),
}

ROW_COLUMNS = ("axis", "variant", "op_kind", "ranges", "dilations", "selection", "placement",
               "params", "runtime_ms", "miou")


def _range_name(ranges):
    return "[" + ",".join(f"x{r}" for r in ranges) + "]"


def ablation_grid(axis: str, net: NetworkConfig) -> list[tuple[str, NetworkConfig]]:
    """(variant name, network config) rows of one ablation axis.

    ``net`` supplies widths and classes; its LRP settings (or the defaults)
    supply whatever the axis does not vary.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    base = net.lrp or LrpConfig()
    with_lrp = lambda lrp: replace(net, lrp=lrp)
    if axis == "position":
        return [(p, with_lrp(replace(base, placement=p))) for p in PLACEMENTS]
    if axis == "component":
        flat = (1,) * len(base.dilations)
        return [
            ("baseline", net.baseline()),
            ("maxpool", with_lrp(LrpConfig(dilations=flat, selection="none", placement=base.placement))),
            ("maxpool+dilation", with_lrp(LrpConfig(selection="none", placement=base.placement))),
            ("maxpool+selection", with_lrp(LrpConfig(dilations=flat, selection=base.selection,
                                                     placement=base.placement))),
            ("maxpool+dilation+selection", with_lrp(LrpConfig(selection=base.selection,
                                                              placement=base.placement))),
        ]
    kinds = RANGE_ROWS if axis == "op" else {base.op_kind: RANGE_ROWS[base.op_kind]}
    rows = []
    for kind, block in kinds.items():
        for ranges in block:
            lrp = LrpConfig.from_ranges(ranges, op_kind=kind, selection=base.selection,
                                        placement=base.placement)
            rows.append((f"{kind}{_range_name(ranges)}", with_lrp(lrp)))
    return rows


def variant_params(net: NetworkConfig) -> int:
    return baseline_param_count(net) + lrp_overhead(net)


def inference_ms(model, clouds, voxel_size: float) -> float:
    """Median eval-mode forward time per scene, voxelization excluded."""
    times = []
    for pc in clouds:
        tensor, _, _ = voxelize(pc, voxel_size)
        t0 = time.perf_counter()
        forward(tensor, model, training=False)
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times)) if times else float("nan")


def run_ablation(axis: str, net: NetworkConfig, train_cfg: TrainConfig, train_clouds,
                 val_clouds, log=None) -> list[dict]:
    rows = []
    for name, cfg in ablation_grid(axis, net):
        result = train(cfg, train_cfg, train_clouds, val_clouds)
        lrp = cfg.lrp
        row = {
            "axis": axis,
            "variant": name,
            "op_kind": lrp.op_kind if lrp else "",
            "ranges": _range_name(lrp.ranges) if lrp else "",
            "dilations": "-".join(map(str, lrp.dilations)) if lrp else "",
            "selection": lrp.selection if lrp else "",
            "placement": lrp.placement if lrp else "",
            "params": variant_params(cfg),
            "runtime_ms": inference_ms(result.model, val_clouds or train_clouds, train_cfg.voxel_size),
            "miou": result.report.miou,
        }
        rows.append(row)
        if log:
            log(row)
    return rows


def format_rows(rows, columns=ROW_COLUMNS, header_lines=()) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    buf = io.StringIO()
    buf.writelines(f"# {h}\n" for h in header_lines)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows([fmt(r[c]) for c in columns] for r in rows)
    return buf.getvalue()
