"""Effective receptive fields from input gradients, and exact reachability sets.

The effective field of an output voxel is the per-voxel L2 norm of d(sum of
its logits)/d(input features).  The reachable set is the theoretical field of
a chain of dilated 3x3x3 pools on a sparse lattice: the voxels joined to the
focus by a path whose every hop lands on an occupied voxel.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .autograd import backprop, leaf
from .voxel import SparseTensor


@dataclass
class ErfMap:
    coords: np.ndarray  # N x 4, aligned with the input tensor rows
    magnitude: np.ndarray  # N, finite and >= 0
    focus: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 4)
        self.magnitude = np.asarray(self.magnitude, dtype=np.float64).reshape(-1)
        if len(self.coords) != len(self.magnitude):
            raise ValueError("coords and magnitudes differ in length")
        if not np.all(np.isfinite(self.magnitude)) or np.any(self.magnitude < 0):
            raise ValueError("magnitudes must be finite and non-negative")
        self.focus = tuple(int(v) for v in self.focus)

    def __len__(self) -> int:
        return len(self.magnitude)

    def support(self) -> set:
        """Spatial coordinates (x, y, z) with nonzero magnitude."""
        return {tuple(map(int, c[1:])) for c in self.coords[self.magnitude > 0]}


def _focus_row(scene: SparseTensor, focus) -> tuple[int, tuple]:
    focus = tuple(int(v) for v in focus)
    if len(focus) == 3:
        focus = (0,) + focus
    row = scene.index().get(focus)
    if row is None:
        raise KeyError(f"focus voxel {focus} is not occupied")
    return row, focus


def erf_compute(net, params, scene: SparseTensor, focus) -> ErfMap:
    """Input-gradient magnitudes for the output at ``focus``.

    ``net(x_var, params)`` must return the output Var.  ``focus`` is
    (batch, x, y, z) or (x, y, z) in batch 0.
    """
    row, focus = _focus_row(scene, focus)
    x = leaf(scene)
    out = net(x, params)
    seed = np.zeros_like(out.value.features)
    seed[row] = 1.0
    backprop(out, seed)
    grad = x.grad if x.grad is not None else np.zeros_like(scene.features)
    mag = np.sqrt(np.sum(grad * grad, axis=1))
    return ErfMap(scene.coords.copy(), mag, focus)


def erf_support_union(net, params, coords, focus, channels: int, draws: int = 16,
                      rng: np.random.Generator | None = None) -> set:
    """Union of supports over ``draws`` random feature draws on the same coordinates."""
    rng = rng or np.random.default_rng(0)
    coords = np.asarray(coords, dtype=np.int64)
    total = set()
    cache = {}
    for _ in range(draws):
        scene = SparseTensor(coords, rng.standard_normal((len(coords), channels)), cache=cache)
        total |= erf_compute(net, params, scene, focus).support()
    return total


def _offsets(d):
    return [(a, b, c) for a in (-d, 0, d) for b in (-d, 0, d) for c in (-d, 0, d)]


def reachable_set(coords, dilation_ladder, focus) -> set:
    """Occupied voxels whose features can reach the output of the cascade at ``focus``.

    The cascade applies the ladder in order, so, walking back from the focus,
    the last dilation is expanded first.  Every intermediate voxel must be
    occupied.  ``coords`` may be N x 3 or N x 4 (a single batch); the result
    holds (x, y, z) tuples.
    """
    arr = np.asarray(coords, dtype=np.int64)
    if arr.ndim == 2 and arr.shape[1] == 4:
        arr = arr[:, 1:]
    occupied = {tuple(map(int, c)) for c in arr.reshape(-1, 3)}
    focus = tuple(int(v) for v in focus)[-3:]
    if focus not in occupied:
        raise KeyError(f"focus voxel {focus} is not occupied")
    frontier = {focus}
    for d in reversed(list(dilation_ladder)):
        nxt = set()
        for x, y, z in frontier:
            for dx, dy, dz in _offsets(int(d)):
                p = (x + dx, y + dy, z + dz)
                if p in occupied:
                    nxt.add(p)
        frontier = nxt
    return frontier


def erf_export(erf: ErfMap, path, config_lines=()) -> None:
    """CSV ``x,y,z,magnitude`` preceded by ``#`` comment lines (focus, config)."""
    lines = [f"# focus = {','.join(map(str, erf.focus))}"]
    lines += [f"# {line}" for line in config_lines]
    lines.append("x,y,z,magnitude")
    for c, m in zip(erf.coords.tolist(), erf.magnitude.tolist()):
        lines.append(f"{c[1]},{c[2]},{c[3]},{m!r}")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def erf_read(path) -> ErfMap:
    focus, meta, rows = None, {}, []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("focus = "):
                    focus = tuple(int(v) for v in body[8:].split(","))
                else:
                    meta.setdefault("config", []).append(body)
            elif line and line != "x,y,z,magnitude":
                x, y, z, m = line.split(",")
                rows.append((int(x), int(y), int(z), float(m)))
    if focus is None:
        raise ValueError(f"{path}: missing focus header")
    b = focus[0] if len(focus) == 4 else 0
    coords = np.array([(b, x, y, z) for x, y, z, _ in rows], dtype=np.int64).reshape(-1, 4)
    mag = np.array([r[3] for r in rows], dtype=np.float64)
    return ErfMap(coords, mag, focus, meta)
