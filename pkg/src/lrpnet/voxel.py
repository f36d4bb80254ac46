"""Sparse voxel tensors, voxelization and projection of voxel predictions to points."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

# 18 bits per spatial axis, 9 bits of batch index -> 63-bit keys.
_AXIS_BITS = 18
_AXIS_OFFSET = 1 << (_AXIS_BITS - 1)
AXIS_LIMIT = _AXIS_OFFSET - 1
_BATCH_LIMIT = (1 << (63 - 3 * _AXIS_BITS)) - 1

DEBUG = bool(os.environ.get("LRPNET_DEBUG"))


class ShapeError(ValueError):
    """Raised when array shapes of tensors or parameters do not agree."""


class VoxelCoord(NamedTuple):
    batch: int
    x: int
    y: int
    z: int


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Encode (batch, x, y, z) rows as int64 keys whose order is lexicographic."""
    coords = np.asarray(coords, dtype=np.int64)
    if coords.size and (
        coords[:, 0].min() < 0
        or coords[:, 0].max() > _BATCH_LIMIT
        or np.abs(coords[:, 1:]).max() > AXIS_LIMIT
    ):
        raise ValueError("voxel coordinate outside the encodable range")
    key = coords[:, 0]
    for axis in (1, 2, 3):
        key = (key << _AXIS_BITS) | (coords[:, axis] + _AXIS_OFFSET)
    return key


def pack_offsets(offsets: np.ndarray) -> np.ndarray:
    """Key deltas such that pack(c) + delta == pack(c + offset) for in-range results."""
    offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, 3)
    return (offsets[:, 0] << (2 * _AXIS_BITS)) + (offsets[:, 1] << _AXIS_BITS) + offsets[:, 2]


class CoordIndex:
    """Exact-match lookup table from voxel coordinates to row indices.

    Backed by a sorted key array; a query is one binary search, so batched
    lookups are vectorised.
    """

    def __init__(self, coords: np.ndarray):
        keys = pack_coords(coords)
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        if len(sorted_keys) > 1 and np.any(sorted_keys[1:] == sorted_keys[:-1]):
            raise ValueError("duplicate voxel coordinates")
        self._keys = sorted_keys
        self._rows = order

    def __len__(self) -> int:
        return len(self._keys)

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index per query coordinate, -1 where absent."""
        return self.lookup_keys(pack_coords(np.atleast_2d(coords)))

    def lookup_keys(self, keys: np.ndarray) -> np.ndarray:
        if len(self._keys) == 0:
            return np.full(len(keys), -1, dtype=np.int64)
        pos = np.searchsorted(self._keys, keys)
        pos_clipped = np.minimum(pos, len(self._keys) - 1)
        hit = self._keys[pos_clipped] == keys
        return np.where(hit, self._rows[pos_clipped], -1)

    def get(self, coord) -> int | None:
        row = int(self.lookup(np.asarray(coord, dtype=np.int64).reshape(1, 4))[0])
        return None if row < 0 else row

    def __contains__(self, coord) -> bool:
        return self.get(coord) is not None


class SparseTensor:
    """N unique voxel coordinates (batch, x, y, z) paired with an N x C feature matrix.

    Coordinates are lattice indices of the tensor's own level; ``stride`` records
    how many finest-level voxels one lattice step spans.  Tensors are treated as
    immutable.  Tensors sharing a coordinate array also share a cache of
    coordinate indices and kernel maps.
    """

    __slots__ = ("coords", "features", "stride", "cache")

    def __init__(self, coords, features, stride: int = 1, *, check: bool = True, cache=None):
        coords = np.asarray(coords, dtype=np.int64)
        features = np.asarray(features, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 4:
            raise ShapeError(f"coords must be N x 4, got {coords.shape}")
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ShapeError(
                f"features must be N x C with N={coords.shape[0]}, got {features.shape}"
            )
        if stride < 1:
            raise ValueError("stride must be positive")
        self.coords = coords
        self.features = features
        self.stride = int(stride)
        self.cache = {} if cache is None else cache
        if check or DEBUG:
            if not np.all(np.isfinite(features)):
                raise ValueError("non-finite feature values")
            if "index" not in self.cache:
                self.cache["index"] = CoordIndex(coords)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __repr__(self) -> str:
        return f"SparseTensor(n={len(self)}, channels={self.channels}, stride={self.stride})"

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def coord(self, row: int) -> VoxelCoord:
        return VoxelCoord(*(int(v) for v in self.coords[row]))

    def coord_list(self) -> list[VoxelCoord]:
        return [VoxelCoord(*map(int, c)) for c in self.coords]

    def index(self) -> CoordIndex:
        idx = self.cache.get("index")
        if idx is None:
            idx = self.cache["index"] = CoordIndex(self.coords)
        return idx

    def with_features(self, features) -> "SparseTensor":
        """Same coordinates (and shared cache), new features."""
        return SparseTensor(self.coords, features, self.stride, check=False, cache=self.cache)


def build_coord_index(t: SparseTensor) -> CoordIndex:
    return t.index()


def stride_coords(t: SparseTensor, factor: int) -> tuple[np.ndarray, int]:
    """Unique floor-divided coordinates of ``t`` and the resulting stride.

    Output rows are in lexicographic (batch, x, y, z) order.
    """
    if factor < 2:
        raise ValueError("stride factor must be >= 2")
    coarse = t.coords.copy()
    coarse[:, 1:] = np.floor_divide(coarse[:, 1:], factor)
    keys = pack_coords(coarse)
    _, first = np.unique(keys, return_index=True)
    return coarse[first], t.stride * factor


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        m = len(self.positions)
        if m == 0:
            raise ValueError("point cloud must contain at least one point")
        if len(self.colors) != m or len(self.labels) != m:
            raise ShapeError("positions, colors and labels must have equal length")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class VoxelMap:
    point_to_voxel: np.ndarray


def voxelize(
    pc: PointCloud, resolution: float, batch: int = 0
) -> tuple[SparseTensor, VoxelMap, np.ndarray]:
    """Quantise a point cloud into a sparse tensor of averaged colours.

    Points falling into one cell are merged: colours are averaged and the
    label is the majority over labelled points (ties go to the smallest
    label id; a cell with only unlabelled points gets -1).
    Rows are in lexicographic coordinate order, so the result does not depend
    on point order.
    """
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    if not np.all(np.isfinite(pc.positions)):
        raise ValueError("point positions must be finite")
    cells = np.floor(pc.positions / resolution).astype(np.int64)
    coords = np.empty((len(cells), 4), dtype=np.int64)
    coords[:, 0] = batch
    coords[:, 1:] = cells
    keys = pack_coords(coords)
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    n = len(first)

    counts = np.bincount(inverse, minlength=n).astype(np.float64)
    feats = np.stack(
        [np.bincount(inverse, weights=pc.colors[:, c], minlength=n) for c in range(3)], axis=1
    )
    feats /= counts[:, None]

    labels = np.full(n, -1, dtype=np.int64)
    labelled = pc.labels >= 0
    if labelled.any():
        num_labels = int(pc.labels.max()) + 1
        votes = np.bincount(
            inverse[labelled] * num_labels + pc.labels[labelled], minlength=n * num_labels
        ).reshape(n, num_labels)
        has_vote = votes.sum(axis=1) > 0
        labels[has_vote] = np.argmax(votes[has_vote], axis=1)

    tensor = SparseTensor(coords[first], feats, stride=1)
    return tensor, VoxelMap(inverse.astype(np.int64)), labels


def project_predictions(voxel_labels, vmap: VoxelMap) -> np.ndarray:
    voxel_labels = np.asarray(voxel_labels, dtype=np.int64)
    idx = np.asarray(vmap.point_to_voxel, dtype=np.int64)
    if idx.size and idx.max() >= len(voxel_labels):
        raise IndexError("voxel map refers past the end of the voxel labels")
    if np.any(idx < -1):
        raise IndexError("invalid voxel map entry")
    out = np.full(len(idx), -1, dtype=np.int64)
    mapped = idx >= 0
    out[mapped] = voxel_labels[idx[mapped]]
    return out


def read_point_cloud(path) -> PointCloud:
    """Read ``x y z r g b label`` rows; ``#`` starts a comment."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append(line.split())
    if not rows:
        raise ValueError(f"{path}: no points")
    if any(len(r) != 7 for r in rows):
        raise ValueError(f"{path}: expected 7 columns per point")
    arr = np.array(rows, dtype=object)
    return PointCloud(
        arr[:, :3].astype(np.float64), arr[:, 3:6].astype(np.float64), arr[:, 6].astype(np.int64)
    )


def write_point_cloud(path, pc: PointCloud, header: str | None = None) -> None:
    with open(path, "w") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        values = np.hstack([pc.positions, pc.colors]).tolist()
        for row, lab in zip(values, pc.labels.tolist()):
            # repr of a Python float round-trips exactly
            fh.write(" ".join(map(repr, row)) + f" {lab}\n")


def read_predictions(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=np.int64)


def write_predictions(path, labels) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{int(v)}\n" for v in labels)
