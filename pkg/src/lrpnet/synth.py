"""Synthetic labelled rooms: floor, four walls and a few objects.

With ``long_range_coupling`` every scene holds beacon/dependent pairs.  A
dependent is a grey pillar that looks the same whatever its label; its label is
decided by the kind of its beacon (a red box or a blue sphere) standing
0.5-0.62 m away.  Every other box or sphere is kept farther than
``isolation_distance`` from the dependent, so the label can only be read off
from a window reaching past the beacon distance but not much farther.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxel import PointCloud

FLOOR, WALL, BOX, SPHERE, LSHAPE, DEPENDENT_A, DEPENDENT_B = range(7)
CLASS_NAMES = ("floor", "wall", "box", "sphere", "lshape", "dependent_a", "dependent_b")
KIND_LABEL = {"box": BOX, "sphere": SPHERE, "lshape": LSHAPE}
BEACON_KINDS = ("box", "sphere")
COUPLING = {BOX: DEPENDENT_A, SPHERE: DEPENDENT_B}

_BASE_COLOR = {
    FLOOR: (0.55, 0.42, 0.30),
    WALL: (0.82, 0.80, 0.76),
    BOX: (0.80, 0.22, 0.20),
    SPHERE: (0.20, 0.30, 0.82),
    LSHAPE: (0.25, 0.70, 0.30),
    DEPENDENT_A: (0.50, 0.50, 0.50),
    DEPENDENT_B: (0.50, 0.50, 0.50),
}


@dataclass(frozen=True)
class SynthSceneSpec:
    room_extent: tuple = (2.4, 2.4, 0.3)
    wall_thickness: float = 0.02
    object_count: tuple = (1, 3)
    object_kinds: tuple = ("box", "sphere", "lshape")
    num_classes: int = 7
    points_per_m2: float = 1000.0
    long_range_coupling: bool = True
    pairs: int = 2
    coupling_distance: tuple = (0.5, 0.62)
    isolation_distance: float = 0.9
    color_noise: float = 0.04

    def __post_init__(self):
        if len(self.room_extent) != 3 or min(self.room_extent) <= 0:
            raise ValueError("room extent must be three positive lengths")
        if self.wall_thickness <= 0 or self.points_per_m2 <= 0:
            raise ValueError("thickness and density must be positive")
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise ValueError("object_count must be a (min, max) range")
        if self.num_classes < 2:
            raise ValueError("at least two classes required")
        if any(k not in KIND_LABEL for k in self.object_kinds):
            raise ValueError(f"object kinds must be drawn from {tuple(KIND_LABEL)}")
        needed = DEPENDENT_B + 1 if self.long_range_coupling else LSHAPE + 1
        if self.num_classes < needed:
            raise ValueError(f"this scene layout needs num_classes >= {needed}")


def _sample_rect(rng, origin, u, v, density, thickness, normal):
    area = np.linalg.norm(u) * np.linalg.norm(v)
    n = max(1, int(round(area * density)))
    a, b = rng.random(n), rng.random(n)
    # slab extends from the surface towards +normal
    t = rng.random(n) * thickness
    return origin + a[:, None] * u + b[:, None] * v + t[:, None] * normal


def _box_surface(rng, lo, hi, density, thickness, bottom=False):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    d = hi - lo
    ex, ey, ez = np.eye(3)
    faces = [
        (np.array([lo[0], lo[1], hi[2]]), ex * d[0], ey * d[1], ez),
        (lo, ex * d[0], ez * d[2], ey),
        (np.array([lo[0], hi[1], lo[2]]), ex * d[0], ez * d[2], ey),
        (lo, ey * d[1], ez * d[2], ex),
        (np.array([hi[0], lo[1], lo[2]]), ey * d[1], ez * d[2], ex),
    ]
    if bottom:
        faces.append((lo, ex * d[0], ey * d[1], ez))
    return np.vstack([_sample_rect(rng, o, u, v, density, thickness, nrm) for o, u, v, nrm in faces])


def _sphere_surface(rng, center, radius, density):
    n = max(1, int(round(4 * np.pi * radius**2 * density)))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(center) + radius * d


def _object_points(rng, kind, center, size, density, thickness):
    cx, cy = center
    h = size
    if kind == "box":
        return _box_surface(rng, (cx - size / 2, cy - size / 2, 0.0), (cx + size / 2, cy + size / 2, h),
                            density, thickness)
    if kind == "sphere":
        r = size / 2
        return _sphere_surface(rng, (cx, cy, r), r, density)
    if kind == "lshape":
        a = _box_surface(rng, (cx - size / 2, cy - size / 2, 0.0), (cx + size / 2, cy - size / 6, h * 0.6),
                         density, thickness)
        b = _box_surface(rng, (cx - size / 2, cy - size / 6, 0.0), (cx - size / 6, cy + size / 2, h * 0.6),
                         density, thickness)
        return np.vstack([a, b])
    if kind == "pillar":
        w = size / 4
        return _box_surface(rng, (cx - w, cy - w, 0.0), (cx + w, cy + w, size), density, thickness)
    raise ValueError(kind)


def _room_points(rng, spec):
    sx, sy, sz = spec.room_extent
    dens, t = spec.points_per_m2, spec.wall_thickness
    ex, ey, ez = np.eye(3)
    floor = _sample_rect(rng, np.zeros(3), ex * sx, ey * sy, dens, t, ez)
    walls = np.vstack([
        _sample_rect(rng, np.zeros(3), ex * sx, ez * sz, dens, t, ey),
        _sample_rect(rng, np.array([0.0, sy - 1e-6, 0.0]), ex * sx, ez * sz, dens, t, -ey),
        _sample_rect(rng, np.zeros(3), ey * sy, ez * sz, dens, t, ex),
        _sample_rect(rng, np.array([sx - 1e-6, 0.0, 0.0]), ey * sy, ez * sz, dens, t, -ex),
    ])
    return floor, walls


class _Layout:
    """Rejection sampler for object footprints on the floor."""

    def __init__(self, rng, spec, margin=0.15):
        self.rng = rng
        self.sx, self.sy = spec.room_extent[:2]
        self.margin = margin
        self.placed = []  # (center, radius, kind)

    def free(self, c, r):
        if not (self.margin + r <= c[0] <= self.sx - self.margin - r
                and self.margin + r <= c[1] <= self.sy - self.margin - r):
            return False
        return all(np.hypot(*(c - q)) > r + qr + 0.05 for q, qr, _ in self.placed)

    def random_point(self, r):
        return np.array([self.rng.uniform(self.margin + r, self.sx - self.margin - r),
                         self.rng.uniform(self.margin + r, self.sy - self.margin - r)])


def synth_scene(spec: SynthSceneSpec, seed: int) -> PointCloud:
    """Deterministic labelled room.  ``pc.meta['objects']`` lists what was placed."""
    rng = np.random.default_rng(seed)
    floor, walls = _room_points(rng, spec)
    parts = [(floor, FLOOR), (walls, WALL)]
    layout = _Layout(rng, spec)
    objects = []
    dependents = []
    lo_d, hi_d = spec.coupling_distance

    def far_from_dependents(c, exclude=None):
        return all(np.hypot(*(c - objects[i]["center"])) >= spec.isolation_distance
                   for i in dependents if i != exclude)

    if spec.long_range_coupling:
        for _ in range(spec.pairs):
            for _attempt in range(200):
                size = rng.uniform(0.16, 0.22)
                dep_c = layout.random_point(0.1)
                angle = rng.uniform(0, 2 * np.pi)
                dist = rng.uniform(lo_d, hi_d)
                beacon_c = dep_c + dist * np.array([np.cos(angle), np.sin(angle)])
                if not (layout.free(dep_c, 0.1) and layout.free(beacon_c, size / 2 * 1.5)):
                    continue
                # beacons of other pairs must stay out of this dependent's reach and vice versa
                if any(o["kind"] in BEACON_KINDS and np.hypot(*(dep_c - o["center"])) < spec.isolation_distance
                       for o in objects):
                    continue
                if not far_from_dependents(beacon_c):
                    continue
                kind = BEACON_KINDS[rng.integers(len(BEACON_KINDS))]
                objects.append(dict(kind=kind, label=KIND_LABEL[kind], center=beacon_c, size=size))
                layout.placed.append((beacon_c, size / 2 * 1.5, kind))
                b_idx = len(objects) - 1
                dep_label = COUPLING[KIND_LABEL[kind]]
                objects.append(dict(kind="pillar", label=dep_label, center=dep_c, size=0.24,
                                    beacon=b_idx))
                layout.placed.append((dep_c, 0.1, "pillar"))
                dependents.append(len(objects) - 1)
                break

    lo, hi = spec.object_count
    n_extra = int(rng.integers(lo, hi + 1))
    for _ in range(n_extra):
        for _attempt in range(100):
            kind = spec.object_kinds[rng.integers(len(spec.object_kinds))]
            size = rng.uniform(0.16, 0.26)
            r = size / 2 * 1.5
            c = layout.random_point(r)
            if not layout.free(c, r):
                continue
            if kind in BEACON_KINDS and not far_from_dependents(c):
                continue
            objects.append(dict(kind=kind, label=KIND_LABEL[kind], center=c, size=size))
            layout.placed.append((c, r, kind))
            break

    for obj in objects:
        pts = _object_points(rng, obj["kind"], obj["center"], obj["size"],
                             spec.points_per_m2, spec.wall_thickness)
        parts.append((pts, obj["label"]))

    positions = np.vstack([p for p, _ in parts])
    labels = np.concatenate([np.full(len(p), lab, dtype=np.int64) for p, lab in parts])
    base = np.array([_BASE_COLOR[int(lab)] for lab in range(DEPENDENT_B + 1)])
    colors = base[labels] + rng.normal(0.0, spec.color_noise, size=(len(labels), 3))
    colors = np.clip(colors, 0.0, 1.0)
    meta = {"objects": [{**o, "center": tuple(float(v) for v in o["center"])} for o in objects]}
    return PointCloud(positions, colors, labels, meta=meta)
