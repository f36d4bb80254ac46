"""Synthetic dataset directories: one point-cloud file per scene plus a manifest.

The manifest has one ``split filename`` line per scene, split being ``train``
or ``val``.  Scene i is generated from the ``data`` random stream of the
experiment seed, so a dataset is fully determined by (scene settings, seed).
"""

from __future__ import annotations

import os
import pathlib

from .synth import SynthSceneSpec, synth_scene
from .train import stream
from .voxel import PointCloud, read_point_cloud, write_point_cloud

MANIFEST = "manifest"
SPLITS = ("train", "val")


def scene_seed(seed: int, index: int) -> int:
    return int(stream(seed, "data", index).integers(2**62))


def generate_scenes(spec: SynthSceneSpec, seed: int, num_train: int, num_val: int):
    """(train clouds, val clouds) exactly as :func:`write_dataset` would store them."""
    scenes = [synth_scene(spec, scene_seed(seed, i)) for i in range(num_train + num_val)]
    return scenes[:num_train], scenes[num_train:]


def scene_name(index: int) -> str:
    return f"scene_{index:04d}.txt"


def write_dataset(out_dir, spec: SynthSceneSpec, seed: int, num_train: int, num_val: int,
                  header_lines=()) -> pathlib.Path:
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = "\n".join(header_lines) or None
    manifest = []
    for i in range(num_train + num_val):
        pc = synth_scene(spec, scene_seed(seed, i))
        name = scene_name(i)
        tmp = out / (name + ".tmp")
        write_point_cloud(tmp, pc, header=header)
        os.replace(tmp, out / name)
        manifest.append(f"{'train' if i < num_train else 'val'} {name}\n")
    tmp = out / (MANIFEST + ".tmp")
    with open(tmp, "w") as fh:
        fh.writelines(manifest)
    os.replace(tmp, out / MANIFEST)
    return out


def read_manifest(data_dir) -> list[tuple[str, str]]:
    path = pathlib.Path(data_dir) / MANIFEST
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or parts[0] not in SPLITS:
                raise ValueError(f"{path}:{lineno}: expected 'train|val filename'")
            entries.append((parts[0], parts[1]))
    return entries


def read_split(data_dir, split: str) -> tuple[list[str], list[PointCloud]]:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    names = [name for s, name in read_manifest(data_dir) if s == split]
    return names, [read_point_cloud(pathlib.Path(data_dir) / n) for n in names]
