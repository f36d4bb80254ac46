"""
Effective receptive field of one stage
======================================

The effective receptive field of an output voxel is the size of the gradient
of its logits with respect to every input voxel.  A residual block of two
3x3x3 convolutions reaches two voxels out; an LRP block after it adds
thirteen more, clipped here by the edge of the grid.
"""

import numpy as np

from lrpnet.erf import erf_compute, reachable_set
from lrpnet.lrp import LrpConfig
from lrpnet.network import NetworkConfig, init_model, stage_forward
from lrpnet.voxel import SparseTensor

rng = np.random.default_rng(1)

###############################################################################
# A narrow network, so the stage is cheap.  Random selection weights make the
# blend of taps differ from voxel to voxel.

cfg = NetworkConfig((4, 4, 8, 8), lrp=LrpConfig())
model = init_model(cfg, rng)
for name in model.params:
    if name.endswith("sel.weight"):
        model.params[name] = rng.standard_normal(model.params[name].shape)

###############################################################################
# A fully occupied 29^3 block with the focus in the middle.

n = 29
cells = np.argwhere(np.ones((n, n, n), bool))
coords = np.hstack([np.zeros((len(cells), 1), np.int64), cells])
scene = SparseTensor(coords, rng.standard_normal((len(cells), 4)))
focus = (n // 2,) * 3

plain = erf_compute(lambda v, p: stage_forward(v, model, "enc1"), None, scene, focus)
wide = erf_compute(lambda v, p: stage_forward(v, model, "enc1", lrp=cfg.lrp), None, scene, focus)

###############################################################################
# Support size and the Chebyshev radius of the support.

def radius(erf):
    pts = np.array(sorted(erf.support()))
    return int(np.abs(pts - focus).max())


print(f"stage:       {len(plain.support()):5d} voxels, radius {radius(plain)}")
print(f"stage + LRP: {len(wide.support()):5d} voxels, radius {radius(wide)}")
print("stage support inside stage + LRP support:", plain.support() < wide.support())

###############################################################################
# A single draw follows one argmax path per channel, so it covers only part of
# the theoretical field.  The radius still shows the reach.

theory = reachable_set(cells, (1, 3, 9), focus)
print(f"reachable set of the cascade alone: {len(theory)} voxels")

###############################################################################
# Gradient magnitude by distance from the focus, a text version of a heat map.

dist = np.abs(plain.coords[:, 1:] - focus).max(axis=1)
for r in range(0, radius(wide) + 1, 2):
    ring = dist == r
    print(f"r={r:2d}  stage {plain.magnitude[ring].sum():9.3f}   stage+LRP {wide.magnitude[ring].sum():9.3f}")
