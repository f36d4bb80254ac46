"""
Dilated pooling on a sparse lattice
===================================

A sparse tensor keeps features only at occupied voxels.  Pooling with
dilation d looks at the 27 sites {-d, 0, d}^3 around each voxel and ignores
the empty ones.  Chaining d = 1, 3, 9 lets one voxel see a 27^3 window.
"""

import numpy as np

from lrpnet import ops
from lrpnet.erf import reachable_set
from lrpnet.lrp import LrpConfig, SelectionParams, lrp_forward
from lrpnet.oracle import DenseGrid, dense_masked_pool
from lrpnet.voxel import SparseTensor

rng = np.random.default_rng(0)

###############################################################################
# A random 16^3 scene at 30% occupancy, batch index 0, two channels.

cells = np.argwhere(rng.random((16, 16, 16)) < 0.3)
coords = np.hstack([np.zeros((len(cells), 1), np.int64), cells])
x = SparseTensor(coords, rng.standard_normal((len(cells), 2)))
print(f"{len(x)} occupied voxels out of {16 ** 3}")

###############################################################################
# Sparse max pooling against a dense masked reference.  They share no code,
# so agreement to the last bit is a real check.

grid = DenseGrid.from_points(cells, x.features, 16)
for d in (1, 3, 9):
    sparse = ops.sparse_maxpool(x, d).output.features
    dense = dense_masked_pool(grid, d, "max").at(cells)
    print(f"d={d}: identical to the dense reference: {np.array_equal(sparse, dense)}")

###############################################################################
# The kernel map lists (input row, output row) pairs per offset slot.  Its size
# shows how many neighbours each dilation actually finds.

for d in (1, 3, 9):
    km = ops.submanifold_map(x, d)
    print(f"d={d}: {len(km)} neighbour pairs, {len(km) / len(x):.1f} per voxel")

###############################################################################
# An LRP block mixes the three pooled taps with per-voxel weights from a
# linear map of the input.  Here every voxel picks the widest tap.

c = x.channels
bias = np.zeros(3 * c)
bias[2 * c:] = 1.0
widest = SelectionParams(np.zeros((c, 3 * c)), bias)
node = lrp_forward(x, widest, LrpConfig())
print("selected output equals the third tap:", np.array_equal(node.output.features, node.taps[2].features))

###############################################################################
# How far can information travel?  On a full grid the reachable set of the
# cascade is the 27^3 cube; on this sparse scene it depends on the gaps.

full = np.argwhere(np.ones((31, 31, 31), bool))
print("full grid:", len(reachable_set(full, (1, 3, 9), (15, 15, 15))), "=", 27 ** 3)
focus = tuple(int(v) for v in cells[len(cells) // 2])
for ladder in ((1,), (1, 3), (1, 3, 9)):
    print(f"ladder {ladder}: {len(reachable_set(cells, ladder, focus))} voxels reach {focus}")
