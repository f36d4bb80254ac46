import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrpnet.voxel import (
    CoordIndex, PointCloud, ShapeError, SparseTensor, VoxelCoord, VoxelMap, build_coord_index,
    pack_coords, project_predictions, read_point_cloud, read_predictions, stride_coords,
    voxelize, write_point_cloud, write_predictions,
)


def cloud(pos, col=None, lab=None):
    pos = np.asarray(pos, float).reshape(-1, 3)
    col = np.zeros_like(pos) if col is None else col
    lab = np.zeros(len(pos), int) if lab is None else lab
    return PointCloud(pos, col, lab)


def test_voxelcoord_order_and_hash():
    a, b = VoxelCoord(0, 1, 2, 3), VoxelCoord(0, 1, 2, 4)
    assert a < b < VoxelCoord(1, -5, -5, -5)
    assert len({a, VoxelCoord(0, 1, 2, 3)}) == 1


def test_packed_keys_follow_lexicographic_order():
    rng = np.random.default_rng(0)
    c = np.hstack([rng.integers(0, 4, (500, 1)), rng.integers(-1000, 1000, (500, 3))])
    keys = pack_coords(c)
    by_key = c[np.argsort(keys)]
    by_lex = c[np.lexsort(c.T[::-1])]
    assert np.array_equal(by_key, by_lex)


def test_tensor_invariants():
    with pytest.raises(ShapeError):
        SparseTensor(np.zeros((2, 4)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        SparseTensor([[0, 0, 0, 0], [0, 0, 0, 0]], np.zeros((2, 1)))
    with pytest.raises(ValueError):
        SparseTensor([[0, 0, 0, 0]], [[np.nan]])
    empty = SparseTensor(np.zeros((0, 4)), np.zeros((0, 5)))
    assert len(empty) == 0 and empty.channels == 5


# --- voxelize -------------------------------------------------------------


def test_single_point_floor_arithmetic():
    pc = cloud([[0.03, 0.05, 0.01]], [[0.2, 0.4, 0.6]], [3])
    t, vmap, lab = voxelize(pc, 0.02)
    assert t.coord_list() == [VoxelCoord(0, 1, 2, 0)]
    assert np.allclose(t.features, [[0.2, 0.4, 0.6]])
    assert list(lab) == [3] and list(vmap.point_to_voxel) == [0]


def test_merge_averages_colour_and_votes_label():
    pc = cloud([[0.001, 0.001, 0.001], [0.002, 0.002, 0.002]], [[1, 0, 0], [0, 0, 1]], [2, 2])
    t, _, lab = voxelize(pc, 0.02)
    assert len(t) == 1
    assert np.allclose(t.features[0], [0.5, 0, 0.5])
    assert lab[0] == 2


def test_majority_tie_goes_to_smallest_label_and_unlabelled_abstain():
    pc = cloud(np.full((5, 3), 0.001), lab=[4, 1, 4, 1, -1])
    _, _, lab = voxelize(pc, 0.1)
    assert lab[0] == 1
    _, _, lab = voxelize(cloud(np.full((2, 3), 0.001), lab=[-1, -1]), 0.1)
    assert lab[0] == -1


def test_voxel_count_matches_set_oracle():
    rng = np.random.default_rng(5)
    pos = rng.uniform(-1, 1, (1000, 3))
    t, vmap, _ = voxelize(cloud(pos), 0.05)
    cells = {tuple(int(np.floor(v / 0.05)) for v in p) for p in pos}
    assert len(t) == len(cells)
    assert {tuple(c[1:]) for c in t.coords.tolist()} == cells
    for p, row in zip(pos, vmap.point_to_voxel):
        assert tuple(t.coords[row, 1:]) == tuple(int(np.floor(v / 0.05)) for v in p)


def test_voxelize_rejects_bad_input():
    with pytest.raises(ValueError):
        voxelize(cloud([[np.inf, 0, 0]]), 0.1)
    with pytest.raises(ValueError):
        voxelize(cloud([[0, 0, 0]]), 0.0)
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 200))
def test_voxelize_is_permutation_invariant(seed, m):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-0.3, 0.3, (m, 3))
    col = rng.random((m, 3))
    lab = rng.integers(-1, 4, m)
    perm = rng.permutation(m)
    t1, _, l1 = voxelize(PointCloud(pos, col, lab), 0.1)
    t2, _, l2 = voxelize(PointCloud(pos[perm], col[perm], lab[perm]), 0.1)
    assert np.array_equal(t1.coords, t2.coords)
    assert np.allclose(t1.features, t2.features, atol=1e-12)
    assert np.array_equal(l1, l2)


def test_projection_round_trip_when_cells_share_labels():
    rng = np.random.default_rng(2)
    cells = rng.integers(-20, 20, (50, 3))
    cells = np.unique(cells, axis=0)
    cell_label = rng.integers(0, 6, len(cells))
    idx = rng.integers(0, len(cells), 400)
    pos = (cells[idx] + rng.uniform(0.01, 0.99, (400, 3))) * 0.05
    pc = PointCloud(pos, rng.random((400, 3)), cell_label[idx])
    _, vmap, lab = voxelize(pc, 0.05)
    assert np.array_equal(project_predictions(lab, vmap), pc.labels)


# --- projection -------------------------------------------------------------


def test_projection_examples():
    labels = np.array([3, 1, 4])
    assert list(project_predictions(labels, VoxelMap(np.arange(3)))) == [3, 1, 4]
    assert list(project_predictions([5], VoxelMap(np.array([0, 0])))) == [5, 5]
    assert list(project_predictions([5], VoxelMap(np.array([-1, 0])))) == [-1, 5]
    with pytest.raises(IndexError):
        project_predictions([1, 2], VoxelMap(np.array([2])))


def test_projection_matches_naive_loop():
    rng = np.random.default_rng(8)
    vl = rng.integers(0, 9, 30)
    vm = rng.integers(-1, 30, 300)
    naive = [int(vl[i]) if i >= 0 else -1 for i in vm]
    assert list(project_predictions(vl, VoxelMap(vm))) == naive


# --- coordinate index -------------------------------------------------------


def test_index_examples():
    t = SparseTensor([[0, 0, 0, 0]], [[1.0]])
    idx = build_coord_index(t)
    assert idx.get((0, 0, 0, 0)) == 0
    assert idx.get((0, 1, 0, 0)) is None
    with pytest.raises(ValueError):
        CoordIndex(np.array([[0, 1, 2, 3], [0, 1, 2, 3]]))


def test_index_against_linear_scan():
    rng = np.random.default_rng(11)
    coords = np.unique(np.hstack([rng.integers(0, 3, (12000, 1)),
                                  rng.integers(-500, 500, (12000, 3))]), axis=0)[:10000]
    idx = CoordIndex(coords)
    assert np.array_equal(idx.lookup(coords), np.arange(len(coords)))
    present = {tuple(c) for c in coords.tolist()}
    probes = np.hstack([rng.integers(0, 3, (20000, 1)), rng.integers(-500, 500, (20000, 3))])
    absent = np.array([p for p in probes.tolist() if tuple(p) not in present][:10000])
    assert len(absent) == 10000
    assert np.all(idx.lookup(absent) == -1)
    # spot-check hits against a brute-force scan
    for row in rng.integers(0, len(coords), 20):
        scan = np.nonzero(np.all(coords == coords[row], axis=1))[0]
        assert list(scan) == [idx.get(coords[row])]


# --- stride -----------------------------------------------------------------


def test_stride_examples():
    t = SparseTensor([[0, 0, 0, 0], [0, 1, 1, 1]], np.zeros((2, 1)))
    c, s = stride_coords(t, 2)
    assert c.tolist() == [[0, 0, 0, 0]] and s == 2
    t = SparseTensor([[0, 0, 0, 0], [0, 2, 0, 0]], np.zeros((2, 1)), stride=2)
    c, s = stride_coords(t, 2)
    assert c.tolist() == [[0, 0, 0, 0], [0, 1, 0, 0]] and s == 4
    with pytest.raises(ValueError):
        stride_coords(t, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 5))
def test_stride_matches_set_oracle(seed, f):
    rng = np.random.default_rng(seed)
    coords = np.unique(np.hstack([rng.integers(0, 2, (80, 1)), rng.integers(-30, 30, (80, 3))]), axis=0)
    c, _ = stride_coords(SparseTensor(coords, np.zeros((len(coords), 1))), f)
    oracle = {(b, x // f, y // f, z // f) for b, x, y, z in coords.tolist()}
    assert {tuple(r) for r in c.tolist()} == oracle
    assert len(c) == len(oracle)


# --- files ------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_point_cloud_file_round_trip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 50))
    pc = PointCloud(rng.normal(size=(m, 3)) * 10, rng.random((m, 3)), rng.integers(-1, 7, m))
    path = tmp_path_factory.mktemp("pc") / "scene.txt"
    write_point_cloud(path, pc, header="made for a test\nsecond line")
    back = read_point_cloud(path)
    assert np.array_equal(back.positions, pc.positions)
    assert np.array_equal(back.colors, pc.colors)
    assert np.array_equal(back.labels, pc.labels)


def test_predictions_file_round_trip(tmp_path):
    write_predictions(tmp_path / "p", [3, -1, 0])
    assert list(read_predictions(tmp_path / "p")) == [3, -1, 0]


def test_malformed_point_file(tmp_path):
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(ValueError):
        read_point_cloud(tmp_path / "bad.txt")
