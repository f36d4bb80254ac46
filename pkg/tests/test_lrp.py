import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrpnet import ops
from lrpnet.lrp import (LrpConfig, SelectionParams, lrp_forward, lrp_param_count, lrp_param_shapes,
                        lrp_variant_forward, selection_weights, split_selection, window_sizes)
from lrpnet.oracle import DenseGrid, dense_cascade, dense_lrp, numeric_gradient, relative_error
from lrpnet.selfcheck import random_occupancy, tie_free_features
from lrpnet.voxel import ShapeError, SparseTensor


def tensor(cells, feats):
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    coords = np.hstack([np.zeros((len(cells), 1), dtype=np.int64), cells])
    return SparseTensor(coords, np.asarray(feats, float).reshape(len(cells), -1))


def branch_one(c, branches=3):
    """Selection that picks branch 1 everywhere: W = 0, b = (1..1, 0..0, ...)."""
    b = np.zeros(branches * c)
    b[:c] = 1.0
    return SelectionParams(np.zeros((c, branches * c)), b)


# --- config -------------------------------------------------------------------


def test_config_validation():
    LrpConfig()
    LrpConfig(dilations=(1, 1, 1))  # un-dilated ablation row
    for bad in [dict(dilations=()), dict(dilations=(3, 1)), dict(dilations=(1, 3, 3)),
                dict(op_kind="min"), dict(selection="softmax"), dict(placement="top"),
                dict(taps=(2, 1)), dict(taps=(0, 3))]:
        with pytest.raises(ValueError):
            LrpConfig(**bad)


def test_window_sizes_and_ranges():
    assert window_sizes((1, 3, 9)) == [3, 9, 27]
    assert LrpConfig.from_ranges([3]).dilations == (1,)
    cfg = LrpConfig.from_ranges([27])
    assert cfg.dilations == (1, 3, 9) and cfg.taps == (2,) and cfg.ranges == [27]
    cfg = LrpConfig.from_ranges([9, 27])
    assert cfg.taps == (1, 2) and cfg.branches == 2
    with pytest.raises(ValueError):
        LrpConfig.from_ranges([5])


# --- forward examples ------------------------------------------------------------


def test_isolated_voxel_branch_one_is_identity():
    x = tensor([[4, 4, 4]], [[0.7, -0.2]])
    out = lrp_forward(x, branch_one(2), LrpConfig()).output
    assert np.array_equal(out.features, x.features)
    avg = lrp_variant_forward(x, branch_one(2), LrpConfig(op_kind="avg")).output
    assert np.array_equal(avg.features, x.features)


def test_no_selection_single_dilation_is_maxpool():
    rng = np.random.default_rng(0)
    cells = random_occupancy(rng, 8, 0.4)
    x = tensor(cells, rng.standard_normal((len(cells), 3)))
    out = lrp_forward(x, None, LrpConfig(dilations=(1,), selection="none")).output
    assert np.array_equal(out.features, ops.sparse_maxpool(x, 1).output.features)


def test_conv_variant_identity_kernels_match_max_on_single_voxel():
    x = tensor([[1, 1, 1]], [[0.4, 2.0]])
    w = np.zeros((27, 2, 2))
    w[ops.CENTER_SLOT] = np.eye(2)
    convs = [ops.ConvParams(w, np.zeros(2)) for _ in range(3)]
    sel = SelectionParams(np.full((2, 6), 0.3), np.linspace(-1, 1, 6))
    conv = lrp_variant_forward(x, sel, LrpConfig(op_kind="conv"), convs).output
    mx = lrp_forward(x, sel, LrpConfig()).output
    assert np.array_equal(conv.features, mx.features)


@pytest.mark.parametrize("seed", range(10))
def test_max_block_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    cells = random_occupancy(rng, 12, (0.05, 0.3, 0.9)[seed % 3])
    f = rng.standard_normal((len(cells), 3))
    for cfg in (LrpConfig(), LrpConfig(selection="per_voxel_scalar"), LrpConfig.from_ranges([9, 27])):
        width = cfg.branches * (3 if cfg.selection == "per_channel" else 1)
        w, b = rng.standard_normal((3, width)), rng.standard_normal(width)
        out = lrp_forward(tensor(cells, f), SelectionParams(w, b, cfg.selection), cfg).output.features
        ref = dense_lrp(DenseGrid.from_points(cells, f, 12), w, b, cfg.dilations, cfg.taps,
                        per_channel=cfg.selection == "per_channel").at(cells)
        assert np.max(np.abs(out - ref)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_avg_block_matches_dense_mean_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    cells = random_occupancy(rng, 12, 0.3)
    f = rng.standard_normal((len(cells), 2))
    w, b = rng.standard_normal((2, 6)), rng.standard_normal(6)
    out = lrp_variant_forward(tensor(cells, f), SelectionParams(w, b), LrpConfig(op_kind="avg")).output
    ref = dense_lrp(DenseGrid.from_points(cells, f, 12), w, b, (1, 3, 9), mode="mean").at(cells)
    assert np.max(np.abs(out.features - ref)) < 1e-12


def test_cascade_taps_are_chained():
    rng = np.random.default_rng(1)
    cells = random_occupancy(rng, 10, 0.3)
    x = tensor(cells, rng.standard_normal((len(cells), 2)))
    node = lrp_forward(x, branch_one(2), LrpConfig())
    p1, p2, p3 = node.taps
    assert np.array_equal(p2.features, ops.sparse_maxpool(p1, 3).output.features)
    assert np.array_equal(p3.features, ops.sparse_maxpool(p2, 9).output.features)
    grid_taps = dense_cascade(DenseGrid.from_points(cells, x.features, 10), (1, 3, 9))
    for tap, ref in zip(node.taps, grid_taps):
        assert np.array_equal(tap.features, ref.at(cells))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_output_is_linear_in_selection(seed):
    rng = np.random.default_rng(seed)
    cells = random_occupancy(rng, 6, 0.4)
    x = tensor(cells, rng.standard_normal((len(cells), 2)))
    w, b = rng.standard_normal((2, 6)), rng.standard_normal(6)
    one = lrp_forward(x, SelectionParams(w, b), LrpConfig()).output.features
    two = lrp_forward(x, SelectionParams(2 * w, 2 * b), LrpConfig()).output.features
    assert np.array_equal(two, 2 * one)


def test_selection_weights_examples():
    x = tensor([[0, 0, 0], [1, 0, 0]], [[0.5, 1.0], [2.0, -1.0]])
    s = selection_weights(x, branch_one(2)).output.features
    s1, s2, s3 = split_selection(s, 3)
    assert np.all(s1 == 1) and not s2.any() and not s3.any()
    zero = x.with_features(np.zeros((2, 2)))
    b = np.arange(6.0)
    s = selection_weights(zero, SelectionParams(np.ones((2, 6)), b)).output.features
    assert np.array_equal(s, np.tile(b, (2, 1)))


def test_errors():
    x = tensor([[0, 0, 0]], [[1.0, 2.0]])
    with pytest.raises(ValueError):
        lrp_forward(tensor(np.zeros((0, 3)), np.zeros((0, 2))), branch_one(2), LrpConfig())
    with pytest.raises(ShapeError):
        lrp_forward(x, branch_one(3), LrpConfig())
    with pytest.raises(ShapeError):
        lrp_variant_forward(x, branch_one(2), LrpConfig(op_kind="conv"), [])
    with pytest.raises(ValueError):
        lrp_forward(x, branch_one(2), LrpConfig(op_kind="avg"))


# --- parameters ---------------------------------------------------------------------


def test_param_count_closed_forms():
    assert lrp_param_count(LrpConfig(), 32) == 32 * 96 + 96 == 3168
    assert lrp_param_count(LrpConfig(selection="none"), 32) == 0
    assert lrp_param_count(LrpConfig(selection="per_voxel_scalar"), 32) == 32 * 3 + 3
    conv = LrpConfig(op_kind="conv")
    assert lrp_param_count(conv, 8) - lrp_param_count(LrpConfig(), 8) == 3 * (27 * 8 * 8 + 8)
    assert lrp_param_count(None, 8) == 0


@pytest.mark.parametrize("cfg", [LrpConfig(), LrpConfig(op_kind="conv"), LrpConfig.from_ranges([27]),
                                 LrpConfig(selection="none"), LrpConfig(selection="per_voxel_scalar"),
                                 LrpConfig.from_ranges([9, 27], op_kind="avg")])
def test_param_count_equals_enumerated_shapes(cfg):
    for c in (1, 5, 32):
        assert lrp_param_count(cfg, c) == sum(int(np.prod(s)) for _, s in lrp_param_shapes(cfg, c))


# --- gradients ----------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("selection", ["per_channel", "per_voxel_scalar"])
def test_selection_gradients(seed, selection):
    rng = np.random.default_rng(seed)
    cells = random_occupancy(rng, 6, 0.4)
    x = tensor(cells, tie_free_features(rng, len(cells), 2))
    width = 6 if selection == "per_channel" else 3
    w, b = rng.standard_normal((2, width)), rng.standard_normal(width)
    cfg = LrpConfig(selection=selection)
    g = rng.standard_normal((len(cells), 2))
    dx, dw, db = lrp_forward(x, SelectionParams(w, b, selection), cfg).backward(g)
    f = lambda xx, ww, bb: np.sum(lrp_forward(x.with_features(xx), SelectionParams(ww, bb, selection), cfg)
                                  .output.features * g)
    assert relative_error(dx, numeric_gradient(lambda v: f(v, w, b), x.features)) < 1e-6
    assert relative_error(dw, numeric_gradient(lambda v: f(x.features, v, b), w)) < 1e-6
    assert relative_error(db, numeric_gradient(lambda v: f(x.features, w, v), b)) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_conv_variant_gradients(seed):
    rng = np.random.default_rng(seed)
    cells = random_occupancy(rng, 5, 0.4)
    x = tensor(cells, rng.standard_normal((len(cells), 2)))
    cfg = LrpConfig.from_ranges([3, 9], op_kind="conv")
    sel = SelectionParams(rng.standard_normal((2, 4)), rng.standard_normal(4))
    convs = [ops.ConvParams(rng.standard_normal((27, 2, 2)) * 0.3, rng.standard_normal(2)) for _ in range(2)]
    g = rng.standard_normal((len(cells), 2))
    grads = lrp_variant_forward(x, sel, cfg, convs).backward(g)

    def f(k, v):
        args = [x.features, sel.weight, sel.bias, convs[0].weights, convs[0].bias, convs[1].weights, convs[1].bias]
        args[k] = v
        cp = [ops.ConvParams(args[3], args[4]), ops.ConvParams(args[5], args[6])]
        out = lrp_variant_forward(x.with_features(args[0]), SelectionParams(args[1], args[2]), cfg, cp)
        return np.sum(out.output.features * g)

    values = [x.features, sel.weight, sel.bias, convs[0].weights, convs[0].bias, convs[1].weights, convs[1].bias]
    for k, v in enumerate(values):
        assert relative_error(grads[k], numeric_gradient(lambda vv: f(k, vv), v)) < 1e-5
