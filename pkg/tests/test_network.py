import numpy as np
import pytest

from lrpnet import ops
from lrpnet.autograd import backprop, leaf
from lrpnet.lrp import LrpConfig, lrp_param_count
from lrpnet.network import (DEFAULT_WIDTHS, NetworkConfig, baseline_param_count, forward, init_model,
                            load_checkpoint, lrp_overhead, lrp_width, param_count, param_shapes,
                            resblock_forward, save_checkpoint, stage_layout, unet_forward)
from lrpnet.oracle import numeric_gradient, relative_error
from lrpnet.selfcheck import random_occupancy
from lrpnet.voxel import ShapeError, SparseTensor

TINY = (4, 4, 8, 8)


def scene(rng, extent=8, occ=0.3, c=3, batch=0):
    cells = random_occupancy(rng, extent, occ)
    coords = np.hstack([np.full((len(cells), 1), batch), cells]).astype(np.int64)
    return SparseTensor(coords, rng.random((len(cells), c)))


def zero_selection(model):
    for k in model.params:
        if ".lrp." in k:
            model.params[k][...] = 0.0
    return model


# --- configuration and counting -------------------------------------------------


def test_config_validation():
    for bad in [dict(stage_channels=(4, 8, 16)), dict(stage_channels=(0, 4, 4, 4)),
                dict(stage_channels=(8, 4, 4, 4)), dict(num_classes=0)]:
        with pytest.raises(ValueError):
            NetworkConfig(**bad)


def test_default_counts_are_frozen():
    cfg = NetworkConfig(lrp=LrpConfig())
    assert baseline_param_count(cfg) == 7_154_887
    assert lrp_overhead(cfg) == 327_744
    assert lrp_overhead(cfg) / baseline_param_count(cfg) < 0.06


@pytest.mark.parametrize("widths", [DEFAULT_WIDTHS, TINY, (1, 1, 1, 1), (3, 5, 7, 11)])
@pytest.mark.parametrize("lrp", [None, LrpConfig(), LrpConfig(op_kind="conv"), LrpConfig(placement="before"),
                                 LrpConfig.from_ranges([3]), LrpConfig(selection="per_voxel_scalar")])
def test_closed_form_equals_enumerated_shapes(widths, lrp):
    cfg = NetworkConfig(widths, lrp=lrp)
    assert param_count(cfg.baseline()) == baseline_param_count(cfg)
    expected = sum(lrp_param_count(lrp, lrp_width(cfg, ci, co)) for _, ci, co in stage_layout(cfg))
    assert param_count(cfg) - param_count(cfg.baseline()) == lrp_overhead(cfg) == expected


def test_every_stage_gets_one_block():
    cfg = NetworkConfig(TINY, lrp=LrpConfig())
    stages = {n.split(".")[0] for n, _ in param_shapes(cfg) if ".lrp." in n}
    assert stages == {n for n, _, _ in stage_layout(cfg)}
    assert len(stages) == 7


def test_parameter_names_are_unique():
    names = [n for n, _ in param_shapes(NetworkConfig(lrp=LrpConfig(op_kind="conv")))]
    assert len(names) == len(set(names))


# --- forward ------------------------------------------------------------------------


def test_logit_shape_and_input_checks():
    rng = np.random.default_rng(0)
    model = init_model(NetworkConfig(TINY, lrp=LrpConfig()), rng)
    x = scene(rng)
    out = forward(x, model).value
    assert out.features.shape == (len(x), 7)
    assert np.array_equal(out.coords, x.coords)
    with pytest.raises(ShapeError):
        forward(scene(rng, c=4), model)
    with pytest.raises(ValueError):
        forward(SparseTensor(np.zeros((0, 4)), np.zeros((0, 3))), model)


def test_zeroed_selection_is_bit_identical_to_baseline():
    rng = np.random.default_rng(1)
    model = zero_selection(init_model(NetworkConfig(TINY, lrp=LrpConfig()), rng))
    for _ in range(3):
        x = scene(rng)
        assert np.array_equal(forward(x, model).value.features, unet_forward(x, model).value.features)


def test_batch_elements_do_not_interact():
    rng = np.random.default_rng(2)
    model = init_model(NetworkConfig(TINY, lrp=LrpConfig()), rng)
    a, b = scene(rng, batch=0), scene(rng, batch=1)
    both = SparseTensor(np.vstack([a.coords, b.coords]), np.vstack([a.features, b.features]))
    joint = forward(both, model).value.features
    assert np.allclose(joint[: len(a)], forward(a, model).value.features, rtol=0, atol=1e-12)
    b0 = SparseTensor(np.hstack([np.zeros((len(b), 1), np.int64), b.coords[:, 1:]]), b.features)
    assert np.allclose(joint[len(a):], forward(b0, model).value.features, rtol=0, atol=1e-12)


def test_resblock_identity_when_residual_path_is_zero():
    rng = np.random.default_rng(3)
    model = init_model(NetworkConfig(TINY), rng)
    x = scene(rng, c=4)
    for k in ("enc1.bn2.gamma", "enc1.bn2.beta"):
        model.params[k][...] = 0.0
    out = resblock_forward(x, model, "enc1").output
    assert np.array_equal(out.features, x.features)


def test_resblock_gradients():
    rng = np.random.default_rng(4)
    model = init_model(NetworkConfig(TINY), rng)
    x = scene(rng, extent=5, occ=0.5, c=4)
    node = resblock_forward(x, model, "enc1", training=True)
    g = rng.standard_normal(node.output.features.shape)
    grads = node.backward(g)

    def f(xf):
        return np.sum(resblock_forward(x.with_features(xf), model, "enc1", training=True).output.features * g)

    assert relative_error(grads[0], numeric_gradient(f, x.features)) < 1e-5
    for name, got in zip(node.param_names, grads[1:]):
        def fp(v, name=name):
            saved = model.params[name]
            model.params[name] = v
            try:
                return f(x.features)
            finally:
                model.params[name] = saved
        assert relative_error(got, numeric_gradient(fp, model.params[name])) < 1e-5, name


def test_full_network_loss_gradient_on_sampled_parameters():
    rng = np.random.default_rng(5)
    model = init_model(NetworkConfig(TINY, lrp=LrpConfig(), selection_init=0.1), rng)
    for k in model.params:
        if k.endswith("sel.weight"):
            model.params[k] = rng.normal(0, 0.3, model.params[k].shape)
    x = scene(rng, extent=6, occ=0.5)
    labels = rng.integers(0, 7, len(x))

    def loss():
        logits = forward(leaf(x), model, training=True)
        return ops.softmax_cross_entropy(logits.value, labels).output

    logits = forward(leaf(x), model, training=True)
    (dl,) = ops.softmax_cross_entropy(logits.value, labels).backward(1.0)
    grads = backprop(logits, dl)
    entries = [(k, i) for k, v in model.params.items() for i in range(v.size)]
    picks = rng.choice(len(entries), size=len(entries) // 100, replace=False)
    eps = 1e-5
    got, want = [], []
    for j in picks:
        k, i = entries[j]
        flat = model.params[k].reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        up = loss()
        flat[i] = old - eps
        down = loss()
        flat[i] = old
        want.append((up - down) / (2 * eps))
        got.append(grads[k].reshape(-1)[i])
    # max pools are piecewise linear; a handful of near-tie kinks are tolerated by a
    # per-vector metric rather than an elementwise one
    assert relative_error(np.array(got), np.array(want)) < 1e-4


# --- checkpoints ----------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    cfg = NetworkConfig(TINY, lrp=LrpConfig.from_ranges([9, 27], op_kind="avg", placement="parallel"))
    model = init_model(cfg, rng)
    model.buffers["enc0.bn1.running_mean"] += 0.25
    save_checkpoint(tmp_path / "m.lrpn", model, {"seed": 7})
    back, meta = load_checkpoint(tmp_path / "m.lrpn")
    assert back.cfg == cfg and meta == {"seed": "7"}
    assert list(back.params) == list(model.params)
    for k in model.params:
        assert np.array_equal(back.params[k], model.params[k])
    for k in model.buffers:
        assert np.array_equal(back.buffers[k], model.buffers[k])
    x = scene(rng)
    assert np.array_equal(forward(x, back).value.features, forward(x, model).value.features)
    save_checkpoint(tmp_path / "again.lrpn", back, {"seed": 7})
    assert (tmp_path / "m.lrpn").read_bytes() == (tmp_path / "again.lrpn").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
