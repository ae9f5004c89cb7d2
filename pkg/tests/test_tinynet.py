import numpy as np
import pytest

from archrobust import cellspace as cs
from archrobust.cellspace import Cell, OpKind
from archrobust.tinynet import (
    Network,
    NetworkConfig,
    TrainingDiverged,
    accuracy,
    augment_batch,
    build_network,
    layers,
    predict_confidences,
    synth_dataset,
    train,
)

from .conftest import MICRO, SMALL
from .helpers import EQUIV_CONFIG, class_function_spread, fd_gradient_check, rel_error, sample_classes


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(stem_width=3)
    with pytest.raises(ValueError):
        NetworkConfig(image_size=6, stages=2)
    with pytest.raises(ValueError):
        NetworkConfig(num_classes=0)


def test_forward_shapes_and_errors(rng):
    net = build_network(Cell.uniform(OpKind.NOR_CONV_3X3), MICRO, seed=1)
    z = net.forward(np.zeros((2,) + MICRO.input_shape))
    assert z.shape == (2, 3) and np.all(np.isfinite(z))
    with pytest.raises(ValueError, match="expected batch"):
        net.forward(np.zeros((2, 3, 5, 5)))


def test_confidences_sum_to_one(rng):
    net = build_network(cs.cell_from_id(777), MICRO, seed=2)
    p = predict_confidences(net, rng.random((5,) + MICRO.input_shape))
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)


def test_none_cell_still_defined(rng):
    net = build_network(Cell.uniform(OpKind.NONE), MICRO, seed=0)
    x = rng.random((4,) + MICRO.input_shape)
    z = net.forward(x)
    assert np.all(np.isfinite(z))
    # an empty cell zeroes its stage, so the logits no longer see the input
    assert np.array_equal(net.forward(x + 0.1), z)


def test_param_count_grows_with_conv():
    base = cs.decode_arch_string("|skip_connect~0|+|skip_connect~0|skip_connect~1|+|skip_connect~0|skip_connect~1|skip_connect~2|")
    for e in range(6):
        bigger = base.replace(e, OpKind.NOR_CONV_3X3)
        assert build_network(bigger, MICRO).num_params > build_network(base, MICRO).num_params


def test_batching_invariance(rng):
    net = build_network(cs.cell_from_id(9876), SMALL, seed=3)
    x = rng.random((10,) + SMALL.input_shape)
    whole = net.forward(x)
    parts = np.concatenate([net.forward(x[:3]), net.forward(x[3:7]), net.forward(x[7:])])
    assert np.abs(whole - parts).max() <= 1e-12


def test_deterministic_init():
    c = cs.cell_from_id(4242)
    a, b = build_network(c, MICRO, seed=5), build_network(c, MICRO, seed=5)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, build_network(c, MICRO, seed=6).theta)


def test_gradient_matches_finite_differences(rng):
    for trial in range(5):
        cell = cs.cell_from_id(int(rng.integers(15625)))
        net = build_network(cell, MICRO, seed=trial)
        x = rng.random((2,) + MICRO.input_shape)
        y = rng.integers(0, MICRO.num_classes, size=2)
        ex, et, _ = fd_gradient_check(net, x, y, rng, per_block=3)
        assert ex <= 1e-4 and et <= 1e-4, (cell, ex, et)


def test_gradient_with_batch_norm(rng):
    cfg = NetworkConfig(image_size=4, stem_width=4, num_classes=3, batch_norm=True)
    # no none edges: empty nodes would put batch-norm shifts right on a ReLU kink
    cell = cs.decode_arch_string("|nor_conv_3x3~0|+|avg_pool_3x3~0|nor_conv_1x1~1|+|skip_connect~0|nor_conv_3x3~1|avg_pool_3x3~2|")
    net = build_network(cell, cfg, seed=1)
    x = rng.random((2,) + cfg.input_shape)
    y = np.array([0, 2])
    ex, et, _ = fd_gradient_check(net, x, y, rng, per_block=2)
    assert ex <= 1e-4 and et <= 1e-4


def test_loss_nonnegative_and_grad_shape(rng):
    net = build_network(cs.cell_from_id(100), MICRO, seed=0)
    x = rng.random((3,) + MICRO.input_shape)
    loss, gx, gt = net.loss_and_grads(x, np.array([0, 1, 2]))
    assert loss >= 0 and gx.shape == x.shape and gt.shape == net.theta.shape


def test_input_grad_helpers_agree(rng):
    net = build_network(cs.cell_from_id(5555), MICRO, seed=0)
    x = rng.random((3,) + MICRO.input_shape)
    y = np.array([2, 0, 1])
    losses, g_sum = net.loss_input_grad(x, y)
    loss, g_mean, _ = net.loss_and_grads(x, y)
    assert np.isclose(losses.mean(), loss)
    assert np.allclose(g_sum / 3, g_mean, rtol=1e-12, atol=1e-15)
    # logits VJP with the CE residual reproduces the loss gradient
    z = net.forward(x)
    _, gz = layers.cross_entropy(z, y)
    assert np.allclose(net.logits_vjp(x, gz), g_sum, rtol=1e-12, atol=1e-15)


def test_conv_layer_against_direct_sum(rng):
    x = rng.normal(size=(3, 2, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    for stride in (1, 2):
        out, _ = layers.conv2d_forward(x, w, stride, 1)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ho = (5 + 2 - 3) // stride + 1
        ref = np.zeros((4, 2, ho, ho))
        for i in range(ho):
            for j in range(ho):
                patch = xp[:, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                ref[:, :, i, j] = np.einsum("ocab,cnab->on", w, patch)
        assert np.allclose(out, ref, atol=1e-12)


def test_isomorphic_classes_compute_same_function(rng):
    x = rng.random((20,) + EQUIV_CONFIG.input_shape)
    for rep in sample_classes(10, rng, max_size=40):
        assert class_function_spread(rep, EQUIV_CONFIG, x) <= 1e-10


def test_constructed_pair_same_function(rng):
    a = cs.decode_arch_string("|skip_connect~0|+|none~0|nor_conv_3x3~1|+|none~0|none~1|nor_conv_3x3~2|")
    b = cs.decode_arch_string("|skip_connect~0|+|nor_conv_3x3~0|none~1|+|none~0|none~1|nor_conv_3x3~2|")
    x = rng.random((100,) + SMALL.input_shape)
    za = build_network(a, SMALL, seed=11).forward(x)
    zb = build_network(b, SMALL, seed=11).forward(x)
    assert np.abs(za - zb).max() <= 1e-10
    # a non-isomorphic neighbour differs
    c = a.replace(5, OpKind.NOR_CONV_1X1)
    assert np.abs(build_network(c, SMALL, seed=11).forward(x) - za).max() > 1e-6


def test_state_dict_round_trip(tmp_path, rng):
    net = build_network(cs.cell_from_id(3000), MICRO, seed=4)
    path = tmp_path / "net.json"
    net.save(path)
    back = Network.load(path)
    assert back.cell == net.cell and back.config == net.config
    assert np.array_equal(back.theta, net.theta)
    x = rng.random((2,) + MICRO.input_shape)
    assert np.array_equal(back.forward(x), net.forward(x))
    with pytest.raises(ValueError, match="unsupported"):
        Network.from_state_dict({"format": "other"})


def test_synth_dataset_properties():
    tr, te = synth_dataset(SMALL, 101, 37, seed=9)
    for d in (tr, te):
        counts = np.bincount(d.labels, minlength=SMALL.num_classes)
        assert counts.max() - counts.min() <= 1
        assert d.images.min() >= 0 and d.images.max() <= 1
    tr2, _ = synth_dataset(SMALL, 101, 37, seed=9)
    assert np.array_equal(tr.images, tr2.images)


def test_linear_classifier_beats_chance():
    tr, te = synth_dataset(SMALL, 512, 1000, seed=1)
    X = np.c_[tr.images.reshape(len(tr), -1), np.ones(len(tr))]
    Y = np.eye(SMALL.num_classes)[tr.labels]
    W = np.linalg.solve(X.T @ X + 10 * np.eye(X.shape[1]), X.T @ Y)
    Xt = np.c_[te.images.reshape(len(te), -1), np.ones(len(te))]
    acc = np.mean((Xt @ W).argmax(axis=1) == te.labels)
    assert acc > 1 / SMALL.num_classes + 0.1


def test_augment_keeps_shape_and_range(rng):
    x = rng.random((6,) + SMALL.input_shape)
    out = augment_batch(x, rng)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1
    out0 = augment_batch(x, np.random.default_rng(0), pad=0)
    flipped = np.all(out0 == x[..., ::-1], axis=(1, 2, 3))
    same = np.all(out0 == x, axis=(1, 2, 3))
    assert np.all(flipped | same)


def test_training_reduces_loss_and_is_deterministic(small_data):
    tr, te = small_data
    net = build_network(Cell.uniform(OpKind.NOR_CONV_3X3), SMALL, seed=0)
    a = train(net, tr.subset(np.arange(128)), epochs=3, lr=0.05, seed=1)
    b = train(net, tr.subset(np.arange(128)), epochs=3, lr=0.05, seed=1)
    assert np.array_equal(a.theta, b.theta)
    hist = a.info["train_loss"]
    assert hist[-1] < hist[0]
    assert 0 <= a.info["train_accuracy"] <= 1


def test_all_skip_trains_above_chance(small_data):
    tr, te = small_data
    net = build_network(Cell.uniform(OpKind.SKIP_CONNECT), SMALL, seed=0)
    out = train(net, tr, epochs=4, lr=0.05, seed=0)
    assert accuracy(out, te) > 1 / SMALL.num_classes + 0.2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(small_data):
    tr, _ = small_data
    net = build_network(Cell.uniform(OpKind.SKIP_CONNECT), SMALL, seed=0)
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        train(net, tr.subset(np.arange(64)), epochs=1, lr=1e200, seed=0, clip_norm=None)


def test_rel_error_helper():
    assert rel_error(1.0, 1.0) == 0
    assert np.isclose(rel_error(1.0, 1.1), 0.1 / 1.1)
