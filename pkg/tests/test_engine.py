"""Engine tests: forward oracles, finite-difference gradients, optimizer
algebra, and training-loop determinism.

Convolution is checked against scipy.signal.correlate2d; every layer's
backward pass is checked against central differences in float64.
"""

import copy

import numpy as np
import pytest
from scipy.signal import correlate2d

from gaborpress.data import Dataset, synth_textures
from gaborpress.engine.layers import (
    BatchNorm2d,
    Conv2d,
    Dense,
    GlobalAvgPool,
    MaxPool2d,
    Parameter,
    ReLU,
    ResidualBlock,
    col2im,
    im2col,
)
from gaborpress.engine.model import Model, cross_entropy_loss_and_grad, softmax
from gaborpress.engine.optim import SGD, OptimizerConfig
from gaborpress.engine.train import evaluate, train
from gaborpress.errors import ConfigError, DimensionError, StructureError, TrainingDivergedError
from gaborpress.models import build_model, init_model, toy_model

F64 = np.float64


def conv_oracle(x, w, b, stride, pad):
    """Direct cross-correlation, one scipy call per (image, out, in) triple."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, c_out, oh, ow), dtype=np.float64)
    for ni in range(n):
        for co in range(c_out):
            acc = sum(
                correlate2d(xp[ni, ci], w[co, ci], mode="valid") for ci in range(c_in)
            )
            out[ni, co] = acc[::stride, ::stride]
            if b is not None:
                out[ni, co] += b[co]
    return out


def loss_through(layer, x, up, training=True):
    return float(np.sum(layer.forward(x, training) * up))


def fd_check(layer, x, up, rtol, h=1e-6, param_rtols=None):
    """Central-difference check of dx and every parameter gradient."""
    for _, p in layer.params():
        p.zero_grad()
    layer.forward(x, training=True)
    dx = layer.backward(up)

    def compare(analytic, numeric, tol, what):
        floor = 1e-6 * (1.0 + float(np.max(np.abs(numeric))))
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = float(np.max(np.abs(analytic - numeric) / scale))
        assert worst <= tol, f"{what}: max relative gradient error {worst}"

    fd_x = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        up_l = loss_through(layer, x, up)
        x.flat[i] = old - h
        down = loss_through(layer, x, up)
        x.flat[i] = old
        fd_x.flat[i] = (up_l - down) / (2 * h)
    compare(dx, fd_x, rtol, "input")

    for name, p in layer.params():
        fd_p = np.zeros_like(p.data)
        for i in range(p.data.size):
            old = p.data.flat[i]
            p.data.flat[i] = old + h
            up_l = loss_through(layer, x, up)
            p.data.flat[i] = old - h
            down = loss_through(layer, x, up)
            p.data.flat[i] = old
            fd_p.flat[i] = (up_l - down) / (2 * h)
        tol = (param_rtols or {}).get(name, rtol)
        compare(p.grad, fd_p, tol, name)


class TestConvForward:
    @pytest.mark.parametrize("stride,pad,bias", [(1, 1, True), (2, 0, True), (1, 2, False)])
    def test_matches_scipy(self, rng, stride, pad, bias):
        conv = Conv2d(3, 4, 3, stride=stride, pad=pad, bias=bias, dtype=F64)
        conv.init_he(rng)
        if bias:
            conv.bias.data = rng.standard_normal(4)
        x = rng.standard_normal((2, 3, 8, 8))
        got = conv.forward(x)
        b = conv.bias.data if bias else None
        want = conv_oracle(x, conv.weight.data, b, stride, pad)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_masks_zero_contributions(self, rng):
        conv = Conv2d(3, 4, 3, pad=1, dtype=F64)
        conv.init_he(rng)
        conv.bias.data = rng.standard_normal(4)
        conv.kernel_mask[1, 2] = False
        conv.channel_mask[3] = False
        x = rng.standard_normal((2, 3, 6, 6))
        out = conv.forward(x)
        w = conv.weight.data.copy()
        w[1, 2] = 0.0
        w[3] = 0.0
        b = conv.bias.data.copy()
        b[3] = 0.0
        np.testing.assert_allclose(out, conv_oracle(x, w, b, 1, 1), rtol=1e-12, atol=1e-12)
        assert np.all(out[:, 3] == 0.0)

    def test_masked_entries_get_zero_gradients(self, rng):
        conv = Conv2d(3, 4, 3, pad=1, dtype=F64)
        conv.init_he(rng)
        conv.kernel_mask[1, 2] = False
        conv.channel_mask[3] = False
        x = rng.standard_normal((2, 3, 6, 6))
        conv.forward(x)
        conv.backward(rng.standard_normal((2, 4, 6, 6)))
        assert np.all(conv.weight.grad[1, 2] == 0.0)
        assert np.all(conv.weight.grad[3] == 0.0)
        assert conv.bias.grad[3] == 0.0

    def test_im2col_col2im_are_adjoint(self, rng):
        # <im2col(x), Y> == <x, col2im(Y)> characterizes the exact adjoint.
        x = rng.standard_normal((2, 3, 7, 7))
        col = im2col(x, 3, 2, 1)
        y = rng.standard_normal(col.shape)
        lhs = float(np.sum(col * y))
        rhs = float(np.sum(x * col2im(y, x.shape, 3, 2, 1)))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_rejects_wrong_channel_count(self, rng):
        conv = Conv2d(3, 4, 3)
        with pytest.raises(DimensionError):
            conv.forward(rng.standard_normal((1, 2, 8, 8)))


class TestLayerGradients:
    def test_conv_standard(self, rng):
        conv = Conv2d(3, 4, 3, stride=2, pad=1, dtype=F64)
        conv.init_he(rng)
        conv.bias.data = rng.standard_normal(4)
        fd_check(conv, rng.standard_normal((2, 3, 7, 7)), rng.standard_normal((2, 4, 4, 4)), 1e-4)

    def test_conv_gabor_parameter_level(self, rng):
        conv = Conv2d(2, 3, 5, pad=2, dtype=F64)
        grid = np.empty((3, 2, 8))
        for o in range(3):
            for i in range(2):
                grid[o, i] = [
                    rng.uniform(1, 4), rng.uniform(0, np.pi), rng.uniform(0, np.pi),
                    rng.uniform(0.8, 3), rng.uniform(0.3, 1), rng.uniform(-1, 1),
                    rng.uniform(2, 4), rng.uniform(2, 4),
                ]
        conv.to_gabor(grid)
        conv.bias.data = rng.standard_normal(3)
        fd_check(
            conv,
            rng.standard_normal((2, 2, 6, 6)),
            rng.standard_normal((2, 3, 6, 6)),
            1e-4,
            h=1e-5,
            param_rtols={"gabor_params": 1e-3},
        )

    def test_batchnorm_training_mode(self, rng):
        bn = BatchNorm2d(3, dtype=F64)
        bn.gamma.data = rng.uniform(0.5, 2.0, size=3)
        bn.beta.data = rng.standard_normal(3)
        fd_check(bn, rng.standard_normal((4, 3, 5, 5)), rng.standard_normal((4, 3, 5, 5)), 1e-4)

    def test_batchnorm_eval_mode_is_affine(self, rng):
        bn = BatchNorm2d(3, dtype=F64)
        bn.running_mean = rng.standard_normal(3)
        bn.running_var = rng.uniform(0.5, 2.0, size=3)
        x = rng.standard_normal((2, 3, 4, 4))
        up = rng.standard_normal((2, 3, 4, 4))
        bn.forward(x, training=False)
        dx = bn.backward(up)
        want = up * (bn.gamma.data / np.sqrt(bn.running_var + bn.eps))[:, None, None]
        np.testing.assert_allclose(dx, want, rtol=1e-12)

    def test_relu(self, rng):
        fd_check(ReLU(), rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((2, 3, 5, 5)), 1e-4)

    def test_maxpool(self, rng):
        fd_check(
            MaxPool2d(2), rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((2, 3, 3, 3)), 1e-4
        )

    def test_global_avg_pool(self, rng):
        fd_check(
            GlobalAvgPool(), rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 1, 1)), 1e-4
        )

    def test_dense(self, rng):
        d = Dense(12, 5, dtype=F64)
        d.init_he(rng)
        d.bias.data = rng.standard_normal(5)
        fd_check(d, rng.standard_normal((3, 3, 2, 2)), rng.standard_normal((3, 5)), 1e-4)

    def test_residual_block_identity(self, rng):
        blk = ResidualBlock(4, 4, stride=1, dtype=F64)
        blk.init_he(rng)
        fd_check(blk, rng.standard_normal((2, 4, 6, 6)), rng.standard_normal((2, 4, 6, 6)), 1e-4)

    def test_residual_block_projecting(self, rng):
        blk = ResidualBlock(3, 6, stride=2, dtype=F64)
        blk.init_he(rng)
        fd_check(blk, rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((2, 6, 3, 3)), 1e-4)

    def test_full_model_cross_entropy(self, rng):
        layers = [
            Conv2d(2, 3, 3, pad=1, dtype=F64),
            ReLU(),
            MaxPool2d(2),
            Dense(3 * 4 * 4, 3, dtype=F64),
        ]
        model = Model(layers, (2, 8, 8), 3, dtype=F64)
        init_model(model, rng)
        x = rng.standard_normal((4, 2, 8, 8))
        y = rng.integers(0, 3, size=4)

        def loss_of():
            logits = model.forward(x, training=True)
            return cross_entropy_loss_and_grad(logits, y)[0]

        model.zero_grads()
        loss, dlogits = cross_entropy_loss_and_grad(model.forward(x, training=True), y)
        model.backward(dlogits)
        h = 1e-6
        for name, p in model.named_params():
            fd = np.zeros_like(p.data)
            for i in range(p.data.size):
                old = p.data.flat[i]
                p.data.flat[i] = old + h
                up_l = loss_of()
                p.data.flat[i] = old - h
                down = loss_of()
                p.data.flat[i] = old
                fd.flat[i] = (up_l - down) / (2 * h)
            floor = 1e-6 * (1.0 + float(np.max(np.abs(fd))))
            scale = np.maximum(np.maximum(np.abs(p.grad), np.abs(fd)), floor)
            worst = float(np.max(np.abs(p.grad - fd) / scale))
            assert worst <= 1e-4, f"{name}: max relative gradient error {worst}"


class TestLossHead:
    def test_softmax_rows_are_distributions(self, rng):
        p = softmax(rng.standard_normal((6, 5)) * 10)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)

    def test_loss_matches_log_sum_exp_form(self, rng):
        logits = rng.standard_normal((8, 5)).astype(F64)
        labels = rng.integers(0, 5, size=8)
        loss, _ = cross_entropy_loss_and_grad(logits, labels)
        lse = np.log(np.sum(np.exp(logits - logits.max(axis=1, keepdims=True)), axis=1))
        want = float(np.mean(lse - (logits[np.arange(8), labels] - logits.max(axis=1))))
        assert loss == pytest.approx(want, rel=1e-10)

    def test_gradient_matches_finite_differences(self, rng):
        logits = rng.standard_normal((4, 3)).astype(F64)
        labels = rng.integers(0, 3, size=4)
        _, grad = cross_entropy_loss_and_grad(logits.copy(), labels)
        h = 1e-7
        for i in range(logits.size):
            pert = logits.copy()
            pert.flat[i] += h
            up_l, _ = cross_entropy_loss_and_grad(pert, labels)
            pert.flat[i] -= 2 * h
            down, _ = cross_entropy_loss_and_grad(pert, labels)
            assert grad.flat[i] == pytest.approx((up_l - down) / (2 * h), rel=1e-5, abs=1e-10)

    def test_rejects_label_batch_mismatch(self, rng):
        with pytest.raises(DimensionError):
            cross_entropy_loss_and_grad(rng.standard_normal((4, 3)), np.zeros(5, dtype=np.int64))


class _ParamBag:
    """Minimal stand-in exposing named_params, enough to drive SGD."""

    def __init__(self, pairs):
        self._pairs = pairs

    def named_params(self):
        return self._pairs


class TestOptimizer:
    def test_closed_form_decay_without_momentum(self):
        p = Parameter(np.array([2.0, -3.0]))
        opt = SGD(_ParamBag([("w", p)]), OptimizerConfig(lr=0.1, momentum=0.0, weight_decay=0.01))
        for _ in range(1000):
            opt.step(0.1)
        want = np.array([2.0, -3.0]) * (1.0 - 0.1 * 0.01) ** 1000
        np.testing.assert_allclose(p.data, want, rtol=1e-10)

    def test_gabor_decay_touches_only_amplitudes(self, rng):
        data = rng.standard_normal((2, 3, 8))
        p = Parameter(data.copy(), kind="gabor")
        cfg = OptimizerConfig(lr=0.1, momentum=0.0, weight_decay=0.7, amplitude_decay=0.01)
        opt = SGD(_ParamBag([("g", p)]), cfg)
        for _ in range(100):
            opt.step(0.1)
        others = [i for i in range(8) if i != 5]
        assert np.array_equal(p.data[..., others], data[..., others])
        np.testing.assert_allclose(
            p.data[..., 5], data[..., 5] * (1.0 - 0.1 * 0.01) ** 100, rtol=1e-10
        )

    def test_amplitude_decay_defaults_to_weight_decay(self):
        assert OptimizerConfig(weight_decay=3e-4).effective_amplitude_decay == 3e-4
        assert OptimizerConfig(weight_decay=3e-4, amplitude_decay=2.0).effective_amplitude_decay == 2.0

    def test_momentum_velocity_reaches_steady_state(self):
        # With constant gradient g, velocity converges to g / (1 - momentum).
        p = Parameter(np.array([1.0]))
        opt = SGD(_ParamBag([("w", p)]), OptimizerConfig(lr=0.1, momentum=0.9, weight_decay=0.0))
        g = np.array([0.5])
        for _ in range(400):
            p.grad[...] = g
            opt.step(0.0)
        np.testing.assert_allclose(opt.velocity["w"], g / (1 - 0.9), rtol=1e-8)

    def test_lr_schedule_drops(self):
        cfg = OptimizerConfig(lr=0.4, epochs=100)
        assert cfg.lr_at(0) == 0.4
        assert cfg.lr_at(49) == 0.4
        assert cfg.lr_at(50) == pytest.approx(0.04)
        assert cfg.lr_at(74) == pytest.approx(0.04)
        assert cfg.lr_at(75) == pytest.approx(0.004)
        flat = OptimizerConfig(lr=0.4, epochs=100, lr_drops=())
        assert flat.lr_at(99) == 0.4

    def test_state_round_trip(self, rng):
        p = Parameter(rng.standard_normal(4))
        opt = SGD(_ParamBag([("w", p)]), OptimizerConfig(momentum=0.9))
        p.grad[...] = rng.standard_normal(4)
        opt.step(0.1)
        saved = [(n, v.copy()) for n, v in opt.state_items()]
        opt.velocity["w"][:] = 0.0
        opt.load_state(saved)
        np.testing.assert_array_equal(opt.velocity["w"], saved[0][1])
        with pytest.raises(ConfigError):
            opt.load_state([("w", np.zeros(7))])

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(lr=0.0)
        with pytest.raises(ConfigError):
            OptimizerConfig(batch_size=0)
        with pytest.raises(ConfigError):
            OptimizerConfig(epochs=-1)


def _tiny_dataset(seed, n_per_class=10, image_size=16, noise=0.3, split="train"):
    return synth_textures(seed, n_per_class, num_classes=4, image_size=image_size,
                          noise=noise, split=split)


class TestTraining:
    def test_two_runs_are_bit_identical(self, rng):
        model_a = init_model(toy_model(4, width=4, image_size=16), np.random.default_rng(7))
        model_b = copy.deepcopy(model_a)
        data = _tiny_dataset(3)
        cfg = OptimizerConfig(lr=0.01, epochs=2, batch_size=16, seed=0)
        train(model_a, data, cfg, rng=np.random.default_rng(11))
        train(model_b, data, cfg, rng=np.random.default_rng(11))
        for (na, pa), (nb, pb) in zip(model_a.named_params(), model_b.named_params()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data), na

    def test_learns_oriented_textures(self):
        model = init_model(toy_model(4, width=8, image_size=16), np.random.default_rng(0))
        train_set = _tiny_dataset(5, n_per_class=50)
        test_set = _tiny_dataset(6, n_per_class=25, split="test")
        cfg = OptimizerConfig(lr=0.01, epochs=6, batch_size=32, weight_decay=5e-4)
        history = train(model, train_set, cfg, eval_set=test_set, rng=np.random.default_rng(1))
        assert history[-1]["eval_acc"] >= 0.9
        assert len(history) == 6
        assert {"epoch", "lr", "train_loss", "eval_acc"} <= set(history[0])

    def test_zero_model_predicts_first_class(self):
        # All-zero logits argmax to class 0; accuracy equals its frequency.
        model = Model([Dense(12, 3, dtype=np.float32)], (3, 2, 2), 3)
        images = np.zeros((8, 3, 2, 2), dtype=np.float32)
        labels = np.array([0, 0, 1, 1, 2, 2, 0, 1], dtype=np.int64)
        data = Dataset(images, labels, "test", 3)
        assert evaluate(model, data) == pytest.approx(3 / 8)

    def test_divergence_raises(self, rng):
        model = Model([Dense(12, 3, dtype=np.float32)], (3, 2, 2), 3)
        model.layers[0].weight.data[...] = 1e30
        images = rng.standard_normal((8, 3, 2, 2)).astype(np.float32) * 1e10
        labels = rng.integers(0, 3, size=8)
        data = Dataset(images, labels, "train", 3)
        with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError):
            train(model, data, OptimizerConfig(lr=0.1, epochs=1, batch_size=8))

    def test_empty_dataset_rejected(self):
        model = Model([Dense(12, 3)], (3, 2, 2), 3)
        empty = Dataset(np.zeros((0, 3, 2, 2), dtype=np.float32), np.zeros(0, dtype=np.int64), "t", 3)
        with pytest.raises(DimensionError):
            evaluate(model, empty)
        with pytest.raises(DimensionError):
            train(model, empty, OptimizerConfig())


class TestModelStructure:
    def test_families_build_and_check_shapes(self):
        toy = build_model("toy", 4)
        assert toy.check_shapes() == (4,)
        vgg = build_model("vgg-style", 10)
        assert vgg.check_shapes() == (10,)
        res = build_model("resnet-style", 10, blocks_per_stage=2)
        assert res.check_shapes() == (10,)
        with pytest.raises(StructureError):
            build_model("mlp", 4)

    def test_conv_accessor_counts_plain_convs_only(self):
        res = build_model("resnet-style", 10, blocks_per_stage=2)
        assert len(res.conv_indices()) == 1  # residual-block internals excluded
        with pytest.raises(DimensionError):
            res.conv(1)

    def test_shape_mismatch_detected(self):
        with pytest.raises(DimensionError):
            Model([Dense(10, 3)], (3, 2, 2), 3)  # 12 inputs flat, dense expects 10
