"""Finite-difference verification of every layer's analytic gradients.

All checks run in float64 (the `f64` fixture): at step 1e-3 a float32
difference quotient has at most ~4 significant digits, which is useless
against a 1e-3 relative tolerance.
"""

import numpy as np
import pytest

from icasift import ops
from icasift.gradcheck import finite_diff_check
from icasift.tensor import Graph, Tensor, parameter

TOL = 1e-3
STEP = 1e-3


def bce_head(features: Tensor, w: Tensor, b: Tensor, labels: Tensor) -> Tensor:
    logits = ops.dense_forward(features, w, b)
    return ops.bce_loss(ops.activation_forward(logits, "sigmoid"), labels)


class TestFiniteDiffCheckItself:
    def test_quadratic_is_nearly_exact(self, f64):
        w = parameter(np.array([[3.0]]))

        def f():
            sq = ops.dense_forward(w, w, Tensor(np.zeros(1)))
            return ops.reshape(sq, ())

        assert finite_diff_check(f, [w], step=STEP) <= 1e-6

    def test_dense_sigmoid_bce_micro_model(self, f64, rng):
        x = Tensor(rng.standard_normal((4, 3)))
        y = Tensor((rng.random((4, 1)) < 0.5).astype(float))
        w = parameter(rng.standard_normal((1, 3)))
        b = parameter(rng.standard_normal(1))

        def f():
            return bce_head(x, w, b, y)

        assert finite_diff_check(f, [w, b], step=STEP) <= TOL

    def test_error_shrinks_with_step(self, f64, rng):
        x = Tensor(rng.standard_normal((4, 3)))
        y = Tensor((rng.random((4, 1)) < 0.5).astype(float))
        w = parameter(rng.standard_normal((1, 3)))
        b = parameter(rng.standard_normal(1))

        def f():
            return bce_head(x, w, b, y)

        coarse = finite_diff_check(f, [w, b], step=1e-2)
        fine = finite_diff_check(f, [w, b], step=1e-4)
        assert fine <= coarse + 1e-12

    def test_conv3d_two_channels(self, f64, rng):
        x = Tensor(rng.standard_normal((2, 2, 5, 5, 5)))
        y = Tensor(np.array([[1.0], [0.0]]))
        spec = ops.ConvSpec(rank=3, kernel_extents=3, stride=1, in_channels=2,
                            out_channels=2)
        w = parameter(rng.standard_normal((2, 2, 3, 3, 3)) * 0.3)
        b = parameter(np.zeros(2))
        head_w = parameter(rng.standard_normal((1, 2 * 27)) * 0.2)
        head_b = parameter(np.zeros(1))

        def f():
            h = ops.conv_forward(x, w, b, spec)
            h = ops.concat_flatten([h], "flatten")
            return bce_head(h, head_w, head_b, y)

        assert finite_diff_check(f, [w, b, head_w, head_b], step=STEP) <= TOL


class TestLayerGradients:
    def test_conv1d(self, f64, rng):
        x = Tensor(rng.standard_normal((2, 2, 9)))
        y = Tensor(np.array([[1.0], [0.0]]))
        spec = ops.ConvSpec(rank=1, kernel_extents=5, stride=1, in_channels=2,
                            out_channels=3)
        w = parameter(rng.standard_normal((3, 2, 5)) * 0.4)
        b = parameter(rng.standard_normal(3) * 0.1)
        head_w = parameter(rng.standard_normal((1, 15)) * 0.2)
        head_b = parameter(np.zeros(1))

        def f():
            h = ops.conv_forward(x, w, b, spec)
            h = ops.concat_flatten([h], "flatten")
            return bce_head(h, head_w, head_b, y)

        assert finite_diff_check(f, [w, b, head_w, head_b], step=STEP) <= TOL

    def test_conv_input_gradient(self, f64, rng):
        x = parameter(rng.standard_normal((2, 1, 6, 6, 6)))
        y = Tensor(np.array([[1.0], [0.0]]))
        spec = ops.ConvSpec(rank=3, kernel_extents=3, stride=1, in_channels=1,
                            out_channels=2)
        w = Tensor(rng.standard_normal((2, 1, 3, 3, 3)) * 0.3)
        b = Tensor(np.zeros(2))
        head_w = Tensor(rng.standard_normal((1, 2 * 64)) * 0.1)
        head_b = Tensor(np.zeros(1))

        def f():
            h = ops.conv_forward(x, w, b, spec)
            h = ops.concat_flatten([h], "flatten")
            return bce_head(h, head_w, head_b, y)

        assert finite_diff_check(f, [x], step=STEP,
                                 max_coords_per_param=60,
                                 rng=np.random.default_rng(0)) <= TOL

    def test_maxpool_gradient(self, f64, rng):
        x = parameter(rng.standard_normal((1, 1, 6)))
        y = Tensor(np.array([[1.0]]))
        head_w = Tensor(rng.standard_normal((1, 3)))
        head_b = Tensor(np.zeros(1))

        def f():
            h = ops.pool_forward(x, window=2, stride=2)
            h = ops.concat_flatten([h], "flatten")
            return bce_head(h, head_w, head_b, y)

        assert finite_diff_check(f, [x], step=STEP) <= TOL

    def test_dense_weight_gradient_is_input_broadcast(self, f64, rng):
        # d(sum(Wx+b))/dW = x per output row
        x_val = rng.standard_normal((1, 4))
        x = Tensor(x_val)
        w = parameter(rng.standard_normal((3, 4)))
        b = parameter(np.zeros(3))
        with Graph() as g:
            h = ops.dense_forward(x, w, b)
            ones = Tensor(np.ones((1, 3)))
            total = ops.dense_forward(h, ones, Tensor(np.zeros(1)))
            loss = ops.reshape(total, ())
        from icasift.tensor import backward_pass
        backward_pass(loss, g, [w, b])
        assert np.allclose(w.grad, np.tile(x_val, (3, 1)), atol=1e-9)

    def test_batchnorm_train_gradient(self, f64, rng):
        x = Tensor(rng.standard_normal((4, 3, 5)))
        y = Tensor((rng.random((4, 1)) < 0.5).astype(float))
        gamma = parameter(rng.uniform(0.5, 1.5, 3))
        beta = parameter(rng.standard_normal(3) * 0.2)
        state = ops.BatchNormState.for_channels(3)
        head_w = Tensor(rng.standard_normal((1, 15)) * 0.2)
        head_b = Tensor(np.zeros(1))

        def f():
            h = ops.batchnorm_forward(x, gamma, beta, "train", state)
            h = ops.concat_flatten([h], "flatten")
            return bce_head(h, head_w, head_b, y)

        assert finite_diff_check(f, [gamma, beta], step=STEP) <= TOL

    def test_batchnorm_input_gradient(self, f64, rng):
        x = parameter(rng.standard_normal((4, 2, 3)))
        y = Tensor((rng.random((4, 1)) < 0.5).astype(float))
        gamma = Tensor(np.ones(2))
        beta = Tensor(np.zeros(2))
        state = ops.BatchNormState.for_channels(2)
        head_w = Tensor(rng.standard_normal((1, 6)) * 0.3)
        head_b = Tensor(np.zeros(1))

        def f():
            h = ops.batchnorm_forward(x, gamma, beta, "train", state)
            h = ops.concat_flatten([h], "flatten")
            return bce_head(h, head_w, head_b, y)

        assert finite_diff_check(f, [x], step=STEP) <= TOL

    def test_dropout_train_gradient_fixed_mask(self, f64, rng):
        x = parameter(rng.standard_normal((2, 6)))
        y = Tensor(np.array([[1.0], [0.0]]))
        head_w = Tensor(rng.standard_normal((1, 6)) * 0.4)
        head_b = Tensor(np.zeros(1))

        def f():
            # reseeding per call keeps the mask fixed, so f is deterministic
            h = ops.dropout_forward(x, 0.4, "train", np.random.default_rng(99))
            return bce_head(h, head_w, head_b, y)

        assert finite_diff_check(f, [x], step=STEP) <= TOL

    def test_lstm_all_gate_gradients(self, f64, rng):
        batch, time, features, hidden = 2, 4, 3, 5
        x = Tensor(rng.standard_normal((batch, time, features)))
        y = Tensor((rng.random((batch, 1)) < 0.5).astype(float))
        lim = 1.0 / np.sqrt(hidden)
        params = ops.LstmParams(
            W=parameter(rng.uniform(-lim, lim, (4 * hidden, features))),
            U=parameter(rng.uniform(-lim, lim, (4 * hidden, hidden))),
            b=parameter(rng.uniform(-0.1, 0.1, 4 * hidden)))
        head_w = Tensor(rng.standard_normal((1, hidden)) * 0.4)
        head_b = Tensor(np.zeros(1))

        def f():
            h = ops.lstm_forward(x, params, hidden)
            return bce_head(h, head_w, head_b, y)

        err = finite_diff_check(f, list(params.tensors()), step=STEP)
        assert err <= TOL

    def test_lstm_input_gradient(self, f64, rng):
        batch, time, features, hidden = 2, 3, 2, 3
        x = parameter(rng.standard_normal((batch, time, features)))
        y = Tensor(np.array([[1.0], [0.0]]))
        lim = 1.0 / np.sqrt(hidden)
        params = ops.LstmParams(
            W=Tensor(rng.uniform(-lim, lim, (4 * hidden, features))),
            U=Tensor(rng.uniform(-lim, lim, (4 * hidden, hidden))),
            b=Tensor(np.zeros(4 * hidden)))
        head_w = Tensor(rng.standard_normal((1, hidden)))
        head_b = Tensor(np.zeros(1))

        def f():
            h = ops.lstm_forward(x, params, hidden)
            return bce_head(h, head_w, head_b, y)

        assert finite_diff_check(f, [x], step=STEP) <= TOL

    def test_residual_crop_add_gradient(self, f64, rng):
        x = Tensor(rng.standard_normal((2, 1, 6, 6, 6)))
        y = Tensor(np.array([[1.0], [0.0]]))
        spec = ops.ConvSpec(rank=3, kernel_extents=3, stride=1, in_channels=1,
                            out_channels=2)
        proj_spec = ops.ConvSpec(rank=3, kernel_extents=1, stride=1,
                                 in_channels=1, out_channels=2)
        w = parameter(rng.standard_normal((2, 1, 3, 3, 3)) * 0.3)
        b = parameter(np.zeros(2))
        pw = parameter(rng.standard_normal((2, 1, 1, 1, 1)) * 0.5)
        pb = parameter(np.zeros(2))
        head_w = Tensor(rng.standard_normal((1, 2 * 64)) * 0.1)
        head_b = Tensor(np.zeros(1))

        def f():
            main = ops.conv_forward(x, w, b, spec)
            skip = ops.crop_center(x, main.shape[2:])
            skip = ops.conv_forward(skip, pw, pb, proj_spec)
            h = ops.activation_forward(ops.add(main, skip), "relu")
            h = ops.concat_flatten([h], "flatten")
            return bce_head(h, head_w, head_b, y)

        assert finite_diff_check(f, [w, b, pw, pb], step=STEP) <= TOL


class TestWholeModelGradients:
    GRADCHECK_SHAPES = {"spatial": (1, 12, 12, 12), "temporal": (1, 64),
                        "frequency": (1, 32)}

    @pytest.mark.parametrize("model_id", ["sm1", "tm1", "tm2"])
    def test_config_gradients_match(self, f64, rng, model_id):
        from icasift import zoo
        from icasift.tensor import backward_pass, zero_grads

        model = zoo.build_model(zoo.default_config(model_id),
                                self.GRADCHECK_SHAPES, seed=3)
        model.set_mode("train")
        batch = {d: rng.standard_normal((2,) + s)
                 for d, s in model.input_shapes.items()}
        y = Tensor(np.array([[1.0], [0.0]]))
        params = model.parameters()

        def f():
            for layer in model.all_layers():
                if hasattr(layer, "reseed"):
                    layer.reseed(1234)
            return ops.bce_loss(model.forward(batch), y)

        err = finite_diff_check(f, list(params.values()), step=STEP,
                                max_coords_per_param=25,
                                rng=np.random.default_rng(7))
        assert err <= TOL
