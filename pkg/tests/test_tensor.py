import itertools

import numpy as np
import pytest

from src.tensor import (ConvSpec, GradientTape, LayerParams, SgdConfig, Tensor, backward, channel_norm,
                        conv2d_forward, conv3d_forward, finite_diff_check, leaky_relu, logistic, maxpool2d,
                        permute, reshape, select, sgd_step)
from src.tensor.gradcheck import relative_error
from src.utils.errors import ConfigError, ShapeError


# =============================================================================
# Oracles
# =============================================================================

def naive_conv(x, w, b, stride, padding):
    """Direct nested-loop convolution over any number of spatial axes."""
    nd = w.ndim - 2
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    out_extents = [(xp.shape[2 + i] - w.shape[2 + i]) // stride[i] + 1 for i in range(nd)]
    y = np.zeros((x.shape[0], w.shape[0]) + tuple(out_extents))
    for n in range(x.shape[0]):
        for j in range(w.shape[0]):
            for pos in itertools.product(*[range(o) for o in out_extents]):
                acc = b[j] if b is not None else 0.0
                for m in range(x.shape[1]):
                    for off in itertools.product(*[range(k) for k in w.shape[2:]]):
                        idx = tuple(p * s + o for p, s, o in zip(pos, stride, off))
                        acc += w[(j, m) + off] * xp[(n, m) + idx]
                y[(n, j) + pos] = acc
    return y


def naive_maxpool(x):
    n, c, h, w = x.shape
    y = np.zeros((n, c, h // 2, w // 2))
    for i, j, r, s in itertools.product(range(n), range(c), range(h // 2), range(w // 2)):
        y[i, j, r, s] = x[i, j, 2 * r:2 * r + 2, 2 * s:2 * s + 2].max()
    return y


def random_conv_case(rng, nd):
    kernel = tuple(int(k) for k in rng.integers(1, 4, size=nd))
    stride = tuple(int(s) for s in rng.integers(1, 3, size=nd))
    padding, extents = [], []
    for k, s in zip(kernel, stride):
        out = int(rng.integers(1, 4))
        p = int(rng.integers(0, k))
        size = (out - 1) * s + k - 2 * p
        if size < 1:
            p, size = 0, (out - 1) * s + k
        padding.append(p)
        extents.append(size)
    spec = ConvSpec(kernel, int(rng.integers(1, 4)), int(rng.integers(1, 4)), stride, tuple(padding))
    x = rng.normal(size=(int(rng.integers(1, 3)), spec.in_channels) + tuple(extents))
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=spec.out_channels)
    return spec, x, w, b


def op_gradient_error(forward, inputs, seed=0):
    """Finite-difference error of d sum(out * r) / d inputs for a fixed random r."""
    sample_out = forward({k: Tensor(v) for k, v in inputs.items()}, None)
    r = np.random.default_rng(seed).normal(size=sample_out.shape)

    def f(arrays):
        tensors = {k: Tensor(v) for k, v in arrays.items()}
        tape = GradientTape()
        out = forward(tensors, tape)
        grads = backward(tape, r, output=out)
        return float((out.data * r).sum()), {k: grads.wrt(t) for k, t in tensors.items()}

    return finite_diff_check(f, inputs, max_coords=20)


# =============================================================================
# Tensor and config types
# =============================================================================

class TestTensor:
    def test_default_dtype_is_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_float64_arrays_keep_precision(self):
        assert Tensor(np.zeros(3)).dtype == np.float64

    def test_scalar_is_stored_with_shape_one(self):
        assert Tensor(2.5).shape == (1,)

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_data_is_read_only(self):
        t = Tensor(np.ones(4))
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_numpy_returns_a_writable_copy(self):
        t = Tensor(np.ones(4))
        copy = t.numpy()
        copy[0] = 5.0
        assert t.data[0] == 1.0

    def test_constructor_copies_its_input(self):
        source = np.ones(3)
        t = Tensor(source)
        source[0] = 7.0
        assert t.data[0] == 1.0

    def test_uids_are_unique(self):
        assert Tensor.zeros((2,)).uid != Tensor.zeros((2,)).uid


class TestConvSpec:
    def test_output_extents(self):
        spec = ConvSpec((3, 3, 3), 4, 8, padding=(1, 1, 1))
        assert spec.output_extents((3, 8, 8)) == (3, 8, 8)

    def test_temporal_collapse_without_padding(self):
        spec = ConvSpec((3, 3, 3), 4, 8, padding=(0, 1, 1))
        assert spec.output_extents((3, 8, 8)) == (1, 8, 8)

    def test_non_integer_output_names_the_axis(self):
        spec = ConvSpec((3, 3), 1, 1, stride=2)
        with pytest.raises(ShapeError, match="width"):
            spec.output_extents((7, 6))

    def test_invalid_kernel_rank(self):
        with pytest.raises(ConfigError):
            ConvSpec((3,), 1, 1)

    def test_negative_padding(self):
        with pytest.raises(ConfigError):
            ConvSpec((3, 3), 1, 1, padding=-1)


class TestLayerParams:
    def test_non_positive_running_var_rejected(self):
        with pytest.raises(ConfigError):
            LayerParams(running_var=Tensor(np.array([1.0, 0.0])))

    def test_trainable_fields_in_order(self):
        p = LayerParams(weights=Tensor.zeros((1, 1, 1, 1)), bias=Tensor.zeros((1,)))
        assert [name for name, _ in p.trainable()] == ["weights", "bias"]


class TestSgdConfig:
    @pytest.mark.parametrize("field,value", [("learning_rate", -1.0), ("momentum", 1.0),
                                             ("weight_decay", -0.1), ("batch_size", 0)])
    def test_invalid_values(self, field, value):
        with pytest.raises(ConfigError, match=field):
            SgdConfig(**{field: value})


# =============================================================================
# Forward kernels against loop oracles
# =============================================================================

class TestConvolution:
    @pytest.mark.parametrize("nd,op", [(2, conv2d_forward), (3, conv3d_forward)])
    def test_matches_loop_oracle(self, nd, op):
        rng = np.random.default_rng(nd)
        for _ in range(100):
            spec, x, w, b = random_conv_case(rng, nd)
            params = LayerParams(weights=Tensor(w), bias=Tensor(b))
            out = op(Tensor(x), params, spec)
            np.testing.assert_allclose(out.data, naive_conv(x, w, b, spec.stride, spec.padding), atol=1e-5)

    def test_float32_matches_oracle(self, rng):
        spec = ConvSpec((3, 3, 3), 2, 3, padding=1)
        x = rng.normal(size=(1, 2, 3, 5, 5)).astype(np.float32)
        w = rng.normal(size=spec.weight_shape).astype(np.float32)
        out = conv3d_forward(Tensor(x), LayerParams(weights=Tensor(w)), spec)
        assert out.dtype == np.float32
        np.testing.assert_allclose(out.data, naive_conv(x.astype(np.float64), w.astype(np.float64), None,
                                                        spec.stride, spec.padding), atol=1e-4)

    def test_channel_mismatch_names_channel_axis(self, rng):
        spec = ConvSpec((3, 3, 3), 3, 2, padding=1)
        params = LayerParams(weights=Tensor(rng.normal(size=spec.weight_shape)))
        with pytest.raises(ShapeError, match="channel axis has 4"):
            conv3d_forward(Tensor(rng.normal(size=(1, 4, 3, 4, 4))), params, spec)

    def test_weight_shape_mismatch(self, rng):
        spec = ConvSpec((3, 3), 2, 2, padding=1)
        params = LayerParams(weights=Tensor(rng.normal(size=(2, 2, 1, 1))))
        with pytest.raises(ShapeError):
            conv2d_forward(Tensor(rng.normal(size=(1, 2, 4, 4))), params, spec)

    def test_wrong_kernel_rank_for_op(self, rng):
        spec = ConvSpec((3, 3), 1, 1)
        params = LayerParams(weights=Tensor(rng.normal(size=spec.weight_shape)))
        with pytest.raises(ShapeError):
            conv3d_forward(Tensor(rng.normal(size=(1, 1, 3, 3, 3))), params, spec)

    def test_temporally_constant_kernel_collapses_identical_frames(self, rng):
        # Identical frames and a kernel constant along time reduce conv3d to a scaled conv2d.
        frame = rng.normal(size=(1, 2, 1, 5, 5))
        x = np.repeat(frame, 3, axis=2)
        w2 = rng.normal(size=(3, 2, 3, 3))
        w3 = np.repeat(w2[:, :, None], 3, axis=2)
        out3 = conv3d_forward(Tensor(x), LayerParams(weights=Tensor(w3)), ConvSpec((3, 3, 3), 2, 3, padding=(0, 1, 1)))
        out2 = conv2d_forward(Tensor(frame[:, :, 0]), LayerParams(weights=Tensor(w2)), ConvSpec((3, 3), 2, 3, padding=1))
        np.testing.assert_allclose(out3.data[:, :, 0], 3 * out2.data, atol=1e-10)

    @pytest.mark.parametrize("nd,op", [(2, conv2d_forward), (3, conv3d_forward)])
    def test_linear_in_input(self, rng, nd, op):
        spec = ConvSpec((3,) * nd, 2, 3, padding=1)
        params = LayerParams(weights=Tensor(rng.normal(size=spec.weight_shape)))
        x = rng.normal(size=(2, 2) + (4,) * nd)
        y = rng.normal(size=x.shape)
        a, b = 1.7, -0.6
        combined = op(Tensor(a * x + b * y), params, spec).data
        separate = a * op(Tensor(x), params, spec).data + b * op(Tensor(y), params, spec).data
        np.testing.assert_allclose(combined, separate, atol=1e-4)

    @pytest.mark.parametrize("nd,op", [(2, conv2d_forward), (3, conv3d_forward)])
    def test_zero_kernel_outputs_bias(self, rng, nd, op):
        spec = ConvSpec((3,) * nd, 2, 3, padding=1)
        params = LayerParams(weights=Tensor(np.zeros(spec.weight_shape)), bias=Tensor(np.full(3, 0.7)))
        out = op(Tensor(rng.normal(size=(1, 2) + (5,) * nd)), params, spec)
        np.testing.assert_allclose(out.data, 0.7)

    @pytest.mark.parametrize("nd,op", [(2, conv2d_forward), (3, conv3d_forward)])
    def test_unit_kernel_passes_input_through(self, rng, nd, op):
        spec = ConvSpec((1,) * nd, 1, 1)
        params = LayerParams(weights=Tensor(np.ones(spec.weight_shape)), bias=Tensor(np.zeros(1)))
        x = rng.normal(size=(2, 1) + (4,) * nd)
        np.testing.assert_array_equal(op(Tensor(x), params, spec).data, x)


class TestMaxPool:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                     2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4)))
            x = rng.normal(size=shape)
            np.testing.assert_allclose(maxpool2d(Tensor(x)).data, naive_maxpool(x), atol=1e-12)

    def test_odd_extent_is_config_error(self):
        with pytest.raises(ConfigError, match="height"):
            maxpool2d(Tensor(np.zeros((1, 1, 5, 4))))

    def test_overlapping_pooling_rejected(self):
        with pytest.raises(ConfigError):
            maxpool2d(Tensor(np.zeros((1, 1, 4, 4))), window=3, stride=2)


class TestActivationsAndNorm:
    def test_leaky_relu_values(self):
        out = leaky_relu(Tensor(np.array([-2.0, 0.0, 3.0])))
        np.testing.assert_allclose(out.data, [-0.2, 0.0, 3.0])

    def test_logistic_values(self):
        out = logistic(Tensor(np.array([0.0, np.log(3.0)])))
        np.testing.assert_allclose(out.data, [0.5, 0.75])

    def test_logistic_reference_value(self):
        assert logistic(Tensor(np.array([0.2]))).data[0] == pytest.approx(0.549834, abs=1e-6)

    def test_logistic_symmetry(self, rng):
        x = rng.normal(0.0, 4.0, size=200)
        total = logistic(Tensor(x)).data + logistic(Tensor(-x)).data
        np.testing.assert_allclose(total, 1.0, atol=1e-6)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_logistic_stays_inside_open_interval(self, dtype):
        x = np.array([20.0, 40.0, 800.0, -120.0, -800.0], dtype=dtype)
        out = logistic(Tensor(x)).data
        assert out.dtype == dtype
        assert np.all(out > 0) and np.all(out < 1)

    def test_channel_norm_train_normalizes_each_channel(self, rng):
        x = rng.normal(3.0, 2.0, size=(4, 3, 2, 5, 5))
        params = LayerParams(scale=Tensor(np.ones(3)), shift=Tensor(np.zeros(3)),
                             running_mean=Tensor(np.zeros(3)), running_var=Tensor(np.ones(3)))
        out, _ = channel_norm(Tensor(x), params, mode="train")
        axes = (0, 2, 3, 4)
        np.testing.assert_allclose(out.data.mean(axis=axes), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.data.var(axis=axes), 1.0, atol=1e-4)

    def test_channel_norm_updates_running_statistics(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        params = LayerParams(scale=Tensor(np.ones(2)), shift=Tensor(np.zeros(2)),
                             running_mean=Tensor(np.zeros(2)), running_var=Tensor(np.ones(2)))
        _, updated = channel_norm(Tensor(x), params, mode="train", momentum=0.1)
        count = x.size // 2
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3)) * count / (count - 1)
        np.testing.assert_allclose(updated.running_mean.data, 0.1 * mean)
        np.testing.assert_allclose(updated.running_var.data, 0.9 + 0.1 * var)

    def test_channel_norm_infer_uses_running_statistics(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        params = LayerParams(scale=Tensor(np.full(2, 2.0)), shift=Tensor(np.full(2, 0.5)),
                             running_mean=Tensor(np.array([1.0, -1.0])), running_var=Tensor(np.array([4.0, 1.0])))
        out, same = channel_norm(Tensor(x), params, mode="infer")
        expected = 2.0 * (x - np.array([1.0, -1.0])[None, :, None, None]) / np.sqrt(
            np.array([4.0, 1.0])[None, :, None, None] + 1e-5) + 0.5
        np.testing.assert_allclose(out.data, expected)
        assert same is params

    def test_channel_norm_bad_mode(self, rng):
        params = LayerParams(scale=Tensor(np.ones(1)), shift=Tensor(np.zeros(1)),
                             running_mean=Tensor(np.zeros(1)), running_var=Tensor(np.ones(1)))
        with pytest.raises(ConfigError):
            channel_norm(Tensor(np.ones((2, 1, 2, 2))), params, mode="eval")


# =============================================================================
# Adjoints
# =============================================================================

class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_conv3d(self, seed):
        rng = np.random.default_rng(seed)
        spec, x, w, b = random_conv_case(rng, 3)
        error = op_gradient_error(
            lambda t, tape: conv3d_forward(t["x"], LayerParams(weights=t["w"], bias=t["b"]), spec, tape=tape),
            {"x": x, "w": w, "b": b}, seed)
        assert error < 1e-5

    @pytest.mark.parametrize("seed", range(5))
    def test_conv2d(self, seed):
        rng = np.random.default_rng(100 + seed)
        spec, x, w, b = random_conv_case(rng, 2)
        error = op_gradient_error(
            lambda t, tape: conv2d_forward(t["x"], LayerParams(weights=t["w"], bias=t["b"]), spec, tape=tape),
            {"x": x, "w": w, "b": b}, seed)
        assert error < 1e-5

    def test_maxpool(self, rng):
        # Well-separated values so the perturbation never changes the argmax.
        x = rng.permutation(64).reshape(1, 4, 4, 4) * 0.1
        assert op_gradient_error(lambda t, tape: maxpool2d(t["x"], tape=tape), {"x": x}) < 1e-5

    def test_leaky_relu(self, rng):
        x = rng.uniform(0.1, 2.0, size=(2, 3, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4))
        assert op_gradient_error(lambda t, tape: leaky_relu(t["x"], tape=tape), {"x": x}) < 1e-5

    def test_logistic(self, rng):
        x = rng.normal(size=(2, 3, 4))
        assert op_gradient_error(lambda t, tape: logistic(t["x"], tape=tape), {"x": x}) < 1e-5

    @pytest.mark.parametrize("mode", ["train", "infer"])
    def test_channel_norm(self, rng, mode):
        x = rng.normal(size=(2, 3, 2, 3, 3))
        inputs = {"x": x, "scale": rng.uniform(0.5, 1.5, size=3), "shift": rng.normal(size=3)}
        stats = {"running_mean": Tensor(rng.normal(size=3)), "running_var": Tensor(rng.uniform(0.5, 2.0, size=3))}

        def forward(t, tape):
            params = LayerParams(scale=t["scale"], shift=t["shift"], **stats)
            return channel_norm(t["x"], params, mode=mode, tape=tape)[0]

        assert op_gradient_error(forward, inputs) < 1e-5

    def test_shape_ops(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))

        def forward(t, tape):
            y = reshape(t["x"], (2, 3, 20), tape=tape)
            y = permute(y, (2, 0, 1), tape=tape)
            return select(y, 2, 1, tape=tape)

        assert op_gradient_error(forward, {"x": x}) < 1e-5

    def test_composed_conv_norm_activation(self, rng):
        spec = ConvSpec((3, 3, 3), 2, 3, padding=(0, 1, 1))
        inputs = {"x": rng.normal(size=(2, 2, 3, 4, 4)), "w": rng.normal(size=spec.weight_shape) * 0.3,
                  "scale": np.ones(3), "shift": np.zeros(3)}

        def forward(t, tape):
            y = conv3d_forward(t["x"], LayerParams(weights=t["w"]), spec, tape=tape)
            params = LayerParams(scale=t["scale"], shift=t["shift"], running_mean=Tensor(np.zeros(3)),
                                 running_var=Tensor(np.ones(3)))
            y, _ = channel_norm(y, params, tape=tape)
            return logistic(y, tape=tape)

        assert op_gradient_error(forward, inputs) < 1e-5

    def test_single_layer_quadratic_loss_matches_closed_form(self, rng):
        # A 1x1 conv on a 1x1 image is a dense layer: out = W x.
        spec = ConvSpec((1, 1), 4, 3)
        w = rng.normal(size=(3, 4))
        x = rng.normal(size=4)
        y = rng.normal(size=3)
        x_t = Tensor(x.reshape(1, 4, 1, 1))
        w_t = Tensor(w.reshape(3, 4, 1, 1))
        tape = GradientTape()
        out = conv2d_forward(x_t, LayerParams(weights=w_t), spec, tape=tape)
        residual = w @ x - y
        grads = backward(tape, 2 * (out.data - y.reshape(1, 3, 1, 1)))
        np.testing.assert_allclose(grads.wrt(x_t).reshape(4), 2 * w.T @ residual, atol=1e-12)
        np.testing.assert_allclose(grads.wrt(w_t).reshape(3, 4), 2 * np.outer(residual, x), atol=1e-12)

    def test_corrupted_adjoint_fails_the_check(self, rng):
        spec = ConvSpec((3, 3), 2, 2, padding=1)
        inputs = {"x": rng.normal(size=(1, 2, 4, 4)), "w": rng.normal(size=spec.weight_shape)}

        def forward(t, tape):
            out = conv2d_forward(t["x"], LayerParams(weights=t["w"]), spec, tape=tape)
            if tape is not None:
                entry = tape.entries[-1]
                honest = entry.backward
                entry.backward = lambda g: tuple(v * 1.01 for v in honest(g))
            return out

        assert op_gradient_error(forward, inputs) > 1e-5

    def test_unused_inputs_get_zero_gradients(self, rng):
        a, b = Tensor(rng.normal(size=(2, 2))), Tensor(rng.normal(size=(2, 2)))
        tape = GradientTape()
        logistic(a, tape=tape)
        out = leaky_relu(b, tape=tape)
        grads = backward(tape, np.ones(out.shape))
        np.testing.assert_array_equal(grads.wrt(a), np.zeros((2, 2)))
        assert grads.wrt(b).shape == (2, 2)

    def test_backward_is_bitwise_repeatable(self, rng):
        spec = ConvSpec((3, 3, 3), 3, 4, padding=1)
        x = Tensor(rng.normal(size=(2, 3, 3, 6, 6)).astype(np.float32))
        params = LayerParams(weights=Tensor(rng.normal(size=spec.weight_shape).astype(np.float32)))
        g = rng.normal(size=(2, 4, 3, 6, 6)).astype(np.float32)
        results = []
        for _ in range(2):
            tape = GradientTape()
            conv3d_forward(x, params, spec, tape=tape)
            results.append(backward(tape, g).wrt(x))
        assert np.array_equal(results[0], results[1])

    def test_empty_tape(self):
        with pytest.raises(ShapeError):
            backward(GradientTape(), np.ones(1))

    def test_seed_shape_mismatch(self, rng):
        tape = GradientTape()
        logistic(Tensor(rng.normal(size=(2, 2))), tape=tape)
        with pytest.raises(ShapeError):
            backward(tape, np.ones((3,)))

    def test_relative_error_floor(self):
        assert relative_error(1e-6, 2e-6) == pytest.approx(1e-3)
        assert relative_error(2.0, 1.0) == pytest.approx(0.5)


# =============================================================================
# SGD
# =============================================================================

class TestSgd:
    def test_momentum_accumulates(self):
        cfg = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
        params = {"w": Tensor(np.array([1.0]))}
        grads = {"w": np.array([0.5])}
        params, state = sgd_step(params, grads, None, cfg)
        assert params["w"].data[0] == pytest.approx(0.95)
        params, state = sgd_step(params, grads, state, cfg)
        assert state["w"][0] == pytest.approx(0.95)
        assert params["w"].data[0] == pytest.approx(0.855)

    def test_weight_decay_pulls_towards_zero(self):
        cfg = SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.5)
        params, _ = sgd_step({"w": Tensor(np.array([2.0]))}, {"w": np.array([0.0])}, None, cfg)
        assert params["w"].data[0] == pytest.approx(1.9)

    def test_zero_learning_rate_leaves_parameters_unchanged(self, rng):
        cfg = SgdConfig(learning_rate=0.0)
        w = Tensor(rng.normal(size=(3, 3)).astype(np.float32))
        params, _ = sgd_step({"w": w}, {"w": rng.normal(size=(3, 3))}, None, cfg)
        assert np.array_equal(params["w"].data, w.data)
        assert params["w"].dtype == np.float32

    def test_gradient_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step({"w": Tensor(np.zeros(2))}, {"w": np.zeros(3)}, None, SgdConfig())
