import numpy as np
import pytest

from stvnet.engine import (
    STEP_LADDER,
    BatchNormParams,
    ConvParams,
    ShapeError,
    Tape,
    Tensor,
    activation,
    backward,
    batch_norm3d,
    concat_channels,
    conv3d,
    conv_transpose3d,
    finite_diff_check,
    max_pool3d,
    mul,
    precision,
    relu,
    sigmoid,
    tanh,
    tsum,
)

from oracles import naive_conv3d, naive_conv_transpose3d, naive_max_pool


@pytest.fixture(autouse=True)
def f64():
    with precision("float64"):
        yield


def conv(kernel, bias=None, grad=False):
    return ConvParams(Tensor(kernel, requires_grad=grad),
                      None if bias is None else Tensor(bias, requires_grad=grad))


class TestConv3d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 5, 4, 3))
        y = conv3d(Tensor(x), conv(np.ones((1, 1, 1, 1, 1)), np.zeros(1)))
        np.testing.assert_array_equal(y.data, x)

    def test_zero_kernel(self):
        x = np.random.default_rng(1).normal(size=(2, 4, 4, 4))
        y = conv3d(Tensor(x), conv(np.zeros((3, 2, 3, 3, 3)), np.zeros(3)))
        assert y.shape == (3, 4, 4, 4)
        assert not y.data.any()

    def test_ones_receptive_field(self):
        y = conv3d(Tensor(np.ones((1, 5, 5, 5))), conv(np.ones((1, 1, 3, 3, 3)), np.zeros(1)))
        ref = naive_conv3d(np.ones((1, 5, 5, 5)), np.ones((1, 1, 3, 3, 3)))
        assert ref[0, 2, 2, 2] == 27 and ref[0, 0, 0, 0] == 8
        assert y.data[0, 2, 2, 2] == 27
        assert y.data[0, 0, 0, 0] == 8
        np.testing.assert_array_equal(y.data, ref)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_naive(self, stride):
        rng = np.random.default_rng(stride)
        x = rng.normal(size=(2, 4, 5, 3))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        y = conv3d(Tensor(x), conv(w, b), stride=stride)
        np.testing.assert_allclose(y.data, naive_conv3d(x, w, b, stride=stride), atol=1e-12)

    def test_batched_equals_unbatched(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 2, 4, 4, 4))
        p = conv(rng.normal(size=(4, 2, 3, 3, 3)), rng.normal(size=4))
        y = conv3d(Tensor(x), p)
        for n in range(3):
            np.testing.assert_allclose(y.data[n], conv3d(Tensor(x[n]), p).data, atol=1e-13)

    def test_linearity(self):
        rng = np.random.default_rng(4)
        p = conv(rng.normal(size=(3, 2, 3, 3, 3)))
        x, z = rng.normal(size=(2, 2, 4, 4, 4))
        a, b = 1.7, -0.3
        lhs = conv3d(Tensor(a * x + b * z), p).data
        rhs = a * conv3d(Tensor(x), p).data + b * conv3d(Tensor(z), p).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(ShapeError) as err:
            conv3d(Tensor(np.ones((2, 4, 4, 4))), conv(np.ones((1, 3, 3, 3, 3))))
        assert err.value.axis == "channel"

    def test_even_kernel_rejected_for_same(self):
        with pytest.raises(ShapeError):
            conv3d(Tensor(np.ones((1, 4, 4, 4))), conv(np.ones((1, 1, 2, 3, 3))))


class TestConvTranspose3d:
    def test_single_voxel_scatter(self):
        x = np.zeros((1, 2, 2, 2))
        x[0, 1, 0, 1] = 1.0
        y = conv_transpose3d(Tensor(x), conv(np.ones((1, 1, 2, 2, 2))), stride=2)
        assert y.shape == (1, 4, 4, 4)
        expected = np.zeros((1, 4, 4, 4))
        expected[0, 2:4, 0:2, 2:4] = 1.0
        np.testing.assert_array_equal(y.data, expected)

    def test_zero_input(self):
        y = conv_transpose3d(Tensor(np.zeros((2, 3, 3, 3))), conv(np.ones((2, 3, 2, 2, 2))))
        assert y.shape == (3, 6, 6, 6) and not y.data.any()

    def test_matches_naive(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 2, 3, 2))
        w = rng.normal(size=(3, 2, 2, 2, 2))
        y = conv_transpose3d(Tensor(x), conv(w), stride=2)
        np.testing.assert_allclose(y.data, naive_conv_transpose3d(x, w, stride=2), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_same_padding(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(3, 2, 3, 3, 3))
        x = rng.normal(size=(2, 4, 4, 4))
        y = rng.normal(size=(3, 4, 4, 4))
        p = conv(w)
        lhs = np.vdot(conv3d(Tensor(x), p).data, y)
        rhs = np.vdot(x, conv_transpose3d(Tensor(y), p, stride=1, padding=1).data)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_strided(self, seed):
        rng = np.random.default_rng(100 + seed)
        w = rng.normal(size=(3, 2, 2, 2, 2))
        x = rng.normal(size=(2, 4, 4, 4))
        y = rng.normal(size=(3, 2, 2, 2))
        p = conv(w)
        lhs = np.vdot(conv3d(Tensor(x), p, stride=2, padding=0).data, y)
        rhs = np.vdot(x, conv_transpose3d(Tensor(y), p, stride=2).data)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_output_size_reaches_odd_extent(self):
        rng = np.random.default_rng(9)
        w = rng.normal(size=(3, 2, 3, 3, 3))
        x = rng.normal(size=(2, 5, 5, 5))
        y = rng.normal(size=(3, 3, 3, 3))
        p = conv(w)
        lhs = np.vdot(conv3d(Tensor(x), p, stride=2).data, y)
        rhs = np.vdot(x, conv_transpose3d(Tensor(y), p, stride=2, padding=1, output_size=5).data)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


class TestMaxPool:
    def test_block_max(self):
        x = np.arange(1, 9, dtype=float).reshape(1, 2, 2, 2)
        assert max_pool3d(Tensor(x), 2, 2).data.item() == 8

    def test_constant(self):
        y = max_pool3d(Tensor(np.full((2, 4, 4, 6), 3.5)), 2, 2)
        assert y.shape == (2, 2, 2, 3)
        assert np.all(y.data == 3.5)

    def test_matches_naive(self):
        x = np.random.default_rng(0).normal(size=(3, 4, 6, 2))
        np.testing.assert_array_equal(max_pool3d(Tensor(x), 2).data, naive_max_pool(x))

    def test_backward_routes_to_argmax(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.permutation(64).astype(float).reshape(1, 4, 4, 4), requires_grad=True)
        with Tape() as tape:
            loss = tsum(max_pool3d(x, 2, 2))
        g = backward(tape, loss)[x]
        expected = np.zeros((1, 4, 4, 4))
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    win = x.data[0, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2]
                    a, b, c = np.unravel_index(np.argmax(win), win.shape)
                    expected[0, 2 * i + a, 2 * j + b, 2 * k + c] = 1
        np.testing.assert_array_equal(g, expected)

    def test_tie_goes_to_first_index(self):
        x = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = tsum(max_pool3d(x, 2, 2))
        g = backward(tape, loss)[x]
        assert g[0, 0, 0, 0] == 1 and g.sum() == 1

    def test_indivisible_extent(self):
        with pytest.raises(ShapeError, match="divisible") as err:
            max_pool3d(Tensor(np.ones((1, 4, 5, 4))), 2, 2)
        assert err.value.axis == "y"


class TestBatchNorm:
    def test_constant_input_maps_to_zero(self):
        p = BatchNormParams.identity(2)
        y = batch_norm3d(Tensor(np.full((2, 2, 3, 3, 3), 4.2)), p, training=True)
        assert np.abs(y.data).max() <= np.sqrt(p.eps)

    def test_zero_gamma_gives_beta(self):
        p = BatchNormParams.identity(2)
        p.gamma.data[:] = 0
        p.beta.data[:] = [0.3, -1.0]
        x = np.random.default_rng(0).normal(size=(2, 2, 3, 3, 3))
        y = batch_norm3d(Tensor(x), p, training=True)
        np.testing.assert_array_equal(y.data[:, 0], 0.3)
        np.testing.assert_array_equal(y.data[:, 1], -1.0)

    def test_two_voxel_channel(self):
        p = BatchNormParams.identity(1, eps=1e-5)
        x = np.array([0.0, 2.0]).reshape(1, 1, 2, 1, 1)
        y = batch_norm3d(Tensor(x), p, training=True).data.ravel()
        # mean 1, biased variance 1
        expected = 1 / np.sqrt(1 + 1e-5)
        np.testing.assert_allclose(y, [-expected, expected], rtol=0, atol=1e-15)

    def test_training_moments(self):
        p = BatchNormParams.identity(3)
        p.gamma.data[:] = [2.0, 0.5, 1.0]
        p.beta.data[:] = [1.0, -1.0, 0.0]
        x = np.random.default_rng(2).normal(3, 2, size=(4, 3, 4, 4, 4))
        y = batch_norm3d(Tensor(x), p, training=True).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3, 4)), p.beta.data, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3, 4)), p.gamma.data ** 2, rtol=1e-4)

    def test_running_stats_and_eval(self):
        p = BatchNormParams.identity(1, momentum=0.1)
        x = np.random.default_rng(3).normal(2.0, 3.0, size=(2, 1, 4, 4, 4))
        batch_norm3d(Tensor(x), p, training=True)
        m = x.size
        np.testing.assert_allclose(p.running_mean, 0.1 * x.mean())
        np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var() * m / (m - 1))
        y = batch_norm3d(Tensor(x), p, training=False).data
        np.testing.assert_allclose(y, (x - p.running_mean[0]) / np.sqrt(p.running_var[0] + p.eps))

    def test_needs_two_values(self):
        with pytest.raises(ShapeError):
            batch_norm3d(Tensor(np.ones((1, 1, 1, 1, 1))), BatchNormParams.identity(1), training=True)


class TestActivations:
    def test_values(self):
        assert sigmoid(Tensor(0.0)).data == 0.5
        np.testing.assert_array_equal(relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])
        assert tanh(Tensor(0.0)).data == 0.0

    def test_ranges(self):
        x = Tensor(np.linspace(-30, 30, 101))
        s = activation(x, "sigmoid").data
        assert np.all((s >= 0) & (s <= 1))
        assert np.all(activation(x, "relu").data >= 0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            activation(Tensor(1.0), "gelu")


class TestConcat:
    def test_shape(self):
        a = Tensor(np.zeros((2, 4, 4, 4)))
        b = Tensor(np.ones((3, 4, 4, 4)))
        assert concat_channels(a, b).shape == (5, 4, 4, 4)

    def test_empty_is_identity(self):
        a = Tensor(np.random.default_rng(0).normal(size=(2, 3, 3, 3)))
        out = concat_channels(a, Tensor(np.zeros((0, 3, 3, 3))))
        np.testing.assert_array_equal(out.data, a.data)

    def test_backward_splits(self):
        a = Tensor(np.zeros((1, 2, 2, 2, 2)), requires_grad=True)
        b = Tensor(np.zeros((1, 3, 2, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = tsum(concat_channels(a, b))
        g = backward(tape, loss)
        np.testing.assert_array_equal(g[a], np.ones(a.shape))
        np.testing.assert_array_equal(g[b], np.ones(b.shape))

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError) as err:
            concat_channels(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 4, 2))))
        assert err.value.axis == "z"


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = tsum(x)
        np.testing.assert_array_equal(backward(tape, loss)[x], np.ones((2, 3)))

    def test_constant_loss_has_no_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = tsum(mul(x, 0.0))
        np.testing.assert_array_equal(backward(tape, loss)[x], 0)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = mul(x, 2.0)
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_tape_is_topological(self):
        x = Tensor(np.ones((1, 4, 4, 4)), requires_grad=True)
        p = conv(np.ones((1, 1, 3, 3, 3)), np.zeros(1), grad=True)
        with Tape() as tape:
            tsum(relu(conv3d(x, p)))
        seen = {id(x), id(p.kernel), id(p.bias)}
        for node in tape.nodes:
            assert all(id(t) in seen for t in node.inputs)
            seen.add(id(node.output))

    def test_untracked_without_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = mul(x, 2.0)
        assert not y.requires_grad

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 2, 4, 4, 4)), requires_grad=True)
        p = conv(rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3), grad=True)

        def run():
            with Tape() as tape:
                loss = tsum(relu(conv3d(x, p)))
            g = backward(tape, loss)
            return loss.data.copy(), g[p.kernel].copy(), g[x].copy()

        a, b = run(), run()
        for u, v in zip(a, b):
            assert np.array_equal(u, v)


class TestFiniteDifferences:
    def test_quadratic_exact(self):
        w = Tensor(np.random.default_rng(0).normal(size=10), requires_grad=True)
        assert finite_diff_check(lambda: tsum(mul(w, w)), [w], h=1e-4) < 1e-10

    def test_composite_conv_relu_sum(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(3, 4, 4, 4)), requires_grad=True)
        p = conv(rng.normal(size=(2, 3, 3, 3, 3)), rng.normal(size=2), grad=True)
        assert finite_diff_check(lambda: tsum(relu(conv3d(x, p))), [x, p.kernel, p.bias]) < 1e-4

    def test_ladder_steps_off_a_kink(self):
        # 3e-5 from the ReLU corner: h=1e-4 straddles it, the ladder does not
        x = Tensor(np.array([3e-5, -3e-5, 0.7]), requires_grad=True)
        f = lambda: tsum(relu(x))
        assert finite_diff_check(f, [x], h=1e-4) > 0.1
        assert finite_diff_check(f, [x], h=STEP_LADDER) < 1e-8

    def test_ladder_needs_three_rungs(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ValueError):
            finite_diff_check(lambda: tsum(mul(w, w)), [w], h=(1e-3, 1e-4))

    def test_float32_rejected(self):
        w = Tensor(np.ones(2, np.float32), requires_grad=True, dtype=np.float32)
        with pytest.raises(TypeError):
            finite_diff_check(lambda: tsum(w), [w])


def _weighted(out, rng):
    """Contract with a fixed random tensor so gradients are not all equal."""
    return tsum(mul(out, Tensor(rng.normal(size=out.shape))))


@pytest.mark.parametrize("seed", range(10))
class TestOpGradients:
    """Each differentiable layer against central differences, h=1e-4."""

    def _setup(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 4, 4, 4)), requires_grad=True)
        return rng, x

    def test_conv3d(self, seed):
        rng, x = self._setup(seed)
        p = conv(rng.normal(size=(2, 3, 3, 3, 3)), rng.normal(size=2), grad=True)
        w = rng.normal(size=(2, 4, 4, 4))
        f = lambda: tsum(mul(conv3d(x, p), Tensor(w)))
        assert finite_diff_check(f, [x, p.kernel, p.bias], h=1e-4) < 1e-4

    def test_conv3d_strided(self, seed):
        rng, x = self._setup(seed)
        p = conv(rng.normal(size=(2, 3, 3, 3, 3)), rng.normal(size=2), grad=True)
        w = rng.normal(size=(2, 2, 2, 2))
        f = lambda: tsum(mul(conv3d(x, p, stride=2), Tensor(w)))
        assert finite_diff_check(f, [x, p.kernel, p.bias], h=1e-4) < 1e-4

    def test_conv_transpose3d(self, seed):
        rng, x = self._setup(seed)
        p = conv(rng.normal(size=(3, 2, 2, 2, 2)), rng.normal(size=2), grad=True)
        w = rng.normal(size=(2, 8, 8, 8))
        f = lambda: tsum(mul(conv_transpose3d(x, p, stride=2), Tensor(w)))
        assert finite_diff_check(f, [x, p.kernel, p.bias], h=1e-4) < 1e-4

    def test_max_pool3d(self, seed):
        rng, x = self._setup(seed)
        w = rng.normal(size=(3, 2, 2, 2))
        f = lambda: tsum(mul(max_pool3d(x, 2, 2), Tensor(w)))
        assert finite_diff_check(f, [x], h=1e-4) < 1e-4

    @pytest.mark.parametrize("training", [True, False])
    def test_batch_norm3d(self, seed, training):
        rng, x = self._setup(seed)
        p = BatchNormParams.identity(3)
        p.gamma.data[:] = rng.uniform(0.5, 2, 3)
        p.beta.data[:] = rng.normal(size=3)
        p.running_mean[:] = rng.normal(size=3)
        p.running_var[:] = rng.uniform(0.5, 2, 3)
        w = rng.normal(size=(3, 4, 4, 4))
        f = lambda: tsum(mul(batch_norm3d(x, p, training=training), Tensor(w)))
        assert finite_diff_check(f, [x, p.gamma, p.beta], h=1e-4) < 1e-4

    @pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh"])
    def test_activation(self, seed, kind):
        rng, x = self._setup(seed)
        w = rng.normal(size=(3, 4, 4, 4))
        f = lambda: tsum(mul(activation(x, kind), Tensor(w)))
        assert finite_diff_check(f, [x], h=1e-4) < 1e-4

    def test_concat_channels(self, seed):
        rng, x = self._setup(seed)
        y = Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
        w = rng.normal(size=(5, 4, 4, 4))
        f = lambda: tsum(mul(mul(concat_channels(x, y), concat_channels(x, y)), Tensor(w)))
        assert finite_diff_check(f, [x, y], h=1e-4) < 1e-4
