import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stvnet.convlstm import (
    ConvLSTMCell,
    ConvLSTMState,
    cell_gates,
    cell_step,
    layer_forward,
    sequence_forward,
)
from stvnet.engine import ShapeError, Tensor, finite_diff_check, mul, precision, tsum

from oracles import scalar_peephole_lstm, sigmoid


@pytest.fixture(autouse=True)
def f64():
    with precision("float64"):
        yield


def zero_cell(in_ch, hidden, spatial, kernel=3, mode="literal"):
    cell = ConvLSTMCell.create(in_ch, hidden, spatial, np.random.default_rng(0), kernel=kernel, mode=mode)
    for _, p in cell.parameters():
        p.data[:] = 0
    return cell


def random_cell(rng, in_ch, hidden, spatial=(1, 1, 1), kernel=1, mode="literal", scale=1.0):
    cell = ConvLSTMCell.create(in_ch, hidden, spatial, rng, kernel=kernel, mode=mode)
    for _, p in cell.parameters():
        p.data[:] = rng.normal(scale=scale, size=p.shape)
    return cell


def oracle_params(cell):
    """Nested-list parameters for the scalar oracle (1x1x1 kernels/extent)."""
    w, u, v, b = {}, {}, {}, {}
    for g in "ifco":
        arrs = cell.gate(g)
        w[g] = arrs["W"][..., 0, 0, 0].tolist()
        u[g] = arrs["U"][..., 0, 0, 0].tolist()
        b[g] = arrs["b"].tolist()
        if "V" in arrs:
            v[g] = arrs["V"][:, 0, 0, 0].tolist()
    return w, u, v, b


class TestCellStep:
    def test_zero_weights_closed_form(self):
        cell = zero_cell(2, 3, (4, 4, 2))
        x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 4, 2)))
        zero = Tensor(np.zeros((3, 4, 4, 2)))
        g = cell_gates(cell, x, ConvLSTMState(zero, zero))
        for name in "ifo":
            assert np.all(g[name].data == 0.5)
        assert np.abs(g["c"].data - 0.25).max() <= 1e-12
        expected_h = 0.5 / (1 + math.exp(-0.25))
        assert abs(expected_h - 0.28109) < 1e-5
        assert np.abs(g["h"].data - expected_h).max() <= 1e-12

    def test_pure_memory(self):
        rng = np.random.default_rng(2)
        cell = random_cell(rng, 2, 2, spatial=(3, 3, 3), kernel=3)
        h = cell.hidden_channels
        cell.bias.data[:h] = -1e3       # input gate shut
        cell.bias.data[h:2 * h] = 1e3   # forget gate open
        cell.V.data[:2] = 0
        c_prev = Tensor(rng.normal(size=(2, 3, 3, 3)))
        state = ConvLSTMState(Tensor(rng.normal(size=(2, 3, 3, 3))), c_prev)
        new = cell_step(cell, Tensor(rng.normal(size=(2, 3, 3, 3))), state)
        np.testing.assert_array_equal(new.c.data, c_prev.data)

    @pytest.mark.parametrize("mode", ["literal", "conventional"])
    @pytest.mark.parametrize("hidden,in_ch", [(1, 1), (3, 2)])
    def test_matches_scalar_oracle(self, mode, hidden, in_ch):
        rng = np.random.default_rng(hidden * 10 + in_ch)
        for _ in range(20):
            cell = random_cell(rng, in_ch, hidden, mode=mode)
            x = rng.normal(size=in_ch)
            h0, c0 = rng.normal(size=hidden), rng.normal(size=hidden)
            new = cell_step(cell, Tensor(x.reshape(in_ch, 1, 1, 1)),
                            ConvLSTMState(Tensor(h0.reshape(-1, 1, 1, 1)), Tensor(c0.reshape(-1, 1, 1, 1))))
            ref = scalar_peephole_lstm([x.tolist()], h0.tolist(), c0.tolist(), *oracle_params(cell),
                                       literal=mode == "literal")[-1]
            np.testing.assert_allclose(new.h.data.ravel(), ref, rtol=0, atol=1e-10)

    def test_accumulator(self):
        rng = np.random.default_rng(3)
        cell = random_cell(rng, 2, 2, spatial=(2, 2, 2), kernel=3)
        h = cell.hidden_channels
        cell.bias.data[:2 * h] = 1e3   # i = f = 1
        cell.V.data[:2] = 0
        cell.U.data[2 * h:3 * h] = 0   # candidate ignores h
        zero = Tensor(np.zeros((2, 2, 2, 2)))
        state = ConvLSTMState(zero, zero)
        xs = [Tensor(rng.normal(size=(2, 2, 2, 2))) for _ in range(4)]
        cands = []
        for x in xs:
            pre = cell.input_transform(x).data[2 * h:3 * h]
            cands.append(1 / (1 + np.exp(-pre)))
            state = cell_step(cell, x, state)
        np.testing.assert_allclose(state.c.data, np.sum(cands, axis=0), atol=1e-12)

    def test_shape_errors(self):
        cell = zero_cell(2, 3, (4, 4, 2))
        s = Tensor(np.zeros((3, 4, 4, 2)))
        with pytest.raises(ShapeError):
            cell_step(cell, Tensor(np.zeros((3, 4, 4, 2))), ConvLSTMState(s, s))
        with pytest.raises(ShapeError):
            cell_step(cell, Tensor(np.zeros((2, 4, 4, 4))), ConvLSTMState(s, s))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 0.5),
       mode=st.sampled_from(["literal", "conventional"]))
def test_gates_stay_in_open_unit_interval(seed, scale, mode):
    with precision("float64"):
        rng = np.random.default_rng(seed)
        cell = random_cell(rng, 2, 2, spatial=(3, 3, 2), kernel=3, mode=mode, scale=scale)
        x = Tensor(rng.normal(size=(2, 3, 3, 2)))
        s = ConvLSTMState(Tensor(rng.normal(size=(2, 3, 3, 2))), Tensor(rng.normal(size=(2, 3, 3, 2))))
        g = cell_gates(cell, x, s)
        for name in "ifo":
            assert np.all((g[name].data > 0) & (g[name].data < 1))
        assert g["h"].shape == g["c"].shape == (2, 3, 3, 2)


class TestSequenceForward:
    def test_single_frame_is_copy_initialized_step(self):
        rng = np.random.default_rng(4)
        cell = random_cell(rng, 2, 2, spatial=(3, 3, 3), kernel=3, scale=0.3)
        x = Tensor(rng.normal(size=(2, 3, 3, 3)))
        out = sequence_forward([cell], [x])
        ref = cell_step(cell, x, ConvLSTMState(x, x)).h
        np.testing.assert_array_equal(out.data, ref.data)

    def test_constant_sequence_bounded(self):
        rng = np.random.default_rng(5)
        stack = [random_cell(rng, 2, 2, spatial=(3, 3, 2), kernel=3, scale=0.5) for _ in range(2)]
        x = Tensor(rng.normal(size=(2, 3, 3, 2)))
        outs = [sequence_forward(stack, [x] * t).data for t in (1, 4, 8, 16)]
        for o in outs:
            assert np.all(np.isfinite(o)) and np.all(np.abs(o) < 1)
        # the recurrence settles: late outputs barely move
        assert np.abs(outs[3] - outs[2]).max() < np.abs(outs[1] - outs[0]).max() + 1e-12

    @pytest.mark.parametrize("mode", ["literal", "conventional"])
    def test_two_layers_match_scalar_oracle(self, mode):
        rng = np.random.default_rng(6)
        for hidden in (1, 2):
            for _ in range(10):
                stack = [random_cell(rng, hidden, hidden, mode=mode) for _ in range(2)]
                xs = [rng.normal(size=hidden) for _ in range(4)]
                out = sequence_forward(stack, [Tensor(x.reshape(-1, 1, 1, 1)) for x in xs])
                seq = [x.tolist() for x in xs]
                for cell in stack:
                    seq = scalar_peephole_lstm(seq, seq[0], seq[0], *oracle_params(cell),
                                               literal=mode == "literal")
                np.testing.assert_allclose(out.data.ravel(), seq[-1], rtol=0, atol=1e-10)

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(7)
        stack = [random_cell(rng, 2, 2, spatial=(2, 3, 2), kernel=3, scale=0.5) for _ in range(2)]
        xs = rng.normal(size=(3, 2, 2, 2, 3, 2))  # (T, N, C, X, Y, Z)
        out = sequence_forward(stack, [Tensor(x) for x in xs])
        for n in range(2):
            single = sequence_forward(stack, [Tensor(x[n]) for x in xs])
            np.testing.assert_allclose(out.data[n], single.data, atol=1e-13)

    def test_copy_init_channel_constraint(self):
        cell = zero_cell(3, 2, (2, 2, 2))
        with pytest.raises(ShapeError, match="copied from the first frame"):
            sequence_forward([cell], [Tensor(np.zeros((3, 2, 2, 2)))])

    def test_mode_swap_keeps_shapes(self):
        rng = np.random.default_rng(8)
        outs = []
        for mode in ("literal", "conventional"):
            r = np.random.default_rng(9)
            stack = [random_cell(r, 2, 2, spatial=(3, 3, 2), kernel=3, mode=mode, scale=0.5)
                     for _ in range(2)]
            xs = [Tensor(a) for a in rng.normal(size=(3, 2, 3, 3, 2))]
            outs.append(sequence_forward(stack, xs).data)
            rng = np.random.default_rng(8)
        assert outs[0].shape == outs[1].shape
        assert not np.allclose(outs[0], outs[1])

    @pytest.mark.parametrize("mode", ["literal", "conventional"])
    def test_gradient_through_four_steps(self, mode):
        rng = np.random.default_rng(10)
        stack = [random_cell(rng, 2, 2, spatial=(3, 3, 2), kernel=3, mode=mode, scale=0.4)
                 for _ in range(2)]
        xs = [Tensor(a, requires_grad=True) for a in rng.normal(size=(4, 2, 3, 3, 2))]
        w = Tensor(rng.normal(size=(2, 3, 3, 2)))
        params = [p for cell in stack for _, p in cell.parameters()] + xs
        f = lambda: tsum(mul(sequence_forward(stack, xs), w))
        assert finite_diff_check(f, params, h=1e-4) < 1e-4

    def test_layer_forward_returns_all_hidden(self):
        rng = np.random.default_rng(11)
        cell = random_cell(rng, 2, 2, spatial=(2, 2, 2), kernel=3)
        xs = [Tensor(a) for a in rng.normal(size=(3, 2, 2, 2, 2))]
        hs = layer_forward(cell, xs)
        assert len(hs) == 3
        s = ConvLSTMState(xs[0], xs[0])
        for x, h in zip(xs, hs):
            s = cell_step(cell, x, s)
            np.testing.assert_allclose(h.data, s.h.data, atol=1e-14)
