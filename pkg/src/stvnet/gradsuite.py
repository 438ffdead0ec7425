"""Seeded finite-difference checks behind the ``gradcheck`` command."""

from __future__ import annotations

import time
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .convlstm import ConvLSTMCell, ConvLSTMState, cell_step, sequence_forward
from .engine import (
    STEP_LADDER,
    BatchNormParams,
    ConvParams,
    Tensor,
    activation,
    batch_norm3d,
    concat_channels,
    conv3d,
    conv_transpose3d,
    finite_diff_check,
    max_pool3d,
    mul,
    precision,
    tsum,
)
from .networks import NetworkSpec, build
from .training import dice_loss, l1_penalty

OP_TOL = 1e-4
NET_TOL = 1e-3
MODULES = ("tensor", "convlstm", "network")
# entries probed per ConvLSTM check (a random subset keeps the suite fast)
LSTM_PROBES = 100


class CheckResult(NamedTuple):
    module: str
    name: str
    worst: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def _leaf(rng, shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def _contract(shape, rng) -> Callable[[Tensor], Tensor]:
    """Scalar loss ``sum(out * w)`` with ``w`` drawn once, so every output
    entry gets its own weight."""
    w = Tensor(rng.normal(size=shape), dtype=np.float64)
    return lambda out: tsum(mul(out, w))


def _conv(rng, cout, cin, k, stride=1):
    x = _leaf(rng, (cin, 4, 4, 4))
    p = ConvParams(_leaf(rng, (cout, cin, k, k, k)), _leaf(rng, (cout,)))
    n = 4 // stride
    loss = _contract((cout, n, n, n), rng)
    return lambda: loss(conv3d(x, p, stride=stride)), [x, p.kernel, p.bias]


def _check_conv(rng):
    f, ps = _conv(rng, 2, 3, 3)
    return finite_diff_check(f, ps)


def _check_conv_strided(rng):
    f, ps = _conv(rng, 2, 3, 3, stride=2)
    return finite_diff_check(f, ps)


def _check_conv_transpose(rng):
    x = _leaf(rng, (3, 4, 4, 4))
    p = ConvParams(_leaf(rng, (3, 2, 2, 2, 2)), _leaf(rng, (2,)))
    w = rng.normal(size=(2, 8, 8, 8))
    return finite_diff_check(lambda: tsum(mul(conv_transpose3d(x, p, stride=2), Tensor(w))),
                             [x, p.kernel, p.bias])


def _check_pool(rng):
    x = _leaf(rng, (3, 4, 4, 4))
    w = rng.normal(size=(3, 2, 2, 2))
    return finite_diff_check(lambda: tsum(mul(max_pool3d(x, 2, 2), Tensor(w))), [x])


def _batch_norm(training: bool):
    def check(rng):
        x = _leaf(rng, (3, 4, 4, 4))
        p = BatchNormParams.identity(3, dtype=np.float64)
        p.gamma.data[:] = rng.uniform(0.5, 2, 3)
        p.beta.data[:] = rng.normal(size=3)
        p.running_mean[:] = rng.normal(size=3)
        p.running_var[:] = rng.uniform(0.5, 2, 3)
        w = rng.normal(size=(3, 4, 4, 4))
        return finite_diff_check(lambda: tsum(mul(batch_norm3d(x, p, training=training), Tensor(w))),
                                 [x, p.gamma, p.beta])
    return check


def _activation(kind: str):
    def check(rng):
        x = _leaf(rng, (3, 4, 4, 4))
        loss = _contract(x.shape, rng)
        return finite_diff_check(lambda: loss(activation(x, kind)), [x])
    return check


def _check_concat(rng):
    a, b = _leaf(rng, (2, 3, 3, 3)), _leaf(rng, (3, 3, 3, 3))
    w = rng.normal(size=(5, 3, 3, 3))
    return finite_diff_check(lambda: tsum(mul(concat_channels(a, b), Tensor(w))), [a, b])


def _check_dice(rng):
    p = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 4, 4, 4)), requires_grad=True, dtype=np.float64)
    y = (rng.random((2, 1, 4, 4, 4)) < 0.5).astype(np.uint8)
    return finite_diff_check(lambda: dice_loss(p, y), [p], h=1e-5)


def _check_l1(rng):
    ws = [_leaf(rng, (3, 4)), _leaf(rng, (5,))]
    return finite_diff_check(lambda: l1_penalty(ws, 0.5), ws)


def _cells(rng, mode):
    stack = []
    for _ in range(2):
        cell = ConvLSTMCell.create(2, 2, (3, 3, 2), rng, kernel=3, mode=mode, dtype=np.float64)
        for _, p in cell.parameters():
            p.data[:] = rng.normal(scale=0.4, size=p.shape)
        stack.append(cell)
    return stack


def _lstm_step(mode):
    def check(rng):
        cell = _cells(rng, mode)[0]
        x, h, c = (_leaf(rng, (2, 3, 3, 2)) for _ in range(3))
        params = [p for _, p in cell.parameters()] + [x, h, c]
        loss = _contract(h.shape, rng)
        return finite_diff_check(lambda: loss(cell_step(cell, x, ConvLSTMState(h, c)).h), params,
                                 h=STEP_LADDER, max_entries=LSTM_PROBES, rng=rng)
    return check


def _lstm_sequence(mode):
    def check(rng):
        stack = _cells(rng, mode)
        xs = [_leaf(rng, (2, 3, 3, 2)) for _ in range(3)]
        params = [p for cell in stack for _, p in cell.parameters()] + xs
        loss = _contract(xs[0].shape, rng)
        return finite_diff_check(lambda: loss(sequence_forward(stack, xs)), params,
                                 h=STEP_LADDER, max_entries=LSTM_PROBES, rng=rng)
    return check


def _network(arch: str, window: int):
    def check(rng):
        spec = NetworkSpec(arch=arch, window_T=window, base_channels=2, input_shape=(8, 8, 4))
        net = build(spec, seed=int(rng.integers(2**31)), dtype=np.float64)
        x = rng.normal(size=(2, window, 8, 8, 4))
        w = Tensor(rng.normal(size=(2, 1, 8, 8, 4)))
        params = net.parameters()
        # probe 1% of the weights (at least 20 entries)
        n = max(20, sum(p.data.size for p in params) // 100)
        f = lambda: tsum(mul(net.forward(x, training=True), w))
        return finite_diff_check(f, params, h=STEP_LADDER, max_entries=n, rng=rng)
    return check


CHECKS: dict[str, list[tuple[str, Callable, float]]] = {
    "tensor": [
        ("conv3d", _check_conv, OP_TOL),
        ("conv3d_stride2", _check_conv_strided, OP_TOL),
        ("conv_transpose3d", _check_conv_transpose, OP_TOL),
        ("max_pool3d", _check_pool, OP_TOL),
        ("batch_norm3d_train", _batch_norm(True), OP_TOL),
        ("batch_norm3d_eval", _batch_norm(False), OP_TOL),
        ("relu", _activation("relu"), OP_TOL),
        ("sigmoid", _activation("sigmoid"), OP_TOL),
        ("tanh", _activation("tanh"), OP_TOL),
        ("concat_channels", _check_concat, OP_TOL),
        ("dice_loss", _check_dice, OP_TOL),
        ("l1_penalty", _check_l1, OP_TOL),
    ],
    "convlstm": [
        ("cell_step_literal", _lstm_step("literal"), OP_TOL),
        ("cell_step_conventional", _lstm_step("conventional"), OP_TOL),
        ("sequence_forward_literal", _lstm_sequence("literal"), OP_TOL),
        ("sequence_forward_conventional", _lstm_sequence("conventional"), OP_TOL),
    ],
    "network": [
        ("stvnet_end_to_end", _network("stvnet", 2), NET_TOL),
    ],
}


def run_checks(modules: Sequence[str] = MODULES, seeds: int = 10,
               report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    """Run every check of ``modules`` for seeds ``0..seeds-1`` in 64-bit.

    Each result holds the worst relative error over all seeds.
    """
    unknown = set(modules) - set(MODULES)
    if unknown:
        raise ValueError(f"unknown gradcheck module(s): {sorted(unknown)}")
    results = []
    with precision("float64"):
        for module in modules:
            for name, check, tol in CHECKS[module]:
                t0 = time.perf_counter()
                worst = max(check(np.random.default_rng(seed)) for seed in range(seeds))
                r = CheckResult(module, name, worst, tol, time.perf_counter() - t0)
                results.append(r)
                if report:
                    report(r)
    return results
