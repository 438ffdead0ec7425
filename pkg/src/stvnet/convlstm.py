"""Convolutional LSTM with peephole terms and copy-from-first-frame start.

Gate pre-activations are convolutions of the input and the previous hidden
state plus, for the input/forget/output gates, an elementwise (full spatial
extent) peephole product with the cell state.  In ``"literal"`` mode the
cell candidate and the hidden output are squashed with a sigmoid; the
``"conventional"`` mode uses tanh for both.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .engine import ConvParams, ShapeError, Tensor, add, concat, conv3d, mul, sigmoid, tanh
from .engine.tensor import default_dtype

GATES = ("i", "f", "c", "o")
PEEPHOLE_GATES = ("i", "f", "o")
MODES = ("literal", "conventional")


class ConvLSTMState(NamedTuple):
    h: Tensor
    c: Tensor


@dataclass
class ConvLSTMCell:
    """One ConvLSTM layer.

    The four gate kernels are stored stacked along the output axis in the
    order i, f, c, o: ``W`` is ``(4H, in_ch, k, k, k)``, ``U`` is
    ``(4H, H, k, k, k)`` and ``bias`` is ``(4H,)``.  ``V`` holds the i, f, o
    peepholes, shape ``(3, H, X, Y, Z)``.  Use :meth:`gate` for per-gate views.
    """

    W: Tensor
    U: Tensor
    V: Tensor
    bias: Tensor | None
    hidden_channels: int
    mode: str = "literal"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        h = self.hidden_channels
        if self.W.shape[0] != 4 * h or self.U.shape[:2] != (4 * h, h) or self.V.shape[:2] != (3, h):
            raise ShapeError(f"inconsistent ConvLSTM parameter shapes for hidden={h}: "
                             f"W{self.W.shape} U{self.U.shape} V{self.V.shape}")

    @classmethod
    def create(cls, in_channels: int, hidden_channels: int, spatial: Sequence[int],
               rng: np.random.Generator, kernel: int = 3, mode: str = "literal",
               dtype=None) -> "ConvLSTMCell":
        """Uniform fan-in initialization for W and U; zero biases and peepholes."""
        dtype = np.dtype(dtype or default_dtype())
        k3 = kernel ** 3
        h = hidden_channels
        bw = 1.0 / np.sqrt(in_channels * k3)
        bu = 1.0 / np.sqrt(h * k3)
        W = rng.uniform(-bw, bw, size=(4 * h, in_channels, kernel, kernel, kernel)).astype(dtype)
        U = rng.uniform(-bu, bu, size=(4 * h, h, kernel, kernel, kernel)).astype(dtype)
        V = np.zeros((3, h) + tuple(spatial), dtype=dtype)
        return cls(
            W=Tensor(W, requires_grad=True, dtype=dtype),
            U=Tensor(U, requires_grad=True, dtype=dtype),
            V=Tensor(V, requires_grad=True, dtype=dtype),
            bias=Tensor(np.zeros(4 * h, dtype), requires_grad=True, dtype=dtype),
            hidden_channels=h,
            mode=mode,
        )

    @property
    def in_channels(self) -> int:
        return self.W.shape[1]

    @property
    def spatial(self) -> tuple[int, ...]:
        return self.V.shape[2:]

    def gate(self, name: str) -> dict[str, np.ndarray]:
        """Views of the arrays belonging to gate ``name`` (one of i, f, c, o)."""
        k = GATES.index(name)
        h = self.hidden_channels
        sl = slice(k * h, (k + 1) * h)
        out = {"W": self.W.data[sl], "U": self.U.data[sl]}
        if self.bias is not None:
            out["b"] = self.bias.data[sl]
        if name in PEEPHOLE_GATES:
            out["V"] = self.V.data[PEEPHOLE_GATES.index(name)]
        return out

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("W", self.W), ("U", self.U), ("V", self.V)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def input_transform(self, x: Tensor) -> Tensor:
        """``W * x + b`` for all four gates at once."""
        return conv3d(x, ConvParams(self.W, self.bias))


def _chan(t: Tensor, k: int, h: int) -> Tensor:
    """Channel block ``k`` of width ``h`` (channel axis = ndim - 4)."""
    idx = (slice(None),) * (t.ndim - 4) + (slice(k * h, (k + 1) * h),)
    return t[idx]


def cell_step(cell: ConvLSTMCell, x_t: Tensor, state: ConvLSTMState,
              x_transformed: Tensor | None = None) -> ConvLSTMState:
    """Advance one time step.

    ``x_transformed`` may carry a precomputed ``cell.input_transform(x_t)``
    (sequence_forward batches that over time); ``x_t`` is then only used for
    shape checks.
    """
    g = cell_gates(cell, x_t, state, x_transformed)
    return ConvLSTMState(g["h"], g["c"])


def cell_gates(cell: ConvLSTMCell, x_t: Tensor, state: ConvLSTMState,
               x_transformed: Tensor | None = None) -> dict[str, Tensor]:
    """Like :func:`cell_step` but returns every gate activation too."""
    h_prev, c_prev = state
    hc = cell.hidden_channels
    ch_axis = x_t.ndim - 4
    if h_prev.shape != c_prev.shape:
        raise ShapeError(f"hidden {h_prev.shape} and cell {c_prev.shape} shapes differ")
    if x_t.shape[ch_axis] != cell.in_channels:
        raise ShapeError(f"input has {x_t.shape[ch_axis]} channels, cell expects {cell.in_channels}",
                         axis="channel")
    if h_prev.shape[ch_axis] != hc:
        raise ShapeError(f"state has {h_prev.shape[ch_axis]} channels, cell has {hc}", axis="channel")
    for name, a, b, v in zip("xyz", x_t.shape[ch_axis + 1:], h_prev.shape[ch_axis + 1:], cell.spatial):
        if not a == b == v:
            raise ShapeError(f"spatial extents differ: input {a}, state {b}, peephole {v}", axis=name)

    act = sigmoid if cell.mode == "literal" else tanh
    gx = cell.input_transform(x_t) if x_transformed is None else x_transformed
    pre = add(gx, conv3d(h_prev, ConvParams(cell.U)))
    v_i, v_f, v_o = cell.V[0], cell.V[1], cell.V[2]

    i = sigmoid(add(_chan(pre, 0, hc), mul(v_i, c_prev)))
    f = sigmoid(add(_chan(pre, 1, hc), mul(v_f, c_prev)))
    c = add(mul(f, c_prev), mul(i, act(_chan(pre, 2, hc))))
    o = sigmoid(add(_chan(pre, 3, hc), mul(v_o, c)))
    h = mul(o, act(c))
    return {"i": i, "f": f, "o": o, "c": c, "h": h}


def layer_forward(cell: ConvLSTMCell, xs: Sequence[Tensor]) -> list[Tensor]:
    """Run one layer over ``xs`` with ``h0 = c0 = xs[0]``; return every hidden."""
    xs = list(xs)
    if not xs:
        raise ValueError("sequence must contain at least one frame")
    ch_axis = xs[0].ndim - 4
    if xs[0].shape[ch_axis] != cell.hidden_channels:
        raise ShapeError(
            f"the initial hidden and cell states are copied from the first frame, so its channel "
            f"count ({xs[0].shape[ch_axis]}) must equal hidden_channels ({cell.hidden_channels})",
            axis="channel")
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeError(f"all frames must share a shape: {xs[0].shape} vs {x.shape}")

    batched = xs[0].ndim == 5
    n = xs[0].shape[0] if batched else 1
    # one convolution for the input path of every frame
    joined = concat(xs, axis=0) if batched else concat([x[None] for x in xs], axis=0)
    gx_all = cell.input_transform(joined)

    state = ConvLSTMState(xs[0], xs[0])
    hs = []
    for t, x in enumerate(xs):
        gx = gx_all[t * n:(t + 1) * n] if batched else gx_all[t]
        state = cell_step(cell, x, state, x_transformed=gx)
        hs.append(state.h)
    return hs


def sequence_forward(stack: Sequence[ConvLSTMCell], xs: Sequence[Tensor]) -> Tensor:
    """Final hidden state of the top layer after reading ``xs`` in order.

    Layer 1 starts from ``h0 = c0 = xs[0]`` and also consumes ``xs[0]`` as its
    first input.  Each higher layer reads the hidden outputs of the layer
    below and starts from the first of them.
    """
    if not stack:
        raise ValueError("empty ConvLSTM stack")
    seq = list(xs)
    for cell in stack:
        seq = layer_forward(cell, seq)
    return seq[-1]
