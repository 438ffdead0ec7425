"""V-Net, ST-Net and ST-VNet: gate windows in, last-gate probability map out.

All three share one naming scheme for their layers::

    enc0a enc0b | pool | enc1a enc1b | pool | enc2a enc2b
    up1 [+skip1] dec1a dec1b dec1c  up0 [+skip0] dec0a dec0b dec0c dec0d  head

``up*`` are stride-2 transposed convolutions in the pooled architectures and
plain 3x3x3 convolutions in ST-Net.  Every layer except ``head`` is followed
by batch norm and ReLU; ``head`` is a 1x1x1 convolution and a sigmoid.

In ST-VNet and ST-Net the full-resolution skip (``skip0``) is the top hidden
state of a 2-layer ConvLSTM run over the ``enc0b`` features of every gate in
the window.  Encoder weights are shared across gates; deeper encoder levels
only run on the last gate, whose features are the only ones they feed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .convlstm import MODES, ConvLSTMCell, sequence_forward
from .engine import (
    BatchNormParams,
    ConvParams,
    Tensor,
    batch_norm3d,
    concat_channels,
    conv3d,
    conv_transpose3d,
    max_pool3d,
    no_record,
    relu,
    sigmoid,
)
from .engine.tensor import default_dtype
from .errors import DimensionMismatchError, MalformedHeaderError, ShapeError, SpecError, TruncatedDataError

ARCHS = ("vnet", "stnet", "stvnet")
STRUCTURES = ("epi", "endo")
_STRUCTURE_ALIASES = {"epicardium": "epi", "endocardium": "endo"}


@dataclass(frozen=True)
class NetworkSpec:
    arch: str = "stvnet"
    base_channels: int = 8
    window_T: int = 2
    input_shape: tuple[int, int, int] = (32, 32, 12)
    structure: str = "epi"
    activation_mode: str = "literal"
    lstm_layers: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        object.__setattr__(self, "structure", _STRUCTURE_ALIASES.get(self.structure, self.structure))
        self.validate()

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise SpecError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.structure not in STRUCTURES:
            raise SpecError(f"structure must be one of {STRUCTURES}, got {self.structure!r}")
        if self.activation_mode not in MODES:
            raise SpecError(f"activation_mode must be one of {MODES}, got {self.activation_mode!r}")
        if self.window_T < 1:
            raise SpecError(f"window_T must be >= 1, got {self.window_T}")
        if self.arch == "vnet" and self.window_T != 1:
            raise SpecError(f"vnet reads a single gate; window_T must be 1, got {self.window_T}")
        if self.base_channels < 1:
            raise SpecError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.lstm_layers < 1:
            raise SpecError(f"lstm_layers must be >= 1, got {self.lstm_layers}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be three positive extents, got {self.input_shape}")
        if self.arch in ("vnet", "stvnet"):
            for name, n in zip("HWD", self.input_shape):
                if n % 4:
                    raise SpecError(f"{self.arch} pools twice; extent {name}={n} must be divisible by 4")

    @property
    def uses_lstm(self) -> bool:
        return self.arch != "vnet"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def layer_plan(spec: NetworkSpec) -> list[tuple[str, str, int, int, int]]:
    """``(name, kind, in_ch, out_ch, kernel)`` for every convolutional layer,
    in declaration order.  ``kind`` is ``conv``, ``transpose`` or ``head``."""
    c = spec.base_channels
    pooled = spec.arch != "stnet"
    up = "transpose" if pooled else "conv"
    up_k = 2 if pooled else 3
    skip1 = 2 * c if pooled else 0
    return [
        ("enc0a", "conv", 1, c, 3),
        ("enc0b", "conv", c, c, 3),
        ("enc1a", "conv", c, 2 * c, 3),
        ("enc1b", "conv", 2 * c, 2 * c, 3),
        ("enc2a", "conv", 2 * c, 4 * c, 3),
        ("enc2b", "conv", 4 * c, 4 * c, 3),
        ("up1", up, 4 * c, 2 * c, up_k),
        ("dec1a", "conv", 2 * c + skip1, 2 * c, 3),
        ("dec1b", "conv", 2 * c, 2 * c, 3),
        ("dec1c", "conv", 2 * c, 2 * c, 3),
        ("up0", up, 2 * c, c, up_k),
        ("dec0a", "conv", 2 * c, c, 3),
        ("dec0b", "conv", c, c, 3),
        ("dec0c", "conv", c, c, 3),
        ("dec0d", "conv", c, c, 3),
        ("head", "head", c, 1, 1),
    ]


@dataclass
class Network:
    spec: NetworkSpec
    seed: int
    convs: dict[str, ConvParams]
    norms: dict[str, BatchNormParams]
    lstm: list[ConvLSTMCell] = field(default_factory=list)
    epoch: int = 0

    # -- parameter traversal -------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable tensors in declaration order."""
        out = []
        for name, *_ in layer_plan(self.spec):
            p = self.convs[name]
            out.append((f"{name}.kernel", p.kernel))
            if p.bias is not None:
                out.append((f"{name}.bias", p.bias))
            if name in self.norms:
                out.append((f"{name}.bn.gamma", self.norms[name].gamma))
                out.append((f"{name}.bn.beta", self.norms[name].beta))
        for k, cell in enumerate(self.lstm):
            for pname, p in cell.parameters():
                out.append((f"lstm{k}.{pname}", p))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, *_ in layer_plan(self.spec):
            if name in self.norms:
                out.append((f"{name}.bn.running_mean", self.norms[name].running_mean))
                out.append((f"{name}.bn.running_var", self.norms[name].running_var))
        return out

    def state_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self.named_parameters():
            yield name, p.data
        yield from self.named_buffers()

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    @property
    def dtype(self) -> np.dtype:
        return self.convs["enc0a"].kernel.dtype

    # -- forward -------------------------------------------------------------

    def _block(self, name: str, x: Tensor, training: bool, transpose: bool = False) -> Tensor:
        p = self.convs[name]
        y = conv_transpose3d(x, p, stride=2) if transpose else conv3d(x, p)
        return relu(batch_norm3d(y, self.norms[name], training))

    def forward(self, windows, training: bool = False) -> Tensor:
        """``windows``: array ``(N, T, X, Y, Z)``.  Returns ``(N, 1, X, Y, Z)``."""
        spec = self.spec
        x = windows.data if isinstance(windows, Tensor) else np.asarray(windows)
        if x.ndim != 5:
            raise ShapeError(f"expected windows of shape (N, T, X, Y, Z), got {x.shape}")
        n, t = x.shape[:2]
        if t != spec.window_T:
            raise ShapeError(f"window holds {t} gates, network expects {spec.window_T}", axis="gate")
        for name, a, b in zip("xyz", x.shape[2:], spec.input_shape):
            if a != b:
                raise ShapeError(f"volume extent {a} differs from network input {b}", axis=name)
        # gate-major stacking so each gate is a contiguous batch slice
        frames = Tensor(np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4)).reshape(t * n, 1, *x.shape[2:]),
                        dtype=self.dtype)

        s0_all = self._block("enc0b", self._block("enc0a", frames, training), training)
        s0_last = s0_all[(t - 1) * n:] if t > 1 else s0_all
        pooled = spec.arch != "stnet"

        h = max_pool3d(s0_last, 2, 2) if pooled else s0_last
        s1 = self._block("enc1b", self._block("enc1a", h, training), training)
        h = max_pool3d(s1, 2, 2) if pooled else s1
        h = self._block("enc2b", self._block("enc2a", h, training), training)

        h = self._block("up1", h, training, transpose=pooled)
        if pooled:
            h = concat_channels(h, s1)
        for name in ("dec1a", "dec1b", "dec1c"):
            h = self._block(name, h, training)
        h = self._block("up0", h, training, transpose=pooled)

        if spec.uses_lstm:
            seq = [s0_all[k * n:(k + 1) * n] for k in range(t)] if t > 1 else [s0_all]
            skip0 = sequence_forward(self.lstm, seq)
        else:
            skip0 = s0_last
        h = concat_channels(h, skip0)
        for name in ("dec0a", "dec0b", "dec0c", "dec0d"):
            h = self._block(name, h, training)
        return sigmoid(conv3d(h, self.convs["head"]))

    __call__ = forward


def build(spec: NetworkSpec, seed: int = 0, dtype=None) -> Network:
    """Initialize a network deterministically from ``seed``.

    Kernels are drawn from U(-b, b) with ``b = 1/sqrt(fan_in)``; the head bias
    and batch-norm shifts start at zero, batch-norm scales at one.  Layers
    followed by batch norm carry no bias of their own.
    """
    spec.validate()
    dtype = np.dtype(dtype or default_dtype())
    rng = np.random.default_rng(seed)
    convs, norms = {}, {}
    for name, kind, cin, cout, k in layer_plan(spec):
        bound = 1.0 / np.sqrt(cin * k ** 3)
        shape = (cin, cout, k, k, k) if kind == "transpose" else (cout, cin, k, k, k)
        kernel = rng.uniform(-bound, bound, size=shape).astype(dtype)
        kernel = Tensor(kernel, requires_grad=True, name=f"{name}.kernel", dtype=dtype)
        if kind == "head":
            convs[name] = ConvParams(kernel, Tensor(np.zeros(cout, dtype), requires_grad=True,
                                                    name=f"{name}.bias", dtype=dtype))
        else:
            # batch norm subtracts the channel mean, so a conv bias here would be dead weight
            convs[name] = ConvParams(kernel)
            norms[name] = BatchNormParams.identity(cout, dtype=dtype)
    lstm = []
    if spec.uses_lstm:
        hidden = spec.base_channels
        for _ in range(spec.lstm_layers):
            lstm.append(ConvLSTMCell.create(hidden, hidden, spec.input_shape, rng,
                                            mode=spec.activation_mode, dtype=dtype))
    return Network(spec=spec, seed=seed, convs=convs, norms=norms, lstm=lstm)


def forward_segment(net: Network, window: Sequence[np.ndarray]) -> Tensor:
    """Eval-mode probability map ``(1, X, Y, Z)`` for the last gate of ``window``."""
    window = [np.asarray(v) for v in window]
    if len(window) != net.spec.window_T:
        raise ShapeError(f"window holds {len(window)} gates, network expects {net.spec.window_T}",
                         axis="gate")
    for v in window:
        if v.shape != net.spec.input_shape:
            raise ShapeError(f"volume shape {v.shape} differs from network input {net.spec.input_shape}")
    with no_record():
        out = net.forward(np.stack(window)[None], training=False)
    return Tensor(out.data[0], dtype=out.dtype)


def predict(net: Network, windows: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Eval-mode probabilities ``(N, X, Y, Z)`` for a stack of windows."""
    outs = []
    with no_record():
        for lo in range(0, len(windows), batch_size):
            outs.append(net.forward(windows[lo:lo + batch_size], training=False).data[:, 0])
    return np.concatenate(outs) if outs else np.zeros((0,) + net.spec.input_shape)


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """``prob >= threshold`` as uint8 (values exactly at the threshold map to 1)."""
    data = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return (data >= threshold).astype(np.uint8)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_MAGIC = b"STVNETCK"
_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}


def save_checkpoint(net: Network, path) -> None:
    """Header JSON then the raw little-endian arrays in declaration order.

    Layout: 8-byte magic, uint32 LE header length, UTF-8 JSON header, blob.
    Batch-norm running statistics follow the trainable parameters.
    """
    code = "f64le" if net.dtype == np.float64 else "f32le"
    arrays = list(net.state_arrays())
    header = {
        "format": 1,
        "spec": net.spec.to_dict(),
        "seed": net.seed,
        "epoch": net.epoch,
        "dtype": code,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())


def load_checkpoint(path) -> Network:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:8] != _MAGIC:
        raise MalformedHeaderError("not a checkpoint (bad magic)", path)
    (hlen,) = struct.unpack("<I", blob[8:12])
    if 12 + hlen > len(blob):
        raise TruncatedDataError("header runs past end of file", path)
    try:
        header = json.loads(blob[12:12 + hlen].decode())
        spec = NetworkSpec.from_dict(header["spec"])
        dtype = _DTYPES[header["dtype"]]
        entries = header["tensors"]
        seed, epoch = int(header["seed"]), int(header["epoch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"unreadable header ({exc})", path) from None

    net = build(spec, seed=seed, dtype=dtype.newbyteorder("="))
    net.epoch = epoch
    targets = list(net.state_arrays())
    if [e["name"] for e in entries] != [n for n, _ in targets]:
        raise DimensionMismatchError("tensor list does not match the network layout", path)
    offset = 12 + hlen
    for entry, (name, arr) in zip(entries, targets):
        if tuple(entry["shape"]) != arr.shape:
            raise DimensionMismatchError(f"{name}: stored shape {entry['shape']} vs expected {arr.shape}", path)
        nbytes = arr.size * dtype.itemsize
        if offset + nbytes > len(blob):
            raise TruncatedDataError(f"blob ends inside {name}", path)
        arr[...] = np.frombuffer(blob, dtype=dtype, count=arr.size, offset=offset).reshape(arr.shape)
        offset += nbytes
    if offset != len(blob):
        raise DimensionMismatchError(f"{len(blob) - offset} trailing bytes after the last tensor", path)
    return net
