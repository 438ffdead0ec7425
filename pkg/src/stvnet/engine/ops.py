"""Layer primitives on top of :mod:`stvnet.engine.tensor`.

Volumes are laid out as ``(channel, x, y, z)`` with an optional leading batch
axis; every op accepts both 4-D and 5-D input and treats axis ``ndim - 4`` as
the channel axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor, as_tensor, concat, default_dtype, record

_AXES = ("x", "y", "z")


@dataclass
class ConvParams:
    """Kernel ``(out_ch, in_ch, kx, ky, kz)`` and optional bias ``(out_ch,)``.

    For :func:`conv_transpose3d` the kernel is read the other way round: the
    input has ``kernel.shape[0]`` channels and the output ``kernel.shape[1]``.
    """

    kernel: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.kernel.ndim != 5:
            raise ShapeError(f"kernel must be 5-D (out, in, kx, ky, kz), got {self.kernel.shape}")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"batch-norm epsilon must be positive, got {self.eps}")

    @classmethod
    def identity(cls, channels: int, dtype=None, **kw) -> "BatchNormParams":
        dtype = np.dtype(dtype or default_dtype())
        return cls(
            gamma=Tensor(np.ones(channels, dtype), requires_grad=True, dtype=dtype),
            beta=Tensor(np.zeros(channels, dtype), requires_grad=True, dtype=dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 5:
        return x.data, False
    if x.ndim == 4:
        return x.data[None], True
    raise ShapeError(f"expected (C, X, Y, Z) or (N, C, X, Y, Z), got shape {x.shape}")


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (tuple, list)):
        return tuple(int(i) for i in v)
    return (int(v),) * 3


def _im2col(xp: np.ndarray, ksize, stride: int, out_sp) -> np.ndarray:
    n, c = xp.shape[:2]
    kx, ky, kz = ksize
    ox, oy, oz = out_sp
    if ksize == (1, 1, 1) and stride == 1 and xp.shape[2:] == tuple(out_sp):
        return xp.reshape(n, c, -1)
    cols = np.empty((n, c, kx, ky, kz, ox, oy, oz), dtype=xp.dtype)
    s = stride
    for a in range(kx):
        for b in range(ky):
            for d in range(kz):
                cols[:, :, a, b, d] = xp[:, :, a:a + s * (ox - 1) + 1:s,
                                         b:b + s * (oy - 1) + 1:s,
                                         d:d + s * (oz - 1) + 1:s]
    return cols.reshape(n, c * kx * ky * kz, ox * oy * oz)


def _col2im(dcols: np.ndarray, padded_shape, ksize, stride: int, out_sp) -> np.ndarray:
    """Scatter-add the inverse of :func:`_im2col` into a zero padded array."""
    n, c = padded_shape[:2]
    kx, ky, kz = ksize
    ox, oy, oz = out_sp
    if ksize == (1, 1, 1) and stride == 1 and tuple(padded_shape[2:]) == tuple(out_sp):
        return dcols.reshape(padded_shape)
    dcols = dcols.reshape(n, c, kx, ky, kz, ox, oy, oz)
    out = np.zeros(padded_shape, dtype=dcols.dtype)
    s = stride
    for a in range(kx):
        for b in range(ky):
            for d in range(kz):
                out[:, :, a:a + s * (ox - 1) + 1:s,
                    b:b + s * (oy - 1) + 1:s,
                    d:d + s * (oz - 1) + 1:s] += dcols[:, :, a, b, d]
    return out


def _pad(x: np.ndarray, pad) -> np.ndarray:
    if not any(pad):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))


def _crop(x: np.ndarray, pad, spatial) -> np.ndarray:
    if not any(pad):
        return x
    return x[:, :, pad[0]:pad[0] + spatial[0], pad[1]:pad[1] + spatial[1], pad[2]:pad[2] + spatial[2]]


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _flat_geometry(padded_sp, ksize):
    """Stride-1 correlation on the flattened padded grid.

    Output voxel (i, j, l) is anchored at flat index ``i*Yp*Zp + j*Zp + l`` of
    the padded volume, and kernel tap (a, b, c) reads the anchor shifted by
    ``a*Yp*Zp + b*Zp + c``.  Every tap is then one contiguous slice of length
    ``L`` (anchors past the valid region are computed and discarded).
    """
    xp_, yp, zp = padded_sp
    out = (xp_ - ksize[0] + 1, yp - ksize[1] + 1, zp - ksize[2] + 1)
    length = (out[0] - 1) * yp * zp + (out[1] - 1) * zp + out[2]
    shifts = [a * yp * zp + b * zp + c
              for a in range(ksize[0]) for b in range(ksize[1]) for c in range(ksize[2])]
    return out, length, shifts


def _flat_cols(xp: np.ndarray, shifts, length: int) -> np.ndarray:
    n, c = xp.shape[:2]
    flat = xp.reshape(n, c, -1)
    if len(shifts) == 1:
        return flat[:, :, shifts[0]:shifts[0] + length]
    cols = np.empty((n, c, len(shifts), length), dtype=xp.dtype)
    for k, s in enumerate(shifts):
        cols[:, :, k] = flat[:, :, s:s + length]
    return cols.reshape(n, c * len(shifts), length)


def _anchors_to_grid(ya: np.ndarray, out_sp, padded_sp) -> np.ndarray:
    """(N, O, L) anchor values -> (N, O, X, Y, Z) valid outputs."""
    n, o, length = ya.shape
    yp, zp = padded_sp[1], padded_sp[2]
    if (yp, zp) == tuple(out_sp[1:]) and length == out_sp[0] * yp * zp:
        return np.ascontiguousarray(ya).reshape((n, o) + tuple(out_sp))
    full = np.zeros((n, o, out_sp[0] * yp * zp), dtype=ya.dtype)
    full[:, :, :length] = ya
    full = full.reshape(n, o, out_sp[0], yp, zp)
    return np.ascontiguousarray(full[:, :, :, :out_sp[1], :out_sp[2]])


def _grid_to_anchors(g: np.ndarray, padded_sp, length: int) -> np.ndarray:
    n, o = g.shape[:2]
    yp, zp = padded_sp[1], padded_sp[2]
    if (yp, zp) == g.shape[3:]:
        return g.reshape(n, o, -1)[:, :, :length]
    full = np.zeros((n, o, g.shape[2], yp, zp), dtype=g.dtype)
    full[:, :, :, :g.shape[3], :g.shape[4]] = g
    return full.reshape(n, o, -1)[:, :, :length]


def _flat_scatter(dcols: np.ndarray, padded_shape, shifts, length: int) -> np.ndarray:
    """Adjoint of :func:`_flat_cols`: add each tap's slice back in place."""
    n, c = padded_shape[:2]
    out = np.zeros((n, c, int(np.prod(padded_shape[2:]))), dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, len(shifts), length)
    for k, s in enumerate(shifts):
        out[:, :, s:s + length] += dcols[:, :, k]
    return out.reshape(padded_shape)


def _correlate_s1(xp: np.ndarray, wmat: np.ndarray, ksize):
    """Stride-1 valid correlation of padded ``xp`` with ``wmat`` (O, C*K).

    Returns the output grid, the column matrix and the anchor length.
    """
    out_sp, length, shifts = _flat_geometry(xp.shape[2:], ksize)
    cols = _flat_cols(xp, shifts, length)
    # (L x K) @ (K x O) runs far better in BLAS than (O x K) @ (K x L) for small O
    ya = np.matmul(cols.transpose(0, 2, 1), wmat.T).transpose(0, 2, 1)
    return _anchors_to_grid(ya, out_sp, xp.shape[2:]), cols, length


def conv3d(x: Tensor, params: ConvParams, stride: int = 1, padding="same") -> Tensor:
    """3-D cross-correlation with zero padding.

    ``padding="same"`` pads each side by ``k // 2`` so that stride-1 output
    extents equal the input's; this needs odd kernel extents.
    """
    x = as_tensor(x)
    xd, squeeze = _batched(x)
    w = params.kernel
    out_ch, in_ch = w.shape[:2]
    ksize = w.shape[2:]
    if xd.shape[1] != in_ch:
        raise ShapeError(f"conv3d input has {xd.shape[1]} channels, kernel expects {in_ch}", axis="channel")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        for name, k in zip(_AXES, ksize):
            if k % 2 == 0:
                raise ShapeError(f"'same' padding needs odd kernel extents, got {ksize}", axis=name)
        pad = tuple(k // 2 for k in ksize)
    else:
        pad = _triple(padding)
    spatial = xd.shape[2:]
    out_sp = []
    for name, n, k, p in zip(_AXES, spatial, ksize, pad):
        o = (n + 2 * p - k) // stride + 1
        if o < 1:
            raise ShapeError(f"kernel extent {k} exceeds padded input extent {n + 2 * p}", axis=name)
        out_sp.append(o)
    out_sp = tuple(out_sp)
    xp = _pad(xd, pad)
    padded_shape = xp.shape
    wmat = w.data.reshape(out_ch, -1)
    nb = xd.shape[0]
    if stride == 1:
        y, cols, length = _correlate_s1(xp, wmat, ksize)
    else:
        cols = _im2col(xp, ksize, stride, out_sp)
        y = np.matmul(wmat, cols).reshape((nb, out_ch) + out_sp)
    bias = params.bias
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1, 1)
    if squeeze:
        y = y[0]

    def bw(g):
        g = g[None] if squeeze else g
        if stride == 1:
            gmat = _grid_to_anchors(g, padded_shape[2:], length)
        else:
            gmat = g.reshape(nb, out_ch, -1)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat)
            if stride == 1:
                gxp = _flat_scatter(dcols, padded_shape, _flat_geometry(padded_shape[2:], ksize)[2], length)
            else:
                gxp = _col2im(dcols, padded_shape, ksize, stride, out_sp)
            gx = _crop(gxp, pad, spatial)
            if squeeze:
                gx = gx[0]
        if w.requires_grad:
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    inputs = (x, w) + ((bias,) if bias is not None else ())
    return record("conv3d", inputs, y, lambda g: bw(g)[:len(inputs)])


def conv_transpose3d(x: Tensor, params: ConvParams, stride: int = 2, padding=0,
                     output_size=None) -> Tensor:
    """Transposed convolution: the adjoint of :func:`conv3d` with the same kernel.

    The kernel has shape ``(in_ch, out_ch, kx, ky, kz)`` from this op's point
    of view.  Output extent per axis is ``(n - 1) * stride - 2 * padding + k``
    unless ``output_size`` asks for up to ``stride - 1`` more.
    """
    x = as_tensor(x)
    xd, squeeze = _batched(x)
    w = params.kernel
    in_ch, out_ch = w.shape[:2]
    ksize = w.shape[2:]
    if xd.shape[1] != in_ch:
        raise ShapeError(f"conv_transpose3d input has {xd.shape[1]} channels, kernel expects {in_ch}",
                         axis="channel")
    pad = _triple(padding)
    in_sp = xd.shape[2:]
    base = [(n - 1) * stride - 2 * p + k for n, k, p in zip(in_sp, ksize, pad)]
    if output_size is None:
        out_sp = base
    else:
        out_sp = list(_triple(output_size))
        for name, o, b in zip(_AXES, out_sp, base):
            if not b <= o < b + stride:
                raise ShapeError(f"output extent {o} unreachable (valid {b}..{b + stride - 1})", axis=name)
    padded_shape = (xd.shape[0], out_ch) + tuple(o + 2 * p for o, p in zip(out_sp, pad))
    wmat = w.data.reshape(in_ch, -1)
    xmat = xd.reshape(xd.shape[0], in_ch, -1)
    y = _crop(_col2im(np.matmul(wmat.T, xmat), padded_shape, ksize, stride, in_sp), pad, out_sp)
    bias = params.bias
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1, 1)
    elif any(pad):
        y = np.ascontiguousarray(y)
    if squeeze:
        y = y[0]

    def bw(g):
        g = g[None] if squeeze else g
        cols = _im2col(_pad(g, pad), ksize, stride, in_sp)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wmat, cols).reshape(xd.shape)
            if squeeze:
                gx = gx[0]
        if w.requires_grad:
            gw = np.matmul(xmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    inputs = (x, w) + ((bias,) if bias is not None else ())
    return record("conv_transpose3d", inputs, y, lambda g: bw(g)[:len(inputs)])


# --------------------------------------------------------------------------
# pooling, normalization, activations
# --------------------------------------------------------------------------

def max_pool3d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling without padding.  Ties go to the first voxel in the
    window's x-major linear order; the gradient follows the same choice."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    xd, squeeze = _batched(x)
    out_sp = []
    for name, n in zip(_AXES, xd.shape[2:]):
        if n < window or (n - window) % stride:
            raise ShapeError(
                f"extent {n} cannot be tiled by window {window} / stride {stride}; "
                f"choose an input shape divisible by {stride}", axis=name)
        out_sp.append((n - window) // stride + 1)
    ox, oy, oz = out_sp
    s = stride
    best = None
    arg = np.zeros((xd.shape[0], xd.shape[1], ox, oy, oz), dtype=np.int16)
    k = 0
    offsets = []
    for a in range(window):
        for b in range(window):
            for d in range(window):
                v = xd[:, :, a:a + s * (ox - 1) + 1:s, b:b + s * (oy - 1) + 1:s, d:d + s * (oz - 1) + 1:s]
                if best is None:
                    best = v.copy()
                else:
                    better = v > best
                    best[better] = v[better]
                    arg[better] = k
                offsets.append((a, b, d))
                k += 1
    y = best[0] if squeeze else best
    shape = xd.shape

    def bw(g):
        g = g[None] if squeeze else g
        gx = np.zeros(shape, dtype=g.dtype)
        for k, (a, b, d) in enumerate(offsets):
            gx[:, :, a:a + s * (ox - 1) + 1:s, b:b + s * (oy - 1) + 1:s, d:d + s * (oz - 1) + 1:s] += \
                np.where(arg == k, g, 0)
        return (gx[0] if squeeze else gx,)

    return record("max_pool3d", (x,), y, bw)


def batch_norm3d(x: Tensor, params: BatchNormParams, training: bool) -> Tensor:
    """Per-channel normalization over batch and spatial positions jointly.

    Training mode normalizes by the batch statistics (biased variance) and
    updates the running estimates in place; eval mode uses the running ones.
    """
    x = as_tensor(x)
    xd, squeeze = _batched(x)
    c = xd.shape[1]
    if params.gamma.shape != (c,):
        raise ShapeError(f"batch-norm has {params.gamma.shape[0]} channels, input {c}", axis="channel")
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    gamma = params.gamma.data.reshape(bshape)
    beta = params.beta.data.reshape(bshape)
    if training:
        m = xd.size // c
        if m < 2:
            raise ShapeError("training-mode batch norm needs at least 2 values per channel", axis="batch")
        mean = xd.mean(axis=axes, keepdims=True)
        centered = xd - mean
        var = np.mean(centered * centered, axis=axes, keepdims=True)
        mom = params.momentum
        params.running_mean *= 1 - mom
        params.running_mean += mom * mean.reshape(c).astype(params.running_mean.dtype)
        params.running_var *= 1 - mom
        params.running_var += mom * (var.reshape(c) * m / (m - 1)).astype(params.running_var.dtype)
    else:
        m = None
        centered = xd - params.running_mean.astype(xd.dtype).reshape(bshape)
        var = params.running_var.astype(xd.dtype).reshape(bshape)
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = centered * inv_std
    y = gamma * xhat + beta
    if squeeze:
        y = y[0]

    def bw(g):
        g = g[None] if squeeze else g
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g * gamma
            if training:
                gx = inv_std * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = dxhat * inv_std
            if squeeze:
                gx = gx[0]
        return gx, ggamma, gbeta

    return record("batch_norm3d", (x, params.gamma, params.beta), y, bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # maximum keeps NaN, so corrupt inputs surface in the loss
    return record("relu", (x,), np.maximum(x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return record("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return record("tanh", (x,), t, lambda g: (g * (1 - t * t),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim < 4:
        raise ShapeError(f"cannot concatenate shapes {a.shape} and {b.shape}")
    axis = a.ndim - 4
    if a.shape[:axis] != b.shape[:axis]:
        raise ShapeError(f"batch extents differ: {a.shape} vs {b.shape}", axis="batch")
    for name, n, m in zip(_AXES, a.shape[axis + 1:], b.shape[axis + 1:]):
        if n != m:
            raise ShapeError(f"spatial extents differ: {a.shape} vs {b.shape}", axis=name)
    return concat([a, b], axis=axis)
