"""Dense volumetric array operations.

Arrays are plain ``numpy.ndarray`` objects in (N, C, D, H, W) order, row-major
with width varying fastest. Every function returns a fresh array and never
writes to its inputs. Functions come in forward/backward pairs; the autograd
layer wires them into the tape.

Random numbers come from numpy's Philox-4x64 counter-based bit generator with
the Ziggurat normal sampler, which produces the same stream on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

SQRT_2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when array extents are incompatible with an operation."""


def _check_shape(shape: Sequence[int]) -> Tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"all extents must be positive, got {shape}")
    return shape


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what}: input contains NaN or Inf")


def generator(seed: int) -> np.random.Generator:
    """Philox-4x64 generator keyed by ``seed`` (any 64-bit value)."""
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))


def zeros(shape: Sequence[int], dtype=np.float64) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=dtype)


def randn(shape: Sequence[int], seed: int, stddev: float = 1.0, dtype=np.float64) -> np.ndarray:
    shape = _check_shape(shape)
    return (generator(seed).standard_normal(shape) * stddev).astype(dtype)


@dataclass
class LinearWeights:
    """Per-voxel affine map ``out = weight @ in + bias`` over channels."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be (out, in), got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


# ---------------------------------------------------------------------------
# pointwise linear (1x1x1 convolution)


def _channels_first_2d(a):
    """(N, C, ...) -> contiguous (C, N * voxels)."""
    return np.ascontiguousarray(np.moveaxis(a, 1, 0)).reshape(a.shape[1], -1)


def _from_channels_first(m, like_shape, c):
    shape = (c, like_shape[0]) + tuple(like_shape[2:])
    return np.ascontiguousarray(np.moveaxis(m.reshape(shape), 0, 1))


# np.einsum over these layouts was seen to round differently from one process
# to the next on identical inputs; a plain 2-D matmul on contiguous copies is
# bit-stable, which the determinism guarantee of training relies on.


def pointwise_linear(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    out = _from_channels_first(weight @ _channels_first_2d(x), x.shape, weight.shape[0])
    if bias is not None:
        out = out + bias.reshape((1, -1) + (1,) * (x.ndim - 2))
    return out


def pointwise_linear_backward(gy, x, weight, need_x=True):
    g2 = _channels_first_2d(gy)
    gx = _from_channels_first(weight.T @ g2, gy.shape, weight.shape[1]) if need_x else None
    gw = g2 @ _channels_first_2d(x).T
    gb = gy.sum(axis=tuple(i for i in range(gy.ndim) if i != 1))
    return gx, gw, gb


# ---------------------------------------------------------------------------
# channel layer norm


def layer_norm_channels(x, gamma, beta, eps=1e-6):
    """Normalize each voxel's channel vector, then scale by gamma and shift by beta."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    _check_finite(x, "layer_norm_channels")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gamma.reshape(bshape) + beta.reshape(bshape), (xhat, inv_std)


def layer_norm_channels_backward(gy, saved, gamma, need_x=True):
    xhat, inv_std = saved
    axes = tuple(i for i in range(gy.ndim) if i != 1)
    ggamma = (gy * xhat).sum(axis=axes)
    gbeta = gy.sum(axis=axes)
    gx = None
    if need_x:
        dxhat = gy * gamma.reshape((1, -1) + (1,) * (gy.ndim - 2))
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        gx = inv_std * (dxhat - m1 - xhat * m2)
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# activations and heads


def gelu(x):
    _check_finite(x, "gelu")
    return 0.5 * x * (1.0 + erf(x / SQRT_2))


def gelu_backward(gy, x):
    cdf = 0.5 * (1.0 + erf(x / SQRT_2))
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)


def softmax_channels(x):
    _check_finite(x, "softmax_channels")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(gy, y):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def argmax_channels(x) -> np.ndarray:
    """Label volume (N, D, H, W); ties resolve to the lowest channel."""
    return np.argmax(x, axis=1)


# ---------------------------------------------------------------------------
# convolution


def _triple(v) -> Tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    return tuple(int(t) for t in v)


def conv_output_shape(spatial, kernel, stride, padding):
    return tuple((s + 2 * p - k) // st + 1 for s, k, st, p in zip(spatial, kernel, stride, padding))


def _pad(x, padding):
    if not any(padding):
        return x
    pd, ph, pw = padding
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _tap_slices(k, out_shape, stride):
    a, b, c = k
    return (
        slice(a, a + stride[0] * (out_shape[0] - 1) + 1, stride[0]),
        slice(b, b + stride[1] * (out_shape[1] - 1) + 1, stride[1]),
        slice(c, c + stride[2] * (out_shape[2] - 1) + 1, stride[2]),
    )


def _taps(kernel):
    return [(a, b, c) for a in range(kernel[0]) for b in range(kernel[1]) for c in range(kernel[2])]


def _validate_conv(x, weight, groups):
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and weight, got {x.shape} and {weight.shape}")
    cin, cout = x.shape[1], weight.shape[0]
    if cin % groups or cout % groups:
        raise ShapeError(f"groups={groups} must divide channels in={cin}, out={cout}")
    if weight.shape[1] != cin // groups:
        raise ShapeError(f"weight expects {weight.shape[1]} channels per group, input provides {cin // groups}")


def _is_depthwise(x, weight, groups):
    return groups == x.shape[1] == weight.shape[0] and weight.shape[1] == 1


def conv3d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Zero-padded 3-D cross-correlation.

    ``weight`` is (C_out, C_in // groups, kd, kh, kw). The depthwise case
    (groups == C_in == C_out) accumulates taps one at a time in depth-major
    order and adds the bias last; the deformable kernel follows the same order,
    so the two agree bit-for-bit at zero offsets.
    """
    _validate_conv(x, weight, groups)
    stride, padding = _triple(stride), _triple(padding)
    kernel = weight.shape[2:]
    out_sp = conv_output_shape(x.shape[2:], kernel, stride, padding)
    if any(s <= 0 for s in out_sp):
        raise ShapeError(f"kernel {kernel} does not fit input {x.shape[2:]} with padding {padding}")
    xp = _pad(x, padding)
    n = x.shape[0]
    if _is_depthwise(x, weight, groups):
        out = np.zeros((n, x.shape[1]) + out_sp, dtype=np.result_type(x, weight))
        wflat = weight.reshape(weight.shape[0], -1)
        for k, tap in enumerate(_taps(kernel)):
            sl = _tap_slices(tap, out_sp, stride)
            out += wflat[:, k].reshape(1, -1, 1, 1, 1) * xp[:, :, sl[0], sl[1], sl[2]]
    else:
        out = _conv_im2col(xp, weight, out_sp, stride, groups)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1, 1)
    return out


def _windows(xp, kernel, stride, out_sp):
    # (N, C, Do, Ho, Wo, kd, kh, kw) view
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    return win[:, :, :: stride[0], :: stride[1], :: stride[2]][:, :, : out_sp[0], : out_sp[1], : out_sp[2]]


def _columns(win, g, cpg):
    # (N*Do*Ho*Wo, cpg*kd*kh*kw) for group g
    sub = win[:, g * cpg : (g + 1) * cpg]
    n, _, d, h, w = sub.shape[:5]
    return np.ascontiguousarray(sub.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(n * d * h * w, -1)


def _conv_im2col(xp, weight, out_sp, stride, groups):
    kernel = weight.shape[2:]
    n, cin = xp.shape[:2]
    cout = weight.shape[0]
    cpg, opg = cin // groups, cout // groups
    win = _windows(xp, kernel, stride, out_sp)
    out = np.empty((n,) + out_sp + (cout,), dtype=np.result_type(xp, weight))
    for g in range(groups):
        cols = _columns(win, g, cpg)
        wg = weight[g * opg : (g + 1) * opg].reshape(opg, -1)
        out[..., g * opg : (g + 1) * opg] = (cols @ wg.T).reshape((n,) + out_sp + (opg,))
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def conv3d_backward(gy, x, weight, stride=1, padding=0, groups=1, need_x=True, need_w=True):
    """Gradients of ``conv3d`` with respect to input, weight and bias."""
    stride, padding = _triple(stride), _triple(padding)
    kernel = weight.shape[2:]
    out_sp = gy.shape[2:]
    gb = gy.sum(axis=(0, 2, 3, 4))
    gx = gw = None
    if need_w:
        xp = _pad(x, padding)
        if _is_depthwise(x, weight, groups):
            gw = np.empty(weight.shape[:1] + (len(_taps(kernel)),), dtype=gy.dtype)
            for k, tap in enumerate(_taps(kernel)):
                sl = _tap_slices(tap, out_sp, stride)
                gw[:, k] = (gy * xp[:, :, sl[0], sl[1], sl[2]]).sum(axis=(0, 2, 3, 4))
            gw = gw.reshape(weight.shape)
        else:
            gw = _conv_weight_grad(gy, xp, weight.shape, stride, groups)
    if need_x:
        gx = conv3d_backward_input(gy, weight, x.shape, stride, padding, groups)
    return gx, gw, gb


def _conv_weight_grad(gy, xp, wshape, stride, groups):
    cout, cpg = wshape[:2]
    kernel = wshape[2:]
    opg = cout // groups
    out_sp = gy.shape[2:]
    win = _windows(xp, kernel, stride, out_sp)
    gw = np.empty(wshape, dtype=gy.dtype)
    gyt = gy.transpose(0, 2, 3, 4, 1)
    for g in range(groups):
        cols = _columns(win, g, cpg)
        gyg = np.ascontiguousarray(gyt[..., g * opg : (g + 1) * opg]).reshape(-1, opg)
        gw[g * opg : (g + 1) * opg] = (gyg.T @ cols).reshape((opg, cpg) + tuple(kernel))
    return gw


def conv3d_backward_input(gy, weight, x_shape, stride=1, padding=0, groups=1):
    """Adjoint of ``conv3d`` with respect to its input (col2im scatter)."""
    stride, padding = _triple(stride), _triple(padding)
    kernel = weight.shape[2:]
    n, cin = x_shape[:2]
    cout = weight.shape[0]
    cpg, opg = cin // groups, cout // groups
    out_sp = gy.shape[2:]
    padded = tuple(s + 2 * p for s, p in zip(x_shape[2:], padding))
    gxp = np.zeros((n, cin) + padded, dtype=np.result_type(gy, weight))
    taps = _taps(kernel)
    if groups == cin == cout and cpg == 1:
        wflat = weight.reshape(cout, -1)
        for k, tap in enumerate(taps):
            sl = _tap_slices(tap, out_sp, stride)
            gxp[:, :, sl[0], sl[1], sl[2]] += wflat[:, k].reshape(1, -1, 1, 1, 1) * gy
    else:
        gyt = gy.transpose(0, 2, 3, 4, 1)
        for g in range(groups):
            gyg = np.ascontiguousarray(gyt[..., g * opg : (g + 1) * opg]).reshape(-1, opg)
            wg = weight[g * opg : (g + 1) * opg].reshape(opg, -1)
            cols = (gyg @ wg).reshape((n,) + out_sp + (cpg, len(taps)))
            cols = cols.transpose(5, 0, 4, 1, 2, 3)
            for k, tap in enumerate(taps):
                sl = _tap_slices(tap, out_sp, stride)
                gxp[:, g * cpg : (g + 1) * cpg, sl[0], sl[1], sl[2]] += cols[k]
    pd, ph, pw = padding
    return np.ascontiguousarray(gxp[:, :, pd : pd + x_shape[2], ph : ph + x_shape[3], pw : pw + x_shape[4]])


def transposed_conv3d(x, weight, bias=None, stride=2):
    """Transposed convolution without padding; ``weight`` is (C_in, C_out, kd, kh, kw).

    Output extents are ``(s - 1) * stride + k`` per axis. This is exactly the
    input-adjoint of ``conv3d`` with the same weight and stride.
    """
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"transposed_conv3d: input {x.shape} incompatible with weight {weight.shape}")
    stride = _triple(stride)
    kernel = weight.shape[2:]
    out_sp = tuple((s - 1) * st + k for s, st, k in zip(x.shape[2:], stride, kernel))
    out = conv3d_backward_input(x, weight, (x.shape[0], weight.shape[1]) + out_sp, stride, 0, 1)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1, 1)
    return out


def transposed_conv3d_backward(gy, x, weight, stride=2, need_x=True):
    stride = _triple(stride)
    gb = gy.sum(axis=(0, 2, 3, 4))
    gx = conv3d(gy, weight, stride=stride) if need_x else None
    gw = _conv_weight_grad(x, gy, weight.shape, stride, 1)
    return gx, gw, gb
