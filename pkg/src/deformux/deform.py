"""Volumetric deformable convolution with tri-planar offsets.

For every output voxel ``v0`` and kernel tap ``vk`` the input is sampled at
``v0 + vk + offset(v0, k)`` by trilinear interpolation; lattice points outside
the volume read as zero. The depthwise operator gives each channel its own
``K`` weights; the standard operator projects across the channels of a group.
One offset field of ``3K`` channels per call is shared by every channel.

Offset channel layout (``OFFSET_LAYOUT``): ``[0, K)`` displace along height,
``[K, 2K)`` along width and ``[2K, 3K)`` along depth, in voxel units. Taps are
enumerated depth-major, then height, then width, from ``(-1, -1, -1)`` to
``(1, 1, 1)`` for the 3x3x3 kernel.

At integer sample positions the cell is chosen with ``floor``, so position
gradients are the right-hand derivative of the interpolant.

Two implementations share one contract: ``*_naive`` functions are loop-by-loop
transcriptions used as the oracle, the default path is a numba-parallel kernel
that computes each tap's eight corner indices and weights once per voxel and
reuses them for all channels. Every output element and gradient entry is owned
by one loop iteration with a fixed summation order, so results do not depend
on the thread count.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numba
import numpy as np
from numba import njit, prange

from .tensor import ShapeError

OFFSET_LAYOUT = "height,width,depth"

# Work-partition sizes. Fixed constants (not derived from the thread count)
# keep the summation order identical for any number of threads.
VOXEL_BLOCK = 256
GROUP_BLOCK = 4
CHANNEL_BLOCK = 16

# Set to True to route every call through the naive loops.
USE_NAIVE = False


@dataclass(frozen=True)
class SamplingGrid:
    kernel: Tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self):
        if any(k not in (1, 3) for k in self.kernel):
            raise ValueError(f"deformable kernel extents must be 1 or 3, got {self.kernel}")

    @property
    def K(self) -> int:
        kd, kh, kw = self.kernel
        return kd * kh * kw

    @property
    def taps(self):
        kd, kh, kw = self.kernel
        return [(a - kd // 2, b - kh // 2, c - kw // 2)
                for a in range(kd) for b in range(kh) for c in range(kw)]


@dataclass(frozen=True)
class PlaneMask:
    """Which displacement axes are active.

    Plane names use x = width, y = height, z = depth, so ``"x-y"`` keeps the
    in-slice displacements and zeroes the depth axis.
    """

    height: bool = True
    width: bool = True
    depth: bool = True

    def __post_init__(self):
        if not (self.height or self.width or self.depth):
            raise ValueError("at least one offset axis must be active")

    @classmethod
    def from_name(cls, name: str) -> "PlaneMask":
        try:
            return _PLANES[name]
        except KeyError:
            raise ValueError(f"unknown plane {name!r}; expected one of {sorted(_PLANES)}") from None

    @property
    def name(self) -> str:
        for k, v in _PLANES.items():
            if v == self:
                return k
        return "+".join(a for a in ("height", "width", "depth") if getattr(self, a))


_PLANES = {
    "tri-planar": PlaneMask(True, True, True),
    "x-y": PlaneMask(height=True, width=True, depth=False),
    "x-z": PlaneMask(height=False, width=True, depth=True),
    "y-z": PlaneMask(height=True, width=False, depth=True),
}

DEFAULT_GRID = SamplingGrid()
TRI_PLANAR = _PLANES["tri-planar"]


# ---------------------------------------------------------------------------
# scalar trilinear sampling (oracle building blocks)


def _sample_py(vol, pd, ph, pw):
    D, H, W = vol.shape
    d0 = math.floor(pd)
    h0 = math.floor(ph)
    w0 = math.floor(pw)
    fd = pd - d0
    fh = ph - h0
    fw = pw - w0
    val = 0.0
    for a in range(2):
        dd = int(d0) + a
        if dd < 0 or dd >= D:
            continue
        wd = fd if a == 1 else 1.0 - fd
        for b in range(2):
            hh = int(h0) + b
            if hh < 0 or hh >= H:
                continue
            wh = fh if b == 1 else 1.0 - fh
            for c in range(2):
                ww = int(w0) + c
                if ww < 0 or ww >= W:
                    continue
                wc = fw if c == 1 else 1.0 - fw
                val += wd * wh * wc * vol[dd, hh, ww]
    return val


def _sample_grad_py(vol, pd, ph, pw):
    """Value and its derivatives along (depth, height, width)."""
    D, H, W = vol.shape
    d0 = math.floor(pd)
    h0 = math.floor(ph)
    w0 = math.floor(pw)
    fd = pd - d0
    fh = ph - h0
    fw = pw - w0
    val = 0.0
    gd = 0.0
    gh = 0.0
    gw = 0.0
    for a in range(2):
        dd = int(d0) + a
        if dd < 0 or dd >= D:
            continue
        wd = fd if a == 1 else 1.0 - fd
        sd = 1.0 if a == 1 else -1.0
        for b in range(2):
            hh = int(h0) + b
            if hh < 0 or hh >= H:
                continue
            wh = fh if b == 1 else 1.0 - fh
            sh = 1.0 if b == 1 else -1.0
            for c in range(2):
                ww = int(w0) + c
                if ww < 0 or ww >= W:
                    continue
                wc = fw if c == 1 else 1.0 - fw
                sw = 1.0 if c == 1 else -1.0
                xv = vol[dd, hh, ww]
                val += wd * wh * wc * xv
                gd += sd * wh * wc * xv
                gh += wd * sh * wc * xv
                gw += wd * wh * sw * xv
    return val, gd, gh, gw


def _scatter_py(gvol, pd, ph, pw, coef):
    """Adjoint of sampling: distribute ``coef`` onto the in-bounds corners."""
    D, H, W = gvol.shape
    d0 = math.floor(pd)
    h0 = math.floor(ph)
    w0 = math.floor(pw)
    fd = pd - d0
    fh = ph - h0
    fw = pw - w0
    for a in range(2):
        dd = int(d0) + a
        if dd < 0 or dd >= D:
            continue
        wd = fd if a == 1 else 1.0 - fd
        for b in range(2):
            hh = int(h0) + b
            if hh < 0 or hh >= H:
                continue
            wh = fh if b == 1 else 1.0 - fh
            for c in range(2):
                ww = int(w0) + c
                if ww < 0 or ww >= W:
                    continue
                wc = fw if c == 1 else 1.0 - fw
                gvol[dd, hh, ww] += coef * wd * wh * wc


_sample = njit(cache=True)(_sample_py)
_sample_grad = njit(cache=True)(_sample_grad_py)
_scatter = njit(cache=True)(_scatter_py)


def trilinear_sample(volume: np.ndarray, position) -> float:
    """Sample a (D, H, W) volume at a fractional (d, h, w) position."""
    volume = np.asarray(volume)
    if volume.ndim != 3 or volume.size == 0:
        raise ShapeError(f"expected a non-empty (D, H, W) volume, got shape {volume.shape}")
    pd, ph, pw = (float(p) for p in position)
    if not all(math.isfinite(p) for p in (pd, ph, pw)):
        raise ValueError(f"sample position must be finite, got {position}")
    return float(_sample(np.ascontiguousarray(volume, dtype=np.float64), pd, ph, pw))


# ---------------------------------------------------------------------------
# naive oracle: direct loops over (n, o, d, h, w, k, ci)


def _naive_fwd_py(x, w, off, bias, has_bias, kd, kh, kw, md, mh, mw, groups, out):
    N, Cin, D, H, W = x.shape
    Cout, cpg, K = w.shape
    opg = Cout // groups
    for n in range(N):
        for o in range(Cout):
            g = o // opg
            for d in range(D):
                for h in range(H):
                    for ww in range(W):
                        y = 0.0
                        for k in range(K):
                            a = k // (kh * kw)
                            b = (k // kw) % kh
                            c = k % kw
                            pd = float(d + a - kd // 2)
                            ph = float(h + b - kh // 2)
                            pw = float(ww + c - kw // 2)
                            if mh:
                                ph += off[n, k, d, h, ww]
                            if mw:
                                pw += off[n, K + k, d, h, ww]
                            if md:
                                pd += off[n, 2 * K + k, d, h, ww]
                            for ci in range(cpg):
                                y += w[o, ci, k] * _sample(x[n, g * cpg + ci], pd, ph, pw)
                        if has_bias:
                            y += bias[o]
                        out[n, o, d, h, ww] = y


def _naive_bwd_py(gy, x, w, off, kd, kh, kw, md, mh, mw, groups, gx, gw, goff):
    N, Cin, D, H, W = x.shape
    Cout, cpg, K = w.shape
    opg = Cout // groups
    for n in range(N):
        for o in range(Cout):
            g = o // opg
            for d in range(D):
                for h in range(H):
                    for ww in range(W):
                        gyv = gy[n, o, d, h, ww]
                        for k in range(K):
                            a = k // (kh * kw)
                            b = (k // kw) % kh
                            c = k % kw
                            pd = float(d + a - kd // 2)
                            ph = float(h + b - kh // 2)
                            pw = float(ww + c - kw // 2)
                            if mh:
                                ph += off[n, k, d, h, ww]
                            if mw:
                                pw += off[n, K + k, d, h, ww]
                            if md:
                                pd += off[n, 2 * K + k, d, h, ww]
                            for ci in range(cpg):
                                gc = g * cpg + ci
                                val, dd, dh, dw = _sample_grad(x[n, gc], pd, ph, pw)
                                gw[o, ci, k] += gyv * val
                                coef = gyv * w[o, ci, k]
                                _scatter(gx[n, gc], pd, ph, pw, coef)
                                if mh:
                                    goff[n, k, d, h, ww] += coef * dh
                                if mw:
                                    goff[n, K + k, d, h, ww] += coef * dw
                                if md:
                                    goff[n, 2 * K + k, d, h, ww] += coef * dd


_naive_fwd = njit(cache=True)(_naive_fwd_py)
_naive_bwd = njit(cache=True)(_naive_bwd_py)


# ---------------------------------------------------------------------------
# fast path


@njit(inline="always")
def _corners(pd, ph, pw, D, H, W, idx, wt, gd, gh, gw, with_grad):
    d0 = math.floor(pd)
    h0 = math.floor(ph)
    w0 = math.floor(pw)
    fd = pd - d0
    fh = ph - h0
    fw = pw - w0
    id0 = int(d0)
    ih0 = int(h0)
    iw0 = int(w0)
    j = 0
    for a in range(2):
        dd = id0 + a
        wd = fd if a == 1 else 1.0 - fd
        sd = 1.0 if a == 1 else -1.0
        okd = dd >= 0 and dd < D
        for b in range(2):
            hh = ih0 + b
            wh = fh if b == 1 else 1.0 - fh
            sh = 1.0 if b == 1 else -1.0
            okh = hh >= 0 and hh < H
            for c in range(2):
                ww = iw0 + c
                wc = fw if c == 1 else 1.0 - fw
                sw = 1.0 if c == 1 else -1.0
                if okd and okh and ww >= 0 and ww < W:
                    idx[j] = (dd * H + hh) * W + ww
                    wt[j] = wd * wh * wc
                    if with_grad:
                        gd[j] = sd * wh * wc
                        gh[j] = wd * sh * wc
                        gw[j] = wd * wh * sw
                else:
                    # Weight zero at a valid address: contributes exactly 0.
                    idx[j] = 0
                    wt[j] = 0.0
                    if with_grad:
                        gd[j] = 0.0
                        gh[j] = 0.0
                        gw[j] = 0.0
                j += 1


@njit(inline="always")
def _position(n, k, v, d, h, w, of, kd, kh, kw, K, md, mh, mw):
    a = k // (kh * kw)
    b = (k // kw) % kh
    c = k % kw
    pd = float(d + a - kd // 2)
    ph = float(h + b - kh // 2)
    pw = float(w + c - kw // 2)
    if mh:
        ph += of[n, k, v]
    if mw:
        pw += of[n, K + k, v]
    if md:
        pd += of[n, 2 * K + k, v]
    return pd, ph, pw


@njit(parallel=True, cache=True)
def _fast_fwd(x, w, off, bias, has_bias, kd, kh, kw, md, mh, mw, groups, out):
    N, Cin, D, H, W = x.shape
    Cout, cpg, K = w.shape
    opg = Cout // groups
    V = D * H * W
    HW = H * W
    xf = x.reshape(N, Cin, V)
    of = off.reshape(N, 3 * K, V)
    outf = out.reshape(N, Cout, V)
    nb = (V + VOXEL_BLOCK - 1) // VOXEL_BLOCK
    for job in prange(N * nb):
        n = job // nb
        v0 = (job % nb) * VOXEL_BLOCK
        v1 = min(V, v0 + VOXEL_BLOCK)
        idx = np.empty(8, np.int64)
        wt = np.empty(8, x.dtype)
        samp = np.empty(Cin, x.dtype)
        acc = np.empty(Cout, x.dtype)
        for v in range(v0, v1):
            d = v // HW
            h = (v - d * HW) // W
            ww = v - d * HW - h * W
            acc[:] = 0
            for k in range(K):
                pd, ph, pw = _position(n, k, v, d, h, ww, of, kd, kh, kw, K, md, mh, mw)
                _corners(pd, ph, pw, D, H, W, idx, wt, wt, wt, wt, False)
                for ci in range(Cin):
                    s = xf[n, ci, idx[0]] * wt[0]
                    for j in range(1, 8):
                        s += xf[n, ci, idx[j]] * wt[j]
                    samp[ci] = s
                for o in range(Cout):
                    base = (o // opg) * cpg
                    for ci in range(cpg):
                        acc[o] += w[o, ci, k] * samp[base + ci]
            for o in range(Cout):
                if has_bias:
                    outf[n, o, v] = acc[o] + bias[o]
                else:
                    outf[n, o, v] = acc[o]


@njit(parallel=True, cache=True)
def _fast_bwd_channels(gy, x, w, off, kd, kh, kw, md, mh, mw, groups, gx, gw):
    """Input and weight gradients; each job owns a block of groups."""
    N, Cin, D, H, W = x.shape
    Cout, cpg, K = w.shape
    opg = Cout // groups
    V = D * H * W
    HW = H * W
    xf = x.reshape(N, Cin, V)
    gxf = gx.reshape(N, Cin, V)
    gyf = gy.reshape(N, Cout, V)
    of = off.reshape(N, 3 * K, V)
    nblk = (groups + GROUP_BLOCK - 1) // GROUP_BLOCK
    for blk in prange(nblk):
        g0 = blk * GROUP_BLOCK
        g1 = min(groups, g0 + GROUP_BLOCK)
        idx = np.empty(8, np.int64)
        wt = np.empty(8, x.dtype)
        gwacc = np.zeros(((g1 - g0) * opg, cpg, K))
        for n in range(N):
            for v in range(V):
                d = v // HW
                h = (v - d * HW) // W
                ww = v - d * HW - h * W
                for k in range(K):
                    pd, ph, pw = _position(n, k, v, d, h, ww, of, kd, kh, kw, K, md, mh, mw)
                    _corners(pd, ph, pw, D, H, W, idx, wt, wt, wt, wt, False)
                    for g in range(g0, g1):
                        for ci in range(cpg):
                            gc = g * cpg + ci
                            s = xf[n, gc, idx[0]] * wt[0]
                            for j in range(1, 8):
                                s += xf[n, gc, idx[j]] * wt[j]
                            o = g * opg
                            gs = gyf[n, o, v] * w[o, ci, k]
                            gwacc[o - g0 * opg, ci, k] += gyf[n, o, v] * s
                            for o in range(g * opg + 1, (g + 1) * opg):
                                gs += gyf[n, o, v] * w[o, ci, k]
                                gwacc[o - g0 * opg, ci, k] += gyf[n, o, v] * s
                            for j in range(8):
                                gxf[n, gc, idx[j]] += gs * wt[j]
        for o in range(g0 * opg, g1 * opg):
            for ci in range(cpg):
                for k in range(K):
                    gw[o, ci, k] = gwacc[o - g0 * opg, ci, k]


@njit(parallel=True, cache=True)
def _fast_bwd_offsets(gy, x, w, off, kd, kh, kw, md, mh, mw, groups, goff):
    """Offset gradients; each job owns a block of voxels."""
    N, Cin, D, H, W = x.shape
    Cout, cpg, K = w.shape
    opg = Cout // groups
    V = D * H * W
    HW = H * W
    xf = x.reshape(N, Cin, V)
    gyf = gy.reshape(N, Cout, V)
    of = off.reshape(N, 3 * K, V)
    gof = goff.reshape(N, 3 * K, V)
    nb = (V + VOXEL_BLOCK - 1) // VOXEL_BLOCK
    for job in prange(N * nb):
        n = job // nb
        v0 = (job % nb) * VOXEL_BLOCK
        v1 = min(V, v0 + VOXEL_BLOCK)
        idx = np.empty(8, np.int64)
        wt = np.empty(8, x.dtype)
        cd = np.empty(8, x.dtype)
        ch = np.empty(8, x.dtype)
        cw = np.empty(8, x.dtype)
        for v in range(v0, v1):
            d = v // HW
            h = (v - d * HW) // W
            ww = v - d * HW - h * W
            for k in range(K):
                pd, ph, pw = _position(n, k, v, d, h, ww, of, kd, kh, kw, K, md, mh, mw)
                _corners(pd, ph, pw, D, H, W, idx, wt, cd, ch, cw, True)
                ad = 0.0
                ah = 0.0
                aw = 0.0
                for g in range(groups):
                    for ci in range(cpg):
                        gc = g * cpg + ci
                        gs = 0.0
                        for o in range(g * opg, (g + 1) * opg):
                            gs += gyf[n, o, v] * w[o, ci, k]
                        sd = 0.0
                        sh = 0.0
                        sw = 0.0
                        for j in range(8):
                            xv = xf[n, gc, idx[j]]
                            sd += cd[j] * xv
                            sh += ch[j] * xv
                            sw += cw[j] * xv
                        ad += gs * sd
                        ah += gs * sh
                        aw += gs * sw
                gof[n, k, v] = ah if mh else 0.0
                gof[n, K + k, v] = aw if mw else 0.0
                gof[n, 2 * K + k, v] = ad if md else 0.0


@njit(parallel=True, cache=True)
def _dw_fwd(xt, wt_k, off, bias, has_bias, kd, kh, kw, md, mh, mw, D, H, W, out):
    """Depthwise forward on channels-last data: ``xt`` is (N, V, C), ``wt_k`` is (K, C)."""
    N, V, C = xt.shape
    K = wt_k.shape[0]
    HW = H * W
    of = off.reshape(N, 3 * K, V)
    nb = (V + VOXEL_BLOCK - 1) // VOXEL_BLOCK
    for job in prange(N * nb):
        n = job // nb
        v0 = (job % nb) * VOXEL_BLOCK
        v1 = min(V, v0 + VOXEL_BLOCK)
        idx = np.empty(8, np.int64)
        wt = np.empty(8, xt.dtype)
        samp = np.empty(C, xt.dtype)
        acc = np.empty(C, xt.dtype)
        for v in range(v0, v1):
            d = v // HW
            h = (v - d * HW) // W
            ww = v - d * HW - h * W
            acc[:] = 0
            for k in range(K):
                pd, ph, pw = _position(n, k, v, d, h, ww, of, kd, kh, kw, K, md, mh, mw)
                _corners(pd, ph, pw, D, H, W, idx, wt, wt, wt, wt, False)
                i0 = idx[0]
                w0 = wt[0]
                for c in range(C):
                    samp[c] = xt[n, i0, c] * w0
                for j in range(1, 8):
                    ij = idx[j]
                    wj = wt[j]
                    for c in range(C):
                        samp[c] += xt[n, ij, c] * wj
                for c in range(C):
                    acc[c] += wt_k[k, c] * samp[c]
            for c in range(C):
                if has_bias:
                    out[n, v, c] = acc[c] + bias[c]
                else:
                    out[n, v, c] = acc[c]


@njit(parallel=True, cache=True)
def _dw_bwd(gyt, xt, wt_k, off, kd, kh, kw, md, mh, mw, D, H, W, gxt, gw, goff_part):
    """Depthwise backward on channels-last data, one job per channel block.

    Input and weight gradients are owned by the block; offset gradients are
    partial sums per block (``goff_part`` is (blocks, N, 3K, V)), reduced by
    the caller in block order.
    """
    N, V, C = xt.shape
    K = wt_k.shape[0]
    HW = H * W
    of = off.reshape(N, 3 * K, V)
    nblk = (C + CHANNEL_BLOCK - 1) // CHANNEL_BLOCK
    for blk in prange(nblk):
        c0 = blk * CHANNEL_BLOCK
        c1 = min(C, c0 + CHANNEL_BLOCK)
        nc = c1 - c0
        idx = np.empty(8, np.int64)
        wt = np.empty(8, xt.dtype)
        cd = np.empty(8, xt.dtype)
        ch = np.empty(8, xt.dtype)
        cw = np.empty(8, xt.dtype)
        s = np.empty(nc, xt.dtype)
        coef = np.empty(nc, xt.dtype)
        gwacc = np.zeros((K, nc))
        for n in range(N):
            for v in range(V):
                d = v // HW
                h = (v - d * HW) // W
                ww = v - d * HW - h * W
                for k in range(K):
                    pd, ph, pw = _position(n, k, v, d, h, ww, of, kd, kh, kw, K, md, mh, mw)
                    _corners(pd, ph, pw, D, H, W, idx, wt, cd, ch, cw, True)
                    for c in range(nc):
                        coef[c] = gyt[n, v, c0 + c] * wt_k[k, c0 + c]
                        s[c] = 0
                    # d(sum_c coef_c * sample_c)/d(pos) = sum_j dweight_j * (sum_c coef_c * x_jc)
                    ad = 0.0
                    ah = 0.0
                    aw = 0.0
                    for j in range(8):
                        ij = idx[j]
                        a0 = wt[j]
                        u = 0.0
                        for c in range(nc):
                            xv = xt[n, ij, c0 + c]
                            s[c] += a0 * xv
                            u += coef[c] * xv
                            gxt[n, ij, c0 + c] += coef[c] * a0
                        ad += cd[j] * u
                        ah += ch[j] * u
                        aw += cw[j] * u
                    for c in range(nc):
                        gwacc[k, c] += gyt[n, v, c0 + c] * s[c]
                    goff_part[blk, n, k, v] = ah if mh else 0.0
                    goff_part[blk, n, K + k, v] = aw if mw else 0.0
                    goff_part[blk, n, 2 * K + k, v] = ad if md else 0.0
        for k in range(K):
            for c in range(nc):
                gw[k, c0 + c] = gwacc[k, c]


# ---------------------------------------------------------------------------
# public API


def _prepare(x, weight, offsets, grid, depthwise):
    if x.ndim != 5:
        raise ShapeError(f"input must be (N, C, D, H, W), got {x.shape}")
    x = np.ascontiguousarray(x)
    K = grid.K
    if depthwise:
        if weight.shape[0] != x.shape[1] or weight.size != x.shape[1] * K:
            raise ShapeError(f"depthwise weight {weight.shape} does not match C={x.shape[1]}, K={K}")
        w3 = weight.reshape(x.shape[1], 1, K)
    else:
        if weight.ndim < 3 or int(np.prod(weight.shape[2:])) != K:
            raise ShapeError(f"standard weight {weight.shape} does not match K={K}")
        w3 = weight.reshape(weight.shape[0], weight.shape[1], K)
    expected = (x.shape[0], 3 * K) + x.shape[2:]
    if offsets.shape != expected:
        raise ShapeError(f"offsets have shape {offsets.shape}, expected {expected}")
    if not np.all(np.isfinite(offsets)):
        raise ValueError("offsets contain NaN or Inf")
    w3 = np.ascontiguousarray(w3, dtype=x.dtype)
    offsets = np.ascontiguousarray(offsets, dtype=np.float64)
    return x, w3, offsets


def _check_groups(cin, w3, groups):
    cout, cpg, _ = w3.shape
    if groups <= 0 or cin % groups or cout % groups or cin // groups != cpg:
        raise ShapeError(f"groups={groups} incompatible with C_in={cin}, weight {w3.shape}")


def _forward(x, w3, offsets, bias, groups, grid, mask, naive):
    out = np.empty((x.shape[0], w3.shape[0]) + x.shape[2:], dtype=x.dtype)
    has_bias = bias is not None
    b = np.ascontiguousarray(bias, dtype=x.dtype) if has_bias else np.zeros(w3.shape[0], dtype=x.dtype)
    kd, kh, kw = grid.kernel
    fn = _naive_fwd if (naive or USE_NAIVE) else _fast_fwd
    fn(x, w3, offsets, b, has_bias, kd, kh, kw, mask.depth, mask.height, mask.width, groups, out)
    return out


def _backward(grad_y, x, w3, offsets, groups, grid, mask, naive):
    grad_y = np.ascontiguousarray(grad_y, dtype=x.dtype)
    if grad_y.shape != (x.shape[0], w3.shape[0]) + x.shape[2:]:
        raise ShapeError(f"grad_y shape {grad_y.shape} does not match the forward output")
    kd, kh, kw = grid.kernel
    args = (kd, kh, kw, mask.depth, mask.height, mask.width, groups)
    gx = np.zeros_like(x)
    gw = np.zeros(w3.shape, dtype=x.dtype)
    goff = np.zeros(offsets.shape, dtype=x.dtype)
    if naive or USE_NAIVE:
        _naive_bwd(grad_y, x, w3, offsets, *args, gx, gw, goff)
    else:
        _fast_bwd_channels(grad_y, x, w3, offsets, *args, gx, gw)
        _fast_bwd_offsets(grad_y, x, w3, offsets, *args, goff)
    gb = grad_y.sum(axis=(0, 2, 3, 4))
    return gx, gw, goff, gb


def _channels_last(a):
    n, c = a.shape[:2]
    return np.ascontiguousarray(a.reshape(n, c, -1).transpose(0, 2, 1))


def _channels_first(a, spatial):
    n, _, c = a.shape
    return np.ascontiguousarray(a.transpose(0, 2, 1)).reshape((n, c) + spatial)


def ddc_forward(x, weight, offsets, bias=None, grid: SamplingGrid = DEFAULT_GRID,
                mask: PlaneMask = TRI_PLANAR, naive: bool = False) -> np.ndarray:
    """Depthwise deformable convolution, stride 1, same padding.

    ``weight`` is (C, K) (or any shape with C * K entries, e.g. (C, 1, 3, 3, 3)),
    ``offsets`` is (N, 3K, D, H, W).
    """
    x, w3, offsets = _prepare(x, weight, offsets, grid, depthwise=True)
    if naive or USE_NAIVE:
        return _forward(x, w3, offsets, bias, x.shape[1], grid, mask, True)
    spatial = x.shape[2:]
    xt = _channels_last(x)
    out = np.empty_like(xt)
    has_bias = bias is not None
    b = np.ascontiguousarray(bias, dtype=x.dtype) if has_bias else np.zeros(x.shape[1], dtype=x.dtype)
    kd, kh, kw = grid.kernel
    _dw_fwd(xt, np.ascontiguousarray(w3[:, 0, :].T), offsets, b, has_bias, kd, kh, kw,
            mask.depth, mask.height, mask.width, *spatial, out)
    return _channels_first(out, spatial)


def ddc_forward_naive(x, weight, offsets, bias=None, grid=DEFAULT_GRID, mask=TRI_PLANAR):
    return ddc_forward(x, weight, offsets, bias, grid, mask, naive=True)


def ddc_backward(grad_y, x, weight, offsets, grid=DEFAULT_GRID, mask=TRI_PLANAR, naive=False):
    """Returns ``(grad_x, grad_weight, grad_offsets, grad_bias)``; grad_weight has ``weight``'s shape."""
    x, w3, offsets = _prepare(x, weight, offsets, grid, depthwise=True)
    if naive or USE_NAIVE:
        gx, gw, goff, gb = _backward(grad_y, x, w3, offsets, x.shape[1], grid, mask, True)
        return gx, gw.reshape(np.shape(weight)), goff, gb
    if grad_y.shape != x.shape:
        raise ShapeError(f"grad_y shape {grad_y.shape} does not match the forward output {x.shape}")
    spatial = x.shape[2:]
    n, c = x.shape[:2]
    K = grid.K
    xt = _channels_last(x)
    gyt = _channels_last(np.asarray(grad_y, dtype=x.dtype))
    gxt = np.zeros_like(xt)
    gw = np.empty((K, c), dtype=x.dtype)
    nblk = -(-c // CHANNEL_BLOCK)
    part = np.empty((nblk, n, 3 * K, xt.shape[1]), dtype=x.dtype)
    kd, kh, kw = grid.kernel
    _dw_bwd(gyt, xt, np.ascontiguousarray(w3[:, 0, :].T), offsets, kd, kh, kw,
            mask.depth, mask.height, mask.width, *spatial, gxt, gw, part)
    goff = part[0]
    for b in range(1, nblk):
        goff = goff + part[b]
    gb = gyt.sum(axis=(0, 1))
    return (_channels_first(gxt, spatial), np.ascontiguousarray(gw.T).reshape(np.shape(weight)),
            goff.reshape((n, 3 * K) + spatial), gb)


def standard_deformable_forward(x, weight, offsets, bias=None, groups: int = 1,
                                grid: SamplingGrid = DEFAULT_GRID, mask: PlaneMask = TRI_PLANAR,
                                naive: bool = False) -> np.ndarray:
    """Grouped deformable convolution; ``weight`` is (C_out, C_in // groups, K) or (..., 3, 3, 3)."""
    x, w3, offsets = _prepare(x, weight, offsets, grid, depthwise=False)
    _check_groups(x.shape[1], w3, groups)
    return _forward(x, w3, offsets, bias, groups, grid, mask, naive)


def standard_deformable_forward_naive(x, weight, offsets, bias=None, groups=1, grid=DEFAULT_GRID,
                                      mask=TRI_PLANAR):
    return standard_deformable_forward(x, weight, offsets, bias, groups, grid, mask, naive=True)


def standard_deformable_backward(grad_y, x, weight, offsets, groups=1, grid=DEFAULT_GRID,
                                 mask=TRI_PLANAR, naive=False):
    x, w3, offsets = _prepare(x, weight, offsets, grid, depthwise=False)
    _check_groups(x.shape[1], w3, groups)
    gx, gw, goff, gb = _backward(grad_y, x, w3, offsets, groups, grid, mask, naive)
    return gx, gw.reshape(np.shape(weight)), goff, gb


def set_threads(n: int) -> None:
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def get_threads() -> int:
    return numba.get_num_threads()


def default_threads() -> int:
    """``DEFORMUX_THREADS`` if set, else the host core count."""
    return int(os.environ.get("DEFORMUX_THREADS", "0") or 0) or (os.cpu_count() or 1)


set_threads(default_threads())
