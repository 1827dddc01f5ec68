"""Modulated deformable convolution.

Each output position ``p`` and kernel tap ``k`` reads the input at
``p + p_k + offset_k(p)`` by bilinear interpolation (zero outside the
image), scales the sample by ``mask_k(p)``, and accumulates it against
the tap weight. Offsets are stored as ``[n, 2K, h, w]`` with channel
``2k`` holding the row shift and ``2k + 1`` the column shift of tap ``k``;
taps are enumerated row-major over the kernel window. One offset field is
shared by all input channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .numerics import (
    DTYPE,
    ConvParams,
    ShapeError,
    ConfigError,
    Tensor4,
    _result,
    _tracks,
    conv2d,
    leaky_relu,
    sigmoid,
    slice_channels,
)


def bilinear_sample(plane: np.ndarray, y: float, x: float) -> float:
    """Sample a 2-D plane at a fractional position with zero padding."""
    h, w = plane.shape
    y0 = int(np.floor(y))
    x0 = int(np.floor(x))
    fy = y - y0
    fx = x - x0
    total = 0.0
    for yy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * plane[yy, xx]
    return float(total)


def bilinear_sample_grid(plane: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Vectorised :func:`bilinear_sample` over arrays of coordinates."""
    h, w = plane.shape
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0 = y0.astype(np.intp)
    x0 = x0.astype(np.intp)
    out = np.zeros(np.broadcast(ys, xs).shape, dtype=DTYPE)
    for cy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for cx, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            valid = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
            vals = plane[np.where(valid, cy, 0), np.where(valid, cx, 0)]
            out += np.where(valid, wy * wx * vals, 0.0)
    return out


def kernel_grid(kh: int, kw: int) -> np.ndarray:
    """Fixed tap offsets ``p_k`` as a ``[K, 2]`` array of (dy, dx), row-major."""
    ry, rx = (kh - 1) // 2, (kw - 1) // 2
    dy, dx = np.meshgrid(np.arange(kh) - ry, np.arange(kw) - rx, indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=1).astype(DTYPE)


def sampling_positions(offsets: np.ndarray, kh: int, kw: int) -> tuple[np.ndarray, np.ndarray]:
    """Absolute sampling rows/cols ``[n, K, h, w]`` for an offset array."""
    n, _, h, w = offsets.shape
    grid = kernel_grid(kh, kw)
    K = grid.shape[0]
    off = offsets.reshape(n, K, 2, h, w)
    iy = np.arange(h, dtype=DTYPE)[:, None]
    ix = np.arange(w, dtype=DTYPE)[None, :]
    ys = iy + grid[:, 0][:, None, None] + off[:, :, 0]
    xs = ix + grid[:, 1][:, None, None] + off[:, :, 1]
    return ys, xs


def deform_conv2d(x: Tensor4, p: ConvParams, off: Tensor4, mask: Tensor4) -> Tensor4:
    n, c, h, w = x.shape
    kh, kw = p.kernel
    K = kh * kw
    if p.stride != 1 or kh % 2 == 0 or kw % 2 == 0 or p.padding != (kh - 1) // 2 or kh != kw:
        raise ConfigError("deform_conv2d supports stride 1 with 'same' padding on odd square kernels")
    if c != p.c_in:
        raise ShapeError(f"deform_conv2d: input has {c} channels, kernel expects {p.c_in}")
    if off.shape[1] != 2 * K or mask.shape[1] != K:
        raise ShapeError(
            f"deform_conv2d: {K} taps need offset channels {2 * K} and mask channels {K}, "
            f"got {off.shape[1]} and {mask.shape[1]}"
        )
    for t, what in ((off, "offset"), (mask, "mask")):
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"deform_conv2d: {what} extents {t.shape} do not match input {x.shape}")

    hw = h * w
    ys, xs = sampling_positions(off.data, kh, kw)
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = (ys - y0).reshape(n, K * hw)
    fx = (xs - x0).reshape(n, K * hw)
    y0 = y0.astype(np.intp).reshape(n, K * hw)
    x0 = x0.astype(np.intp).reshape(n, K * hw)

    # Per batch item, sampling is a sparse [hw, K*hw] matrix whose column
    # (k, q) holds the four bilinear corner weights. Out-of-image corners keep
    # a zero weight at row 0, so every column has exactly four entries.
    rows = np.empty((n, K * hw, 4), dtype=np.intp)
    wts = np.empty((n, K * hw, 4), dtype=DTYPE)
    dwy = np.empty((n, K * hw, 4), dtype=DTYPE)
    dwx = np.empty((n, K * hw, 4), dtype=DTYPE)
    j = 0
    for cy, wy, sy in ((y0, 1.0 - fy, -1.0), (y0 + 1, fy, 1.0)):
        for cx, wx, sx in ((x0, 1.0 - fx, -1.0), (x0 + 1, fx, 1.0)):
            valid = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
            rows[:, :, j] = np.where(valid, cy * w + cx, 0)
            wts[:, :, j] = np.where(valid, wy * wx, 0.0)
            dwy[:, :, j] = np.where(valid, sy * wx, 0.0)
            dwx[:, :, j] = np.where(valid, wy * sx, 0.0)
            j += 1
    indptr = np.arange(0, 4 * K * hw + 1, 4)

    def sampler(b, data):
        return sparse.csc_matrix((data[b].ravel(), rows[b].ravel(), indptr), shape=(hw, K * hw))

    samplers = [sampler(b, wts) for b in range(n)]
    xflat = x.data.reshape(n, c, hw)
    sampled = np.empty((n, c, K * hw), dtype=DTYPE)
    for b in range(n):
        sampled[b] = (samplers[b].T @ xflat[b].T).T
    sampled = sampled.reshape(n, c, K, hw)

    m = mask.data.reshape(n, 1, K, hw)
    cols = (sampled * m).reshape(n, c * K, hw)
    wmat = p.weight.data.reshape(p.c_out, c * K)
    out = np.matmul(wmat, cols).reshape(n, p.c_out, h, w) + p.bias.data

    weight, bias = p.weight, p.bias

    def backward(g):
        gm = g.reshape(n, p.c_out, hw)
        if _tracks(weight):
            gw = np.zeros_like(wmat)
            for b in range(n):
                gw += gm[b] @ cols[b].T
            weight._accumulate(gw.reshape(weight.shape))
        if _tracks(bias):
            bias._accumulate(g.sum(axis=(0, 2, 3)).reshape(bias.shape))
        dcols = np.matmul(wmat.T, gm).reshape(n, c, K, hw)
        if _tracks(mask):
            mask._accumulate(np.sum(dcols * sampled, axis=1).reshape(mask.shape))
        dsampled = (dcols * m).reshape(n, c, K * hw)
        if _tracks(x):
            dx = np.empty((n, c, hw), dtype=DTYPE)
            for b in range(n):
                dx[b] = (samplers[b] @ dsampled[b].T).T
            x._accumulate(dx.reshape(x.shape))
        if _tracks(off):
            doff = np.empty((n, K, 2, hw), dtype=DTYPE)
            for b in range(n):
                gy = (sampler(b, dwy).T @ xflat[b].T).T
                gx = (sampler(b, dwx).T @ xflat[b].T).T
                doff[b, :, 0] = np.sum(dsampled[b] * gy, axis=0).reshape(K, hw)
                doff[b, :, 1] = np.sum(dsampled[b] * gx, axis=0).reshape(K, hw)
            off._accumulate(doff.reshape(off.shape))

    return _result(np.ascontiguousarray(out), (x, weight, bias, off, mask), backward)


@dataclass
class OffsetPredictorParams:
    """Two 3x3 convs producing ``3K`` channels: raw offsets then mask logits."""

    conv1: ConvParams
    conv2: ConvParams
    taps: int

    def __post_init__(self):
        if self.conv2.c_out != 3 * self.taps:
            raise ShapeError(
                f"offset predictor must emit {3 * self.taps} channels, got {self.conv2.c_out}"
            )


def predict_offsets(features: Tensor4, params: OffsetPredictorParams,
                    slope: float = 0.1) -> tuple[Tensor4, Tensor4]:
    if features.shape[1] != params.conv1.c_in:
        raise ShapeError(
            f"offset predictor expects {params.conv1.c_in} input channels, "
            f"got {features.shape[1]}"
        )
    K = params.taps
    raw = conv2d(leaky_relu(conv2d(features, params.conv1), slope), params.conv2)
    off = slice_channels(raw, 0, 2 * K)
    mask = sigmoid(slice_channels(raw, 2 * K, 3 * K))
    return off, mask
