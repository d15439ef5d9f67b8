"""Differentiable neural operators on (batch, channel, height, width) tensors."""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, record


def effective_extent(k: int, dilation: int) -> int:
    return (k - 1) * dilation + 1


def conv_output_extent(size: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (size + 2 * pad - effective_extent(k, dilation)) // stride + 1


def same_padding(k: int, dilation: int) -> int:
    """Zero padding that keeps H x W at stride 1 for an odd kernel."""
    return (effective_extent(k, dilation) - 1) // 2


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int | str = "same") -> Tensor:
    """2-D cross-correlation via one GEMM over gathered taps."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1:
        raise ConfigError("conv2d: stride and dilation must be positive")
    if padding == "same":
        ph, pw = same_padding(kh, dilation), same_padding(kw, dilation)
    else:
        ph = pw = int(padding)
    eh, ew = effective_extent(kh, dilation), effective_extent(kw, dilation)
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if eh > Hp or ew > Wp:
        raise ShapeError(f"conv2d: effective kernel {eh}x{ew} exceeds padded input {Hp}x{Wp}")
    Ho = (Hp - eh) // stride + 1
    Wo = (Wp - ew) // stride + 1
    xd = x.data
    if ph or pw:
        xp = np.zeros((B, C, Hp, Wp), dtype=xd.dtype)
        xp[:, :, ph:ph + H, pw:pw + W] = xd
    else:
        xp = xd

    def window(i, j):
        r0, c0 = i * dilation, j * dilation
        return (slice(None), slice(None),
                slice(r0, r0 + stride * (Ho - 1) + 1, stride),
                slice(c0, c0 + stride * (Wo - 1) + 1, stride))

    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[window(i, j)].transpose(1, 0, 2, 3)
    cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    w2 = weight.data.reshape(O, -1)
    out = (w2 @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    if bias is not None:
        if bias.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
        out = out + bias.data.reshape(1, O, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        dcols = (w2.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
        dxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[window(i, j)] += dcols[:, i, j].transpose(1, 0, 2, 3)
        gx = dxp[:, :, ph:ph + H, pw:pw + W]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, bw, "conv2d")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    B, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise ConfigError(f"group_norm: {C} channels not divisible into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: gamma/beta must have shape ({C},)")
    xd = x.data
    xg = xd.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = ((xg - mu) * inv).reshape(xd.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    n = xg.shape[2]

    def bw(g):
        axes = (0,) + tuple(range(2, x.ndim))
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = (g * gamma.data.reshape(bshape)).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        gx = inv / n * (n * gxhat - gxhat.sum(axis=2, keepdims=True)
                        - xh * (gxhat * xh).sum(axis=2, keepdims=True))
        return gx.reshape(xd.shape), ggamma, gbeta

    return record(out, (x, gamma, beta), bw, "group_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    out = out.astype(x.dtype, copy=False)
    return record(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), bw, "log_softmax")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind in ("softmax", "softmax-over-channels"):
        return softmax(x, axis=1)
    raise ConfigError(f"unknown activation {kind!r}")


def _bilinear_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """Rows interpolate one output sample from ``n_in`` inputs (half-pixel centers)."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - w)
    np.add.at(m, (np.arange(n_out), i1), w)
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ConfigError("upsample factor must be >= 1")
    if factor == 1:
        return x
    H, W = x.shape[-2:]
    ah = _bilinear_matrix(H, factor, x.dtype)
    aw = _bilinear_matrix(W, factor, x.dtype)
    out = ah @ x.data @ aw.T
    return record(out, (x,), lambda g: (ah.T @ g @ aw,), "upsample_bilinear")


def block_mean(x: Tensor, block_h: int, block_w: int) -> Tensor:
    B, C, H, W = x.shape
    if block_h < 1 or block_w < 1 or H % block_h or W % block_w:
        raise ShapeError(f"block_mean: {H}x{W} not divisible into {block_h}x{block_w} blocks")
    h, w = H // block_h, W // block_w
    out = x.data.reshape(B, C, h, block_h, w, block_w).mean(axis=(3, 5))
    area = block_h * block_w

    def bw(g):
        gx = np.broadcast_to((g / area)[:, :, :, None, :, None], (B, C, h, block_h, w, block_w))
        return (gx.reshape(B, C, H, W),)

    return record(out, (x,), bw, "block_mean")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError(f"max_pool2d: {H}x{W} not divisible by {size}")
    h, w = H // size, W // size
    blocks = x.data.reshape(B, C, h, size, w, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h, w, -1)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, h, w, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return record(out, (x,), bw, "max_pool2d")


def standard_grid(H: int, W: int, dtype=np.float64) -> np.ndarray:
    """Identity sampling coordinates, (H, W, 2) as (vertical, horizontal) in [-1, 1]."""
    ys = np.linspace(-1.0, 1.0, H) if H > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, W) if W > 1 else np.zeros(1)
    grid = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1)
    return grid.astype(dtype)


def _corners(pos: np.ndarray, n: int):
    i0 = np.clip(np.floor(pos), 0, max(n - 2, 0)).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, pos - i0


def sample_bilinear_normalized(x: Tensor, coords: Tensor) -> Tensor:
    """Bilinear lookup of ``x`` at normalized (vertical, horizontal) coordinates.

    -1 maps to the first pixel center and +1 to the last. Coordinates outside
    [-1, 1] are rejected; clamp before calling.
    """
    B, C, H, W = x.shape
    if coords.ndim != 4 or coords.shape[0] != B or coords.shape[-1] != 2:
        raise ShapeError(f"sample: coords shape {coords.shape} incompatible with input {x.shape}")
    cd = coords.data
    if not np.all(np.isfinite(cd)) or np.abs(cd).max(initial=0.0) > 1.0:
        raise ContractError("sample: coordinates must lie in [-1, 1]")
    Ho, Wo = cd.shape[1:3]
    sy, sx = (H - 1) / 2.0, (W - 1) / 2.0
    py = (cd[..., 0] + 1.0) * sy
    px = (cd[..., 1] + 1.0) * sx
    y0, y1, wy = _corners(py, H)
    x0, x1, wx = _corners(px, W)
    wy, wx = wy[:, None], wx[:, None]          # (B, 1, Ho, Wo)
    xd = x.data
    b = np.arange(B)[:, None, None]

    def gather(yy, xx):
        return xd[b, :, yy, xx].transpose(0, 3, 1, 2)   # (B, C, Ho, Wo)

    v00, v01, v10, v11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    w00, w01 = (1 - wy) * (1 - wx), (1 - wy) * wx
    w10, w11 = wy * (1 - wx), wy * wx
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bw(g):
        gx = np.zeros(B * C * H * W, dtype=np.float64)
        base = (np.arange(B)[:, None] * C + np.arange(C)[None, :]) * (H * W)   # (B, C)
        base = base[:, :, None, None]
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            flat = base + (yy * W + xx)[:, None]
            gx += np.bincount(flat.reshape(-1), weights=(g * ww).reshape(-1), minlength=gx.size)
        dpy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        dpx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        gc = np.stack([(g * dpy).sum(axis=1) * sy, (g * dpx).sum(axis=1) * sx], axis=-1)
        return gx.reshape(B, C, H, W).astype(xd.dtype), gc.astype(cd.dtype)

    return record(out.astype(xd.dtype, copy=False), (x, coords), bw, "sample_bilinear")


def mul_channels(x: Tensor, m: Tensor) -> Tensor:
    """Scale each (batch, channel) map of ``x`` by the matching entry of ``m`` (B, C)."""
    if m.shape != x.shape[:2]:
        raise ShapeError(f"mul_channels: mask {m.shape} does not match {x.shape[:2]}")
    md = m.data[:, :, None, None]
    xd = x.data
    return record(xd * md, (x, m), lambda g: (g * md, (g * xd).sum(axis=(2, 3))), "mul_channels")


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, shape).astype(dtype)
