"""Bidirectional cross-attention (BiCA) at a skip junction.

Two calibrations share the inputs ``O`` (pyramid/encoder feature) and ``Q``
(decoder feature), both (B, C, H, W):

* channel attention: block means of O and Q are stacked into rows, a learned
  1x1 weighting maps the rows of each channel to one scale, and Q is scaled;
* flow attention: a two-channel offset field is estimated from O and Q and O
  is bilinearly warped by it.

The junction output is ``warp(O) + scale * Q``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError
from .tensor import Tensor, add, clamp, concat, linear, reshape, transpose

MASK_ACTIVATIONS = ("sigmoid", "identity")


@dataclass(frozen=True)
class SemanticDomainConfig:
    """Block size (square) used by the channel attention at each decoder level."""

    blocks: Mapping[int, int]

    @classmethod
    def for_depth(cls, levels: int) -> "SemanticDomainConfig":
        # deepest junction uses 1x1 blocks, doubling toward full resolution, capped at 8x8
        return cls({t: min(8, 2 ** (levels - 1 - t)) for t in range(1, levels)})

    def block(self, level: int) -> int:
        return self.blocks[level]

    def rows(self, level: int, extent: int) -> int:
        b = self.blocks[level]
        if extent % b:
            raise ShapeError(f"level {level}: extent {extent} not divisible by block {b}")
        return (extent // b) ** 2


def _same_shape(O: Tensor, Q: Tensor) -> None:
    if O.shape != Q.shape or O.ndim != 4:
        raise ShapeError(f"BiCA inputs must share a (B, C, H, W) shape, got {O.shape} and {Q.shape}")


def semantic_domain(X: Tensor, block_h: int, block_w: int | None = None) -> Tensor:
    """Block means flattened to (B, rows, C), rows = (H/block_h) * (W/block_w)."""
    block_w = block_h if block_w is None else block_w
    B, C = X.shape[:2]
    S = nn.block_mean(X, block_h, block_w)
    rows = S.shape[2] * S.shape[3]
    return transpose(reshape(S, (B, C, rows)), (0, 2, 1))


def stacked_domain(O: Tensor, Q: Tensor, block: int) -> Tensor:
    """Rows of O followed by rows of Q: (B, 2 * rows, C)."""
    _same_shape(O, Q)
    return concat([semantic_domain(O, block), semantic_domain(Q, block)], axis=1)


def channel_mask(O: Tensor, Q: Tensor, params: Mapping[str, Tensor], block: int,
                 mask_activation: str = "sigmoid") -> Tensor:
    gm = stacked_domain(O, Q, block)                       # (B, 2R, C)
    B, R2, C = gm.shape
    w, b = params["ca.w"], params["ca.b"]
    if w.shape != (R2, 1):
        raise ShapeError(f"channel weights {w.shape} do not match {R2} stacked rows")
    pre = reshape(linear(transpose(gm, (0, 2, 1)), w, b), (B, C))
    if mask_activation == "sigmoid":
        return nn.sigmoid(pre)
    if mask_activation == "identity":
        return pre
    raise ConfigError(f"unknown mask activation {mask_activation!r}")


def channel_attention(O: Tensor, Q: Tensor, params: Mapping[str, Tensor], block: int,
                      mask_activation: str = "sigmoid") -> Tensor:
    return nn.mul_channels(Q, channel_mask(O, Q, params, block, mask_activation))


def _conv(x, params, name, **kw):
    return nn.conv2d(x, params[name + ".w"], params.get(name + ".b"), **kw)


def _flow_branch(x, params, name):
    h = _conv(x, params, name + ".conv1")
    groups = np.gcd(8, h.shape[1])
    h = nn.relu(nn.group_norm(h, params[name + ".gn.g"], params[name + ".gn.b"], groups))
    return _conv(h, params, name + ".conv2")


def pixel_to_normalized(H: int, W: int) -> np.ndarray:
    """Per-axis factors turning a one-pixel offset into grid units."""
    return np.array([2.0 / max(H - 1, 1), 2.0 / max(W - 1, 1)])


def flow_estimate(O: Tensor, Q: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Offset field (B, H, W, 2) ordered (vertical, horizontal), before clamping.

    The convolutions predict offsets in pixels, converted here to grid units.
    Predicting grid units directly lets one update move samples by half the
    map, which saturates the clamp early in training and never recovers.
    """
    _same_shape(O, Q)
    z = concat([_conv(O, params, "flow.reduce_o"), _conv(Q, params, "flow.reduce_q")], axis=1)
    f = add(_flow_branch(z, params, "flow.k3"), _flow_branch(z, params, "flow.k5"))
    B, _, H, W = f.shape
    unit = np.broadcast_to(pixel_to_normalized(H, W).astype(f.dtype), (B, 2))
    return transpose(nn.mul_channels(f, Tensor(unit)), (0, 2, 3, 1))


def flow_warp(O: Tensor, flow: Tensor) -> Tensor:
    B, C, H, W = O.shape
    if flow.shape != (B, H, W, 2):
        raise ShapeError(f"flow {flow.shape} not aligned with feature {O.shape}")
    grid = np.broadcast_to(nn.standard_grid(H, W, O.dtype), flow.shape).copy()
    coords = clamp(add(flow, Tensor(grid)), -1.0, 1.0)
    return nn.sample_bilinear_normalized(O, coords)


def bica_fuse(O: Tensor, Q: Tensor, params: Mapping[str, Tensor], block: int,
              mask_activation: str = "sigmoid") -> Tensor:
    """Warp the encoder feature, scale the decoder feature, sum point by point."""
    warped = flow_warp(O, flow_estimate(O, Q, params))
    return add(warped, channel_attention(O, Q, params, block, mask_activation))


def bica_param_shapes(channels: int, rows: int) -> dict[str, tuple[tuple[int, ...], int]]:
    """Parameter shapes with their fan-in; ``rows`` counts the rows of ONE source."""
    r = max(channels // 2, 1)
    m = 2 * r
    shapes = {
        "ca.w": ((2 * rows, 1), 2 * rows),
        "ca.b": ((1,), 0),
        "flow.reduce_o.w": ((r, channels, 1, 1), channels),
        "flow.reduce_o.b": ((r,), 0),
        "flow.reduce_q.w": ((r, channels, 1, 1), channels),
        "flow.reduce_q.b": ((r,), 0),
    }
    for k in (3, 5):
        name = f"flow.k{k}"
        shapes[f"{name}.conv1.w"] = ((m, 2 * r, k, k), 2 * r * k * k)
        shapes[f"{name}.gn.g"] = ((m,), -1)
        shapes[f"{name}.gn.b"] = ((m,), 0)
        shapes[f"{name}.conv2.w"] = ((2, m, k, k), 0)
        shapes[f"{name}.conv2.b"] = ((2,), 0)
    return shapes
