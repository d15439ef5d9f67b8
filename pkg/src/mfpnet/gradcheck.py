"""Central-difference gradient checks for every differentiable operator.

Each case builds a small random float64 instance (extents <= 8) and reduces the
operator output with fixed random weights, so gradients are O(1) and no
component is trivially zero.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import bica, nn
from .tensor import GradCheckReport, Tensor, grad_check, tsum
from .trainer import loss


@dataclass
class Case:
    fn: Callable[[dict[str, Tensor]], Tensor]
    params: dict[str, np.ndarray]


def _away_from_zero(rng, shape, lo=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, shape)


def _case(op, params, rng) -> "Case":
    """Reduce ``op`` with weights drawn now, so each case is fixed at build time."""
    probe = op({k: Tensor(v) for k, v in params.items()})
    weights = Tensor(rng.normal(size=probe.shape))
    return Case(lambda p: tsum(op(p) * weights), params)


def _conv_case(rng, stride=1, dilation=1, k=3, padding="same"):
    params = {"x": rng.normal(size=(2, 3, 7, 7)), "w": rng.normal(size=(4, 3, k, k)) * 0.5,
              "b": rng.normal(size=4)}
    return _case(lambda p: nn.conv2d(p["x"], p["w"], p["b"], stride=stride, dilation=dilation,
                                     padding=padding), params, rng)


def _bica_params(rng, channels: int, rows: int) -> dict[str, np.ndarray]:
    out = {}
    for name, (shape, fan_in) in bica.bica_param_shapes(channels, rows).items():
        if fan_in == -1:
            out[name] = 1.0 + 0.2 * rng.normal(size=shape)
        else:
            out[name] = rng.normal(size=shape) * (0.5 if fan_in == 0 else 1.0 / np.sqrt(fan_in))
    return out


def _flow_inputs(rng, C=4, H=6):
    return {"O": rng.normal(size=(1, C, H, H)), "Q": rng.normal(size=(1, C, H, H))}


def build_cases(seed: int = 0) -> dict[str, Case]:
    rng = np.random.default_rng(seed)
    cases = {
        "conv2d": _conv_case(rng),
        "conv2d_dilated": _conv_case(rng, dilation=2),
        "conv2d_strided": _conv_case(rng, stride=2),
        "conv2d_strided_dilated_5x5": _conv_case(rng, stride=2, dilation=2, k=5),
        "conv2d_valid": _conv_case(rng, padding=0),
    }
    x = lambda *shape: rng.normal(size=shape)  # noqa: E731
    cases["group_norm"] = _case(lambda p: nn.group_norm(p["x"], p["g"], p["b"], groups=2),
                                {"x": x(2, 4, 5, 5), "g": x(4), "b": x(4)}, rng)
    cases["relu"] = _case(lambda p: nn.relu(p["x"]), {"x": _away_from_zero(rng, (2, 3, 4, 4))}, rng)
    cases["sigmoid"] = _case(lambda p: nn.sigmoid(p["x"]), {"x": x(2, 3, 4, 4)}, rng)
    cases["softmax"] = _case(lambda p: nn.softmax(p["x"], 1), {"x": x(2, 5, 3, 3)}, rng)
    cases["log_softmax"] = _case(lambda p: nn.log_softmax(p["x"], 1), {"x": x(2, 5, 3, 3)}, rng)
    cases["upsample_bilinear"] = _case(lambda p: nn.upsample_bilinear(p["x"], 2), {"x": x(2, 2, 4, 4)}, rng)
    cases["block_mean"] = _case(lambda p: nn.block_mean(p["x"], 2, 4), {"x": x(2, 3, 8, 8)}, rng)
    cases["max_pool2d"] = _case(lambda p: nn.max_pool2d(p["x"], 2), {"x": x(2, 2, 6, 6)}, rng)
    cases["mul_channels"] = _case(lambda p: nn.mul_channels(p["x"], p["m"]),
                                  {"x": x(2, 3, 4, 4), "m": x(2, 3)}, rng)
    cases["sample_bilinear_normalized"] = _case(
        lambda p: nn.sample_bilinear_normalized(p["x"], p["c"]),
        {"x": x(2, 2, 5, 5), "c": rng.uniform(-0.95, 0.95, (2, 4, 4, 2))}, rng)

    fp = {**_flow_inputs(rng), **_bica_params(rng, 4, 9)}
    cases["flow_estimate"] = _case(lambda p: bica.flow_estimate(p["O"], p["Q"], p), fp, rng)
    ca = {**_flow_inputs(rng), **{k: v for k, v in _bica_params(rng, 4, 9).items() if k.startswith("ca.")}}
    cases["channel_attention"] = _case(lambda p: bica.channel_attention(p["O"], p["Q"], p, block=2), ca, rng)
    cases["channel_attention_identity"] = _case(
        lambda p: bica.channel_attention(p["O"], p["Q"], p, block=2, mask_activation="identity"),
        {k: v.copy() for k, v in ca.items()}, rng)
    cases["flow_warp"] = _case(lambda p: bica.flow_warp(p["O"], p["F"]),
                               {"O": x(1, 3, 6, 6), "F": rng.uniform(-0.15, 0.15, (1, 6, 6, 2))}, rng)
    bp = {**_flow_inputs(rng), **_bica_params(rng, 4, 9)}
    cases["bica_fuse"] = _case(lambda p: bica.bica_fuse(p["O"], p["Q"], p, block=2), bp, rng)

    labels = rng.integers(0, 6, size=(2, 4, 4))
    cases["loss"] = Case(lambda p: loss(p["z"], labels), {"z": rng.normal(size=(2, 6, 4, 4))})
    return cases


@dataclass
class SuiteResult:
    reports: dict[str, GradCheckReport]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports.values())

    def lines(self) -> list[str]:
        out = []
        for name, r in self.reports.items():
            worst = max(r.max_rel_error.values()) if r.max_rel_error else float("nan")
            status = "PASS" if r.passed else "FAIL"
            extra = f" ({r.fault})" if r.fault else ""
            out.append(f"{status} {name:32s} max rel err {worst:.2e}{extra}")
        return out


def run_suite(seed: int = 0, eps: float = 1e-6, tol: float = 1e-4, only: str | None = None) -> SuiteResult:
    t0 = time.perf_counter()
    reports = {}
    for name, case in build_cases(seed).items():
        if only and only not in name:
            continue
        reports[name] = grad_check(case.fn, case.params, eps=eps, tol=tol)
    return SuiteResult(reports, time.perf_counter() - t0)
