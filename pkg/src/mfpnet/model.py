"""U-Net baselines and the multi-scale feature pyramid network (MFP-Net).

Variants
--------
``unet``      encoder/decoder, skip joined by channel concatenation
``unet-add``  same, skip joined by point-wise sum
``mfp1``      pyramid with one dilated reuse branch per source level (k = 0, 1)
``mfp2``      full pyramid, every admissible branch k = 0 .. n - i
``mfp-bica``  ``mfp2`` with bidirectional cross-attention at every skip junction

Pyramid bookkeeping: the encoder output at level i (C_i = C1 * 2**(i-1)
channels) feeds branches k = 0, 1, ...; branch k is a 3x3 convolution with
dilation and stride 2**k emitting C_i / 2 channels at the extent of level
i + k. Branches landing on one level are concatenated. The concatenation at
the deepest level replaces the last encoder stage as the decoder input, and
each shallower concatenation is summed onto the upsampled decoder state.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from . import bica, nn
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, add, concat

VARIANTS = ("unet", "unet-add", "mfp1", "mfp2", "mfp-bica")


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "mfp2"
    levels: int = 5
    base_channels: int = 16
    in_channels: int = 1
    classes: int = 6
    image_size: int = 64
    halve_branches: bool = True
    groups: int = 8
    mask_activation: str = "sigmoid"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError("base_channels must be an even integer >= 2")
        if self.classes < 2 or self.in_channels < 1:
            raise ConfigError("need at least 2 classes and 1 input channel")
        if self.image_size % 2 ** (self.levels - 1):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2**{self.levels - 1}")
        if self.mask_activation not in bica.MASK_ACTIVATIONS:
            raise ConfigError(f"unknown mask_activation {self.mask_activation!r}")

    @property
    def is_pyramid(self) -> bool:
        return self.variant.startswith("mfp")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "ModelSpec":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown ModelSpec key {key!r}")
            kwargs[key] = _coerce(key, raw, getattr(cls, key) if hasattr(cls, key) else None)
        return cls(**kwargs)


def _coerce(key, raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    return raw


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# wiring


@dataclass(frozen=True)
class Branch:
    source: int
    k: int
    in_channels: int
    out_channels: int

    @property
    def rate(self) -> int:
        return 2 ** self.k

    @property
    def target(self) -> int:
        return self.source + self.k


@dataclass
class Wiring:
    """Channel bookkeeping for one spec; levels are 1-based."""

    encoder_widths: dict[int, int]
    branches: list[Branch] = field(default_factory=list)
    skip_widths: dict[int, int] = field(default_factory=dict)
    decoder_widths: dict[int, int] = field(default_factory=dict)
    junction: str = "add"
    blocks: dict[int, int] = field(default_factory=dict)
    landed_widths: dict[int, int] = field(default_factory=dict)

    def describe(self) -> str:
        lines = [f"junction={self.junction}"]
        for i, c in self.encoder_widths.items():
            lines.append(f"encoder level {i}: {c} channels")
        for b in self.branches:
            lines.append(f"branch X_F[{b.source},{b.k}]: {b.in_channels}->{b.out_channels} ch, "
                         f"rate {b.rate}, lands on level {b.target}")
        for t, c in self.landed_widths.items():
            if t < len(self.landed_widths):
                lines.append(f"skip level {t}: {c} concatenated -> {self.skip_widths[t]} projected")
        for t, c in self.decoder_widths.items():
            lines.append(f"decoder level {t}: {c} channels")
        return "\n".join(lines)


def branch_ks(spec: ModelSpec, source: int) -> list[int]:
    kmax = spec.levels - source
    if spec.variant == "mfp1":
        return [k for k in (0, 1) if k <= kmax]
    return list(range(kmax + 1))


def wiring(spec: ModelSpec) -> Wiring:
    n, C1 = spec.levels, spec.base_channels
    widths = {i: C1 * 2 ** (i - 1) for i in range(1, n + 1)}
    if not spec.is_pyramid:
        enc = widths
        junction = "concat" if spec.variant == "unet" else "add"
        return Wiring(enc, [], {t: widths[t] for t in range(1, n)}, dict(widths), junction)
    enc = {i: widths[i] for i in range(1, n)}
    branches = []
    for i in range(1, n):
        out_c = widths[i] // 2 if spec.halve_branches else widths[i]
        for k in branch_ks(spec, i):
            branches.append(Branch(i, k, widths[i], out_c))
    landed = {t: sum(b.out_channels for b in branches if b.target == t) for t in range(1, n + 1)}
    # skips are projected onto the level width; the deepest concat is the bottleneck as is
    dec = {**{t: widths[t] for t in range(1, n)}, n: landed[n]}
    junction = "bica" if spec.variant == "mfp-bica" else "add"
    blocks = dict(bica.SemanticDomainConfig.for_depth(n).blocks) if junction == "bica" else {}
    return Wiring(enc, branches, {t: widths[t] for t in range(1, n)}, dec, junction, blocks, landed)


# ---------------------------------------------------------------------------
# parameters


def _shapes(spec: ModelSpec, w: Wiring) -> dict[str, tuple[tuple[int, ...], int]]:
    """name -> (shape, fan_in); fan_in 0 means zeros, -1 means ones."""
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}

    def conv(name, cout, cin, k, bias=True):
        shapes[name + ".w"] = ((cout, cin, k, k), cin * k * k)
        if bias:
            shapes[name + ".b"] = ((cout,), 0)

    def block(name, cin, cout):
        # a bias before group norm is redundant, so normalized convs carry none
        conv(name + ".conv1", cout, cin, 3, bias=False)
        shapes[name + ".gn1.g"] = ((cout,), -1)
        shapes[name + ".gn1.b"] = ((cout,), 0)
        conv(name + ".conv2", cout, cout, 3, bias=False)
        shapes[name + ".gn2.g"] = ((cout,), -1)
        shapes[name + ".gn2.b"] = ((cout,), 0)

    n = spec.levels
    prev = spec.in_channels
    for i, c in w.encoder_widths.items():
        block(f"enc{i}", prev, c)
        prev = c
    for b in w.branches:
        name = f"branch{b.source}_{b.k}"
        conv(name + ".conv", b.out_channels, b.in_channels, 3, bias=False)
        shapes[name + ".gn.g"] = ((b.out_channels,), -1)
        shapes[name + ".gn.b"] = ((b.out_channels,), 0)
    for t in range(1, n) if spec.is_pyramid else ():
        conv(f"proj{t}", w.skip_widths[t], w.landed_widths[t], 1)
    dw = w.decoder_widths
    for t in range(n, 0, -1):
        # without a pyramid the encoder's last block is the bottleneck
        if t < n or spec.is_pyramid:
            cin = 2 * dw[t] if (w.junction == "concat" and t < n) else dw[t]
            block(f"dec{t}", cin, dw[t])
        if t > 1:
            conv(f"up{t - 1}", dw[t - 1], dw[t], 1)
    conv("head", spec.classes, dw[1], 1)
    if w.junction == "bica":
        for t in range(1, n):
            extent = spec.image_size // 2 ** (t - 1)
            rows = (extent // w.blocks[t]) ** 2
            for k, v in bica.bica_param_shapes(dw[t], rows).items():
                shapes[f"bica{t}.{k}"] = v
    return shapes


def build_model(spec: ModelSpec, seed: int | None = None) -> tuple[dict[str, np.ndarray], Wiring]:
    """Deterministic float32 parameters plus the wiring they implement.

    Each tensor draws from its own stream keyed by (seed, name), so shared
    parts of different variants initialize identically.
    """
    seed = spec.seed if seed is None else seed
    w = wiring(spec)
    params = {}
    for name, (shape, fan_in) in _shapes(spec, w).items():
        if fan_in == 0:
            params[name] = np.zeros(shape, dtype=np.float32)
        elif fan_in == -1:
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            params[name] = nn.fan_in_uniform(rng, shape, fan_in)
    return params, w


def param_count(params: Mapping[str, np.ndarray | Tensor]) -> int:
    return int(sum(np.prod(p.shape, dtype=np.int64) for p in params.values()))


# ---------------------------------------------------------------------------
# forward pieces


def _as_tensors(params):
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def _groups(spec: ModelSpec, channels: int) -> int:
    return int(np.gcd(spec.groups, channels))


def conv_block(x: Tensor, p, name: str, spec: ModelSpec) -> Tensor:
    """One encoding operation: (3x3 conv -> group norm -> relu) twice."""
    for j in (1, 2):
        x = nn.conv2d(x, p[f"{name}.conv{j}.w"])
        g = _groups(spec, x.shape[1])
        x = nn.relu(nn.group_norm(x, p[f"{name}.gn{j}.g"], p[f"{name}.gn{j}.b"], g))
    return x


def _check_input(x: Tensor, spec: ModelSpec) -> None:
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"expected input (B, {spec.in_channels}, H, W), got {x.shape}")
    f = 2 ** (spec.levels - 1)
    if x.shape[2] % f or x.shape[3] % f:
        raise ShapeError(f"input extents {x.shape[2:]} not divisible by {f}")


def encoder_levels(x: Tensor, params, spec: ModelSpec) -> list[Tensor]:
    """Plain encoder maps X_E^i (pooling between levels)."""
    p = _as_tensors(params)
    _check_input(x, spec)
    w = wiring(spec)
    feats = []
    for i in w.encoder_widths:
        if i > 1:
            x = nn.max_pool2d(x, 2)
        x = conv_block(x, p, f"enc{i}", spec)
        feats.append(x)
    return feats


@dataclass
class ReuseBranchOutput:
    source: int
    k: int
    rate: int
    features: Tensor


def reuse_branch(encoded: Tensor, i: int, k: int, params, spec: ModelSpec) -> ReuseBranchOutput:
    """Dilated reuse of an encoded level-i map: rate = stride = 2**k.

    ``encoded`` is the encoder's own level-i output, i.e. the single encoding
    operation already applied to level i - 1; the branch only adds the dilated
    convolution (plus norm and relu).
    """
    if not 0 <= k <= spec.levels - i:
        raise ContractError(f"branch k={k} inadmissible at level {i} (need 0 <= k <= {spec.levels - i})")
    p = _as_tensors(params)
    name = f"branch{i}_{k}"
    if name + ".conv.w" not in p:
        raise ContractError(f"variant {spec.variant!r} has no branch ({i}, {k})")
    r = 2 ** k
    y = nn.conv2d(encoded, p[name + ".conv.w"], stride=r, dilation=r)
    y = nn.relu(nn.group_norm(y, p[name + ".gn.g"], p[name + ".gn.b"], _groups(spec, y.shape[1])))
    return ReuseBranchOutput(i, k, r, y)


def pyramid(feats: list[Tensor], params, spec: ModelSpec, taps: dict | None = None) -> dict[int, Tensor]:
    """Skip feature per level from every branch landing there.

    Branches are concatenated; above the deepest level a 1x1 convolution maps
    the concatenation onto the level width, which is the same as summing one
    linear projection per branch.
    """
    p = _as_tensors(params)
    w = wiring(spec)
    landed: dict[int, list[Tensor]] = {}
    for b in w.branches:
        out = reuse_branch(feats[b.source - 1], b.source, b.k, p, spec)
        landed.setdefault(b.target, []).append(out.features)
        if taps is not None:
            taps[f"branch{b.source}_{b.k}"] = out.features
    skips = {}
    for t, v in sorted(landed.items()):
        x = concat(v, axis=1)
        skips[t] = x if t == spec.levels else nn.conv2d(x, p[f"proj{t}.w"], p[f"proj{t}.b"])
    return skips


def encode(x: Tensor, params, spec: ModelSpec) -> list[Tensor]:
    """EncoderFeatures, one map per level, extent halving per level.

    For pyramid variants the deepest entry is the concatenated pyramid at that
    scale, which stands in for the last encoder stage as the decoder input.
    """
    feats = encoder_levels(x, params, spec)
    if spec.is_pyramid:
        feats.append(pyramid(feats, params, spec)[spec.levels])
    return feats


def upsample_step(x: Tensor, p, t: int) -> Tensor:
    """U: bilinear x2 then a 1x1 channel-reducing convolution onto level t."""
    return nn.conv2d(nn.upsample_bilinear(x, 2), p[f"up{t}.w"], p[f"up{t}.b"])


def decode_step(prev: Tensor, fused: Tensor | None, params, spec: ModelSpec, level: int,
                junction: str = "add", taps: dict | None = None) -> Tensor:
    """X_D at ``level`` from the decoder state one level deeper.

    ``add``: U(H(prev)) + fused. ``concat``: [U(H(prev)), fused] along
    channels (U-Net baseline). ``bica``: BiCA(fused, U(H(prev))).
    """
    p = _as_tensors(params)
    deeper = level + 1
    h = prev if (deeper == spec.levels and not spec.is_pyramid) else conv_block(prev, p, f"dec{deeper}", spec)
    q = upsample_step(h, p, level)
    if taps is not None:
        taps[f"up{level}"] = q
    if fused is None:
        return q
    if fused.shape != q.shape:
        raise ShapeError(f"level {level}: skip {fused.shape} does not match upsampled state {q.shape}")
    if junction == "add":
        return add(q, fused)
    if junction == "concat":
        return concat([q, fused], axis=1)
    if junction == "bica":
        local = {k[len(f"bica{level}."):]: v for k, v in p.items() if k.startswith(f"bica{level}.")}
        block = bica.SemanticDomainConfig.for_depth(spec.levels).block(level)
        return bica.bica_fuse(fused, q, local, block, spec.mask_activation)
    raise ConfigError(f"unknown junction {junction!r}")


def forward(spec: ModelSpec, params, batch: Tensor, taps: dict | None = None) -> Tensor:
    """Full-resolution logits (B, classes, H, W); no softmax applied.

    ``taps``, when given, receives intermediate maps by name (encoder levels,
    pyramid branches, decoder states, junction inputs) for inspection.
    """
    p = _as_tensors(params)
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    n = spec.levels
    w = wiring(spec)
    feats = encoder_levels(batch, p, spec)
    if spec.is_pyramid:
        skips = pyramid(feats, p, spec, taps)
        state = skips[n]
    else:
        skips = {t: feats[t - 1] for t in range(1, n)}
        state = feats[-1]
    if taps is not None:
        for i, f in enumerate(feats, 1):
            taps[f"enc{i}"] = f
        taps[f"dec{n}"] = state
    for t in range(n - 1, 0, -1):
        if taps is not None:
            taps[f"skip{t}"] = skips[t]
        state = decode_step(state, skips[t], p, spec, t, w.junction, taps)
        if taps is not None:
            taps[f"dec{t}"] = state
    state = conv_block(state, p, "dec1", spec)
    return nn.conv2d(state, p["head.w"], p["head.b"])
