"""Synthetic pelvic phantoms, slice augmentation and dataset splits."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .metrics import LabelVolume
from .segvol import SegVol, read_segvol, write_segvol

ANAL_CANAL, BLADDER, RECTUM, FEMORAL_LEFT, FEMORAL_RIGHT = 1, 2, 3, 4, 5

# later entries never overwrite earlier ones
PRIORITY = (BLADDER, FEMORAL_LEFT, FEMORAL_RIGHT, RECTUM, ANAL_CANAL)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple[int, int, int] = (16, 64, 64)
    spacing: tuple[float, float, float] = (3.0, 1.5, 1.5)
    noise: float = 0.03
    # canal/rectum intensity gap; small on purpose
    tube_contrast: float = 0.12


def _organ_params(rng: np.random.Generator, spec: PhantomSpec) -> dict:
    j = lambda s: rng.uniform(-s, s)  # noqa: E731
    split = 0.42 + j(0.06)
    tube_y, tube_x = 0.42 + j(0.05), j(0.05)
    rectum_i = 0.55 + j(0.02)
    head_z, head_y = 0.32 + j(0.05), 0.02 + j(0.05)
    head_r = 0.19 + j(0.02)
    return {
        BLADDER: dict(kind="ellipsoid", c=(0.62 + j(0.05), -0.32 + j(0.05), j(0.05)),
                      r=(0.36 + j(0.04), 0.30 + j(0.04), 0.36 + j(0.04)), i=0.9 + j(0.03)),
        FEMORAL_LEFT: dict(kind="ellipsoid", c=(head_z, head_y, 0.62 + j(0.04)),
                           r=(0.32, head_r, head_r), i=0.72 + j(0.02)),
        FEMORAL_RIGHT: dict(kind="ellipsoid", c=(head_z + j(0.02), head_y + j(0.02), -0.62 + j(0.04)),
                            r=(0.32, head_r, head_r), i=0.72 + j(0.02)),
        RECTUM: dict(kind="tube", z=(split, 0.97), c=(tube_y, tube_x),
                     r=0.17 + j(0.02), i=rectum_i),
        ANAL_CANAL: dict(kind="tube", z=(0.0, split), c=(tube_y, tube_x),
                         r=0.12 + j(0.015), i=rectum_i - spec.tube_contrast),
    }


def generate_phantom(spec: PhantomSpec) -> tuple[np.ndarray, LabelVolume]:
    """Image in [0, 1] (float32, D x H x W) and its five-organ label volume."""
    D, H, W = spec.dims
    if min(D, H, W) < 16:
        raise ConfigError(f"phantom dims must be >= 16 per axis, got {spec.dims}")
    rng = np.random.default_rng(spec.seed)
    organs = _organ_params(rng, spec)
    z = ((np.arange(D) + 0.5) / D)[:, None, None]
    y = np.linspace(-1, 1, H)[None, :, None]
    x = np.linspace(-1, 1, W)[None, None, :]

    labels = np.zeros((D, H, W), dtype=np.uint8)
    body = ((y / 0.9) ** 2 + (x / 0.97) ** 2 <= 1.0) & np.ones((D, 1, 1), dtype=bool)
    image = np.where(body, 0.28, 0.03)
    for organ in PRIORITY:
        o = organs[organ]
        if o["kind"] == "ellipsoid":
            (cz, cy, cx), (rz, ry, rx) = o["c"], o["r"]
            inside = ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0
        else:
            (cy, cx), z0, z1 = o["c"], *o["z"]
            inside = (((y - cy) ** 2 + (x - cx) ** 2) <= o["r"] ** 2) & (z >= z0) & (z < z1)
        free = inside & (labels == 0)
        labels[free] = organ
        image = np.where(free, o["i"], image)

    # smooth multiplicative bias field plus white noise
    ky, kx = rng.uniform(0.5, 1.5, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    bias = 1.0 + 0.05 * np.sin(ky * np.pi * y + phase[0]) * np.cos(kx * np.pi * x + phase[1])
    image = image * bias + rng.normal(0.0, spec.noise, (D, H, W))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, LabelVolume(labels, spec.spacing)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    rotation_degrees: tuple[float, float] = (-5.0, 5.0)
    rotation_prob: float = 0.5
    contrast_range: tuple[float, float] = (0.9, 1.1)
    contrast_prob: float = 0.5
    elastic_grid: int = 4
    elastic_sigma: float = 1.0
    elastic_prob: float = 0.3
    flip_prob: float = 0.5
    # label pairs exchanged by a horizontal flip (e.g. left/right organs)
    mirror_pairs: tuple[tuple[int, int], ...] = ()

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(rotation_prob=0.0, contrast_prob=0.0, elastic_prob=0.0, flip_prob=0.0)


@dataclass
class AugmentDraw:
    angle: float = 0.0
    contrast: float = 1.0
    elastic: np.ndarray | None = None
    flip: bool = False


def draw_augment(rng: np.random.Generator, cfg: AugmentConfig) -> AugmentDraw:
    """Sample every random decision up front so one draw can be replayed."""
    d = AugmentDraw()
    if rng.random() < cfg.rotation_prob:
        d.angle = float(rng.uniform(*cfg.rotation_degrees))
    if rng.random() < cfg.contrast_prob:
        d.contrast = float(rng.uniform(*cfg.contrast_range))
    if rng.random() < cfg.elastic_prob:
        d.elastic = rng.normal(0.0, cfg.elastic_sigma, (2, cfg.elastic_grid, cfg.elastic_grid))
    d.flip = bool(rng.random() < cfg.flip_prob)
    return d


def sampling_map(shape: tuple[int, int], draw: AugmentDraw) -> np.ndarray | None:
    """Source coordinates (2, H, W) for rotation about the center plus elastic offsets."""
    if draw.angle == 0.0 and draw.elastic is None:
        return None
    H, W = shape
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    a = math.radians(draw.angle)
    ca, sa = math.cos(a), math.sin(a)
    sy = cy + ca * (yy - cy) - sa * (xx - cx)
    sx = cx + sa * (yy - cy) + ca * (xx - cx)
    if draw.elastic is not None:
        g = draw.elastic.shape[1]
        dense = ndimage.zoom(draw.elastic, (1, H / g, W / g), order=1, mode="nearest", grid_mode=True)
        sy = sy + dense[0]
        sx = sx + dense[1]
    return np.stack([sy, sx])


def apply_augment(image: np.ndarray, label: np.ndarray, draw: AugmentDraw,
                  cfg: AugmentConfig) -> tuple[np.ndarray, np.ndarray]:
    image = np.asarray(image, dtype=np.float32)
    label = np.asarray(label)
    coords = sampling_map(image.shape, draw)
    if coords is not None:
        image = ndimage.map_coordinates(image, coords, order=1, mode="nearest").astype(np.float32)
        label = ndimage.map_coordinates(label, coords, order=0, mode="nearest")
    if draw.contrast != 1.0:
        m = image.mean(dtype=np.float64)
        image = ((image - m) * draw.contrast + m).astype(np.float32)
    if draw.flip:
        image = image[:, ::-1]
        label = label[:, ::-1]
        if cfg.mirror_pairs:
            swapped = label.copy()
            for a, b in cfg.mirror_pairs:
                swapped[label == a] = b
                swapped[label == b] = a
            label = swapped
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


def augment(image: np.ndarray, label: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> tuple[np.ndarray, np.ndarray]:
    """One shared geometric transform for image (bilinear) and label (nearest);
    contrast jitter touches the image only."""
    if image.shape[0] != image.shape[1] or image.shape != label.shape:
        raise ConfigError(f"augment expects square, matching slices, got {image.shape} and {label.shape}")
    return apply_augment(image, label, draw_augment(rng, cfg), cfg)


def normalize(image: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-slice standardization; near-constant slices map to zeros."""
    a = np.asarray(image, dtype=np.float64)
    m = a.mean()
    sd = a.std()
    if sd < eps:
        return np.zeros_like(a, dtype=np.float32)
    return ((a - m) / sd).astype(np.float32)


# ---------------------------------------------------------------------------
# datasets on disk


SPLITS = ("train", "val", "test")


def make_split(case_ids: list[str], proportions=(0.66, 0.11, 0.23), seed: int = 0) -> dict[str, list[str]]:
    """Disjoint train/val/test partition (shuffled by ``seed``)."""
    ids = list(case_ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate case ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    ids = [ids[i] for i in order]
    n = len(ids)
    n_train = int(round(proportions[0] * n))
    n_val = int(round(proportions[1] * n))
    if n >= 3:
        n_val = max(n_val, 1)
        n_train = min(n_train, n - n_val - 1)
    return {"train": sorted(ids[:n_train]), "val": sorted(ids[n_train:n_train + n_val]),
            "test": sorted(ids[n_train + n_val:])}


def write_manifest(path, split: dict[str, list[str]]) -> None:
    with open(path, "w") as fh:
        for name in SPLITS:
            for cid in split.get(name, []):
                fh.write(f"{name},{cid}\n")


def read_manifest(path) -> dict[str, list[str]]:
    split: dict[str, list[str]] = {name: [] for name in SPLITS}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                name, cid = line.split(",")
            except ValueError:
                raise ConfigError(f"{path}:{n}: expected 'split,case_id'") from None
            if name not in split:
                raise ConfigError(f"{path}:{n}: unknown split {name!r}")
            split[name].append(cid)
    return split


def case_paths(data_dir, case_id: str) -> tuple[Path, Path]:
    d = Path(data_dir)
    return d / f"{case_id}_image.svol", d / f"{case_id}_label.svol"


def generate_dataset(out_dir, cases: int, dims=(16, 64, 64), seed: int = 0,
                     spacing=(3.0, 1.5, 1.5)) -> dict[str, list[str]]:
    """Write ``cases`` phantom image/label pairs and ``manifest.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for c in range(cases):
        cid = f"case_{c:03d}"
        image, labels = generate_phantom(PhantomSpec(seed=seed * 100_003 + c, dims=tuple(dims),
                                                     spacing=tuple(spacing)))
        img_path, lab_path = case_paths(out, cid)
        write_segvol(img_path, SegVol(image, labels.spacing))
        write_segvol(lab_path, SegVol(labels.voxels, labels.spacing))
        ids.append(cid)
    split = make_split(ids, seed=seed)
    write_manifest(out / "manifest.csv", split)
    return split


def load_case(data_dir, case_id: str) -> tuple[np.ndarray, LabelVolume]:
    img_path, lab_path = case_paths(data_dir, case_id)
    img = read_segvol(img_path)
    lab = read_segvol(lab_path)
    return img.data, LabelVolume(lab.data, lab.spacing)
