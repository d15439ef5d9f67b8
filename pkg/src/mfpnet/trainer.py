"""Loss, SGD with momentum, step schedule, checkpoints, training and evaluation."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from .errors import ConfigError, ContractError, FormatError, NonFiniteError
from .metrics import LabelVolume, MetricReport, aggregate_report, case_metrics, dice_volumetric
from .model import ModelSpec, build_model, forward
from .phantom import AugmentConfig, FEMORAL_LEFT, FEMORAL_RIGHT, augment, load_case, normalize, read_manifest
from .tensor import Tensor, backward, tsum

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# loss


def _onehot(labels: np.ndarray, classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    return np.eye(classes, dtype=dtype)[labels].transpose(0, 3, 1, 2)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    B, K, H, W = logits.shape
    onehot = Tensor(_onehot(labels, K, logits.dtype))
    return -(nn.log_softmax(logits, 1) * onehot).sum() / (B * H * W)


def soft_dice(logits: Tensor, labels: np.ndarray, smooth: float = 1.0) -> Tensor:
    """Mean soft Dice over the foreground classes, pooled over the batch."""
    K = logits.shape[1]
    onehot = _onehot(labels, K, logits.dtype)
    p = nn.softmax(logits, 1)
    inter = tsum(p * Tensor(onehot), axis=(0, 2, 3))
    denom = tsum(p, axis=(0, 2, 3)) + Tensor(onehot.sum(axis=(0, 2, 3)))
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    fg = np.full(K, 1.0 / (K - 1), dtype=logits.dtype)
    fg[0] = 0.0
    return (dice * Tensor(fg)).sum()


def loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Pixelwise cross-entropy plus (1 - foreground soft Dice), equal weights."""
    return cross_entropy(logits, labels) + (1.0 - soft_dice(logits, labels))


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class OptimState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             state: OptimState) -> tuple[dict[str, np.ndarray], OptimState]:
    """Heavy-ball SGD with coupled L2: g += wd*w; v = m*v + g; w -= lr*v."""
    new_params, new_bufs = {}, {}
    for name, w in params.items():
        if name not in grads or grads[name].shape != w.shape:
            raise ContractError(f"gradient for {name!r} missing or misshapen")
        dt = w.dtype.type
        g = grads[name] + dt(state.weight_decay) * w
        v = state.buffers.get(name)
        if v is not None and v.shape != w.shape:
            raise ContractError(f"momentum buffer for {name!r} has shape {v.shape}, expected {w.shape}")
        v = g if v is None else dt(state.momentum) * v + g
        new_bufs[name] = v.astype(w.dtype, copy=False)
        new_params[name] = (w - dt(state.lr) * v).astype(w.dtype, copy=False)
    return new_params, replace(state, buffers=new_bufs)


REFERENCE_SCHEDULE = {0: 0.01, 200: 0.001, 300: 0.0001}


@dataclass(frozen=True)
class LrSchedule:
    breakpoints: tuple[tuple[int, float], ...] = tuple(REFERENCE_SCHEDULE.items())

    def __post_init__(self):
        bps = sorted(self.breakpoints)
        if not bps or bps[0][0] != 0:
            raise ConfigError("schedule needs a breakpoint at epoch 0")
        if any(b[1] > a[1] for a, b in zip(bps, bps[1:])):
            raise ConfigError("learning rate schedule must be non-increasing")
        object.__setattr__(self, "breakpoints", tuple(bps))

    @classmethod
    def parse(cls, text: str) -> "LrSchedule":
        """``0:0.01,200:0.001,300:0.0001``"""
        try:
            pairs = [item.split(":") for item in text.split(",") if item.strip()]
            return cls(tuple((int(e), float(v)) for e, v in pairs))
        except ValueError:
            raise ConfigError(f"cannot parse schedule {text!r}") from None

    def __str__(self) -> str:
        return ",".join(f"{e}:{v:g}" for e, v in self.breakpoints)


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    lr = schedule.breakpoints[0][1]
    for start, value in schedule.breakpoints:
        if epoch >= start:
            lr = value
    return lr


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MFPC"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    optim: OptimState
    epoch: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def _put_str(buf: io.BytesIO, s: str, width: str = "<I") -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack(width, len(b)))
    buf.write(b)


def encode_checkpoint(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    _put_str(buf, ck.spec.to_text())
    records = list(ck.params.items()) + [(f"momentum/{k}", v) for k, v in ck.optim.buffers.items()]
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _put_str(buf, name, "<H")
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = {"epoch": ck.epoch, "lr": ck.optim.lr, "momentum": ck.optim.momentum,
            "weight_decay": ck.optim.weight_decay, "rng_state": ck.rng_state, "meta": ck.meta}
    _put_str(buf, json.dumps(meta, sort_keys=True))
    return buf.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, width: str, what: str) -> str:
        (n,) = self.unpack(width, what)
        return self.take(n, what).decode("utf-8")


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (version,) = r.unpack("<H", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    spec = ModelSpec.from_text(r.string("<I", "model spec"))
    (count,) = r.unpack("<I", "record count")
    params, bufs = {}, {}
    for _ in range(count):
        name = r.string("<H", "record name")
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n, name), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith("momentum/"):
            bufs[name[len("momentum/"):]] = arr
        else:
            params[name] = arr
    meta = json.loads(r.string("<I", "metadata"))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", r.pos)
    optim = OptimState(meta["lr"], meta["momentum"], meta["weight_decay"], bufs)
    return Checkpoint(spec, params, optim, meta["epoch"], meta["rng_state"], meta.get("meta", {}))


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    data_dir: str = "data"
    out_dir: str = "run"
    variant: str = "mfp-bica"
    levels: int = 5
    base_channels: int = 8
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    schedule: str = str(LrSchedule())
    momentum: float = 0.9
    weight_decay: float = 0.001
    augment: bool = True
    checkpoint_every: int = 0
    threads: int = 1

    @classmethod
    def reference(cls, **overrides) -> "TrainConfig":
        """Reference settings: batch 32, 400 epochs, lr 0.01 dropping at 200 and 300."""
        base = dict(base_channels=16, batch_size=32, epochs=400, schedule=str(LrSchedule()))
        base.update(overrides)
        return cls(**base)

    def describe(self) -> str:
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))

    def with_overrides(self, values: Mapping[str, str]) -> "TrainConfig":
        """Apply ``key=value`` strings; unknown keys raise ConfigError naming the key."""
        known = {f.name for f in fields(self)}
        changes = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce_like(key, raw, getattr(self, key))
        out = replace(self, **changes)
        LrSchedule.parse(out.schedule)
        return out


def _coerce_like(key: str, raw, current):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError
            return raw.lower() in ("1", "true", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot use {raw!r} as {type(current).__name__}") from None
    return raw


@dataclass
class TrainRecord:
    epoch: int
    lr: float
    train_loss: float
    val_dice: float
    wall_time: float = 0.0


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def append(self, rec: TrainRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ContractError("train log epochs must strictly increase")
        self.records.append(rec)

    def to_csv(self) -> str:
        """Deterministic columns only; wall times go to :meth:`timing_csv`."""
        lines = ["epoch,lr,train_loss,val_dice"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.val_dice!r}")
        return "\n".join(lines) + "\n"

    def timing_csv(self) -> str:
        return "epoch,wall_time\n" + "".join(f"{r.epoch},{r.wall_time:.3f}\n" for r in self.records)


def load_slices(data_dir, case_ids) -> tuple[np.ndarray, np.ndarray]:
    """All axial slices of the given cases, each standardized: (N, H, W) x2."""
    imgs, labs = [], []
    for cid in case_ids:
        image, labels = load_case(data_dir, cid)
        for z in range(image.shape[0]):
            imgs.append(normalize(image[z]))
            labs.append(labels.voxels[z].astype(np.int64))
    if not imgs:
        raise ConfigError(f"no slices found for cases {list(case_ids)}")
    return np.stack(imgs), np.stack(labs)


def predict_volume(spec: ModelSpec, params, image: np.ndarray, batch: int = 16) -> np.ndarray:
    """Argmax labels for a (D, H, W) volume, predicted slice by slice and stacked."""
    slices = np.stack([normalize(s) for s in image])[:, None]
    out = []
    for i in range(0, len(slices), batch):
        logits = forward(spec, params, Tensor(slices[i:i + batch]))
        out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out).astype(np.uint8)


def mean_foreground_dice(pred: np.ndarray, truth: LabelVolume, classes: int) -> float:
    return float(np.mean([dice_volumetric(pred, truth.voxels, o) for o in range(1, classes)]))


def _validate(spec, params, data_dir, case_ids) -> float:
    if not case_ids:
        return float("nan")
    scores = []
    for cid in case_ids:
        image, truth = load_case(data_dir, cid)
        scores.append(mean_foreground_dice(predict_volume(spec, params, image), truth, spec.classes))
    return float(np.mean(scores))


def _write_log(out: Path, tlog: TrainLog) -> None:
    (out / "train_log.csv").write_text(tlog.to_csv())
    (out / "timing.csv").write_text(tlog.timing_csv())


def effective_threads(requested: int) -> int:
    """Requested kernel threads, capped at the cores this process may run on.

    More BLAS threads than cores makes them spin against each other; on one
    core a 4-thread matmul runs several times slower than a 1-thread one.
    """
    try:
        cores = len(os.sched_getaffinity(0))
    except AttributeError:
        cores = os.cpu_count() or 1
    return max(1, min(requested, cores))


def train(cfg: TrainConfig, resume: str | None = None) -> tuple[Checkpoint, TrainLog]:
    """Run the epoch loop; writes last/best checkpoints and the log to ``cfg.out_dir``."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Path(cfg.data_dir) / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    split = read_manifest(manifest)
    images, labels = load_slices(cfg.data_dir, split["train"])
    schedule = LrSchedule.parse(cfg.schedule)
    aug_cfg = AugmentConfig(mirror_pairs=((FEMORAL_LEFT, FEMORAL_RIGHT),))

    if resume:
        ck = load_checkpoint(resume)
        spec, params, optim = ck.spec, ck.params, ck.optim
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        tlog = TrainLog([TrainRecord(**r) for r in ck.meta.get("log", [])])
        best = ck.meta.get("best_val", -1.0)
        start = ck.epoch
    else:
        spec = ModelSpec(variant=cfg.variant, levels=cfg.levels, base_channels=cfg.base_channels,
                         image_size=images.shape[-1], seed=cfg.seed)
        params, _ = build_model(spec)
        optim = OptimState(lr_at(schedule, 0), cfg.momentum, cfg.weight_decay)
        rng = np.random.default_rng(cfg.seed)
        tlog, best, start = TrainLog(), -1.0, 0

    ck = None
    with threadpool_limits(limits=effective_threads(cfg.threads)):
        for epoch in range(start, cfg.epochs):
            t0 = time.perf_counter()
            optim = replace(optim, lr=lr_at(schedule, epoch))
            order = rng.permutation(len(images))
            losses = []
            for b, i in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[i:i + cfg.batch_size]
                xb, yb = images[idx], labels[idx]
                if cfg.augment:
                    pairs = [augment(x, y, rng, aug_cfg) for x, y in zip(xb, yb)]
                    xb = np.stack([p[0] for p in pairs])
                    yb = np.stack([p[1] for p in pairs])
                leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
                value = loss(forward(spec, leaves, Tensor(xb[:, None])), yb)
                if not np.isfinite(value.item()):
                    raise NonFiniteError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
                grads = backward(value, leaves)
                params, optim = sgd_step(params, grads, optim)
                losses.append(value.item())
            val = _validate(spec, params, cfg.data_dir, split["val"])
            rec = TrainRecord(epoch + 1, optim.lr, float(np.mean(losses)), val, time.perf_counter() - t0)
            tlog.append(rec)
            log.info("epoch %d lr %g loss %.4f val dice %.4f (%.1fs)", rec.epoch, rec.lr,
                     rec.train_loss, rec.val_dice, rec.wall_time)
            improved = not np.isnan(val) and val > best
            if improved:
                best = val
            ck = Checkpoint(spec, params, optim, epoch + 1, rng.bit_generator.state,
                            {"best_val": best, "log": [_record_dict(r) for r in tlog.records]})
            save_checkpoint(out / "last.ckpt", ck)
            if improved or not (out / "best.ckpt").exists():
                save_checkpoint(out / "best.ckpt", ck)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"epoch_{epoch + 1:03d}.ckpt", ck)
            _write_log(out, tlog)
    if ck is None:
        ck = Checkpoint(spec, params, optim, start, rng.bit_generator.state,
                        {"best_val": best, "log": [_record_dict(r) for r in tlog.records]})
    return ck, tlog


def _record_dict(r: TrainRecord) -> dict:
    # wall time stays out of checkpoints so reruns are byte-identical
    d = asdict(r)
    d["wall_time"] = 0.0
    return d


# ---------------------------------------------------------------------------
# evaluation


def case_predictions(ck: Checkpoint, data_dir, case_ids) -> list[dict]:
    cases = []
    for cid in case_ids:
        image, truth = load_case(data_dir, cid)
        pred = LabelVolume(predict_volume(ck.spec, ck.params, image), truth.spacing)
        cases.append(case_metrics(pred, truth, range(1, ck.spec.classes)))
    return cases


def evaluate(checkpoint, data_dir, split: str = "test", baseline=None) -> MetricReport:
    """Per-organ report on one split; ``baseline`` adds paired t-tests against a second model."""
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    manifest = read_manifest(Path(data_dir) / "manifest.csv")
    ids = manifest.get(split, [])
    if not ids:
        raise ConfigError(f"split {split!r} is empty")
    missing = [c for c in ids if not all(p.exists() for p in _paths(data_dir, c))]
    if missing:
        raise FileNotFoundError(f"missing cases: {', '.join(missing)}")
    cases = case_predictions(ck, data_dir, ids)
    base_cases = None
    if baseline is not None:
        bck = baseline if isinstance(baseline, Checkpoint) else load_checkpoint(baseline)
        base_cases = case_predictions(bck, data_dir, ids)
    return aggregate_report(cases, baseline=base_cases)


def _paths(data_dir, cid):
    from .phantom import case_paths

    return case_paths(data_dir, cid)
