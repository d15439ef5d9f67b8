"""Command-line entry point: ``mfpnet <subcommand> ...``.

Exit codes: 0 success, 1 contract/config error, 2 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import FormatError, MFPError
from .model import parse_key_values

log = logging.getLogger("mfpnet")


def _dims(text: str) -> tuple[int, int, int]:
    try:
        d = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected DxHxW, got {text!r}") from None
    if len(d) != 3:
        raise argparse.ArgumentTypeError(f"expected DxHxW, got {text!r}")
    return d


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfpnet", description="Feature-pyramid U-Net segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="{gen-data,train,eval,infer,gradcheck,heatmap,compare}")
    sub.required = True

    g = sub.add_parser("gen-data", help="write a phantom dataset and manifest")
    g.add_argument("--cases", type=int, default=12)
    g.add_argument("--dims", type=_dims, default=(16, 64, 64), help="DxHxW (default 16x64x64)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data")

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--data", help="dataset directory (config key data_dir)")
    t.add_argument("--out", help="run directory (config key out_dir)")
    t.add_argument("--variant", help="unet, unet-add, mfp1, mfp2 or mfp-bica")
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int, help="kernel threads; 1 is the deterministic reference")
    t.add_argument("--config", help="file of key=value lines")
    t.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[],
                   metavar="KEY=VALUE", help="override one config key (repeatable)")
    t.add_argument("--reference-config", "--paper-config", dest="reference_config", action="store_true",
                   help="batch 32, 400 epochs, lr 0.01 step schedule")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")

    e = sub.add_parser("eval", help="per-organ Dice/MSD report as CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--baseline", help="second checkpoint for paired t-tests")
    e.add_argument("--out", help="CSV path (default stdout)")

    i = sub.add_parser("infer", help="segment one SegVol image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operator")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--only", help="run cases whose name contains this text")

    h = sub.add_parser("heatmap", help="export one feature map as a PGM image")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--input", required=True, help="SegVol image")
    h.add_argument("--slice", type=int, default=None, help="axial index (default: middle)")
    h.add_argument("--tap", default="enc1", help="feature name, e.g. enc2, branch1_1, skip2, dec1")
    h.add_argument("--channel", type=int, default=None, help="channel index (default: mean over channels)")
    h.add_argument("--out", required=True)

    c = sub.add_parser("compare", help="train several variants on one dataset and write a comparison table")
    c.add_argument("--data", default="data", help="dataset directory (generated when no manifest exists)")
    c.add_argument("--out", default="compare")
    c.add_argument("--variants", default="unet,unet-add,mfp1,mfp2,mfp-bica")
    c.add_argument("--baseline", default="unet", help="variant the paired t-tests compare against")
    c.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[], metavar="KEY=VALUE")
    return p


def _gen_data(args) -> int:
    from .phantom import generate_dataset

    split = generate_dataset(args.out, args.cases, dims=args.dims, seed=args.seed)
    counts = ", ".join(f"{k} {len(v)}" for k, v in split.items())
    print(f"wrote {args.cases} cases to {args.out} ({counts})")
    return 0


def _train_config(args):
    from .trainer import TrainConfig

    cfg = TrainConfig.reference() if args.reference_config else TrainConfig()
    if args.config:
        cfg = cfg.with_overrides(parse_key_values(Path(args.config).read_text()))
    cfg = cfg.with_overrides(dict(args.overrides))
    flags = {"data_dir": args.data, "out_dir": args.out, "variant": args.variant,
             "seed": args.seed, "threads": args.threads}
    return cfg.with_overrides({k: v for k, v in flags.items() if v is not None})


def _train(args) -> int:
    from .model import ModelSpec
    from .trainer import train

    cfg = _train_config(args)
    ModelSpec(variant=cfg.variant, levels=cfg.levels, base_channels=cfg.base_channels)
    print(cfg.describe())
    if args.dry_run:
        return 0
    ck, tlog = train(cfg, resume=args.resume)
    last = tlog.records[-1] if tlog.records else None
    if last:
        print(f"finished epoch {last.epoch}: train loss {last.train_loss:.4f}, val dice {last.val_dice:.4f}")
    print(f"checkpoints in {cfg.out_dir}")
    return 0


def _eval(args) -> int:
    from .trainer import evaluate

    report = evaluate(args.checkpoint, args.data, split=args.split, baseline=args.baseline)
    if args.out:
        report.write_csv(args.out)
    else:
        sys.stdout.write(report.to_csv())
    return 0


def _infer(args) -> int:
    from .segvol import SegVol, read_segvol, write_segvol
    from .trainer import load_checkpoint, predict_volume

    ck = load_checkpoint(args.checkpoint)
    vol = read_segvol(args.input)
    labels = predict_volume(ck.spec, ck.params, vol.data)
    write_segvol(args.out, SegVol(labels, vol.spacing))
    print(f"wrote labels {labels.shape} to {args.out}")
    return 0


def _gradcheck(args) -> int:
    from .gradcheck import run_suite

    result = run_suite(seed=args.seed, only=args.only)
    for line in result.lines():
        print(line)
    print(f"{len(result.reports)} cases in {result.seconds:.1f}s: {'PASS' if result.passed else 'FAIL'}")
    return 0 if result.passed else 1


def _heatmap(args) -> int:
    from .errors import ConfigError
    from .heatmap import export_heatmap
    from .phantom import normalize
    from .segvol import read_segvol
    from .tensor import Tensor
    from .model import forward
    from .trainer import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    image = read_segvol(args.input).data
    z = image.shape[0] // 2 if args.slice is None else args.slice
    if not 0 <= z < image.shape[0]:
        raise ConfigError(f"slice {z} outside 0..{image.shape[0] - 1}")
    taps: dict = {}
    forward(ck.spec, ck.params, Tensor(normalize(image[z])[None, None]), taps=taps)
    if args.tap not in taps:
        raise ConfigError(f"unknown tap {args.tap!r}; available: {', '.join(sorted(taps))}")
    fmap = taps[args.tap].data[0]
    if args.channel is None:
        m = fmap.mean(axis=0)
    elif 0 <= args.channel < fmap.shape[0]:
        m = fmap[args.channel]
    else:
        raise ConfigError(f"channel {args.channel} outside 0..{fmap.shape[0] - 1}")
    export_heatmap(np.asarray(m), args.out)
    print(f"wrote {m.shape[1]}x{m.shape[0]} heatmap of {args.tap} to {args.out}")
    return 0


def _compare(args) -> int:
    from .errors import ConfigError
    from .experiment import desk_table
    from .model import VARIANTS
    from .trainer import TrainConfig

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s): {', '.join(unknown)}")
    cfg = TrainConfig().with_overrides(dict(args.overrides))
    table = desk_table(args.data, args.out, variants, args.baseline, cfg)
    sys.stdout.write(table.to_csv())
    return 0


COMMANDS = {"gen-data": _gen_data, "train": _train, "eval": _eval, "infer": _infer,
            "gradcheck": _gradcheck, "heatmap": _heatmap, "compare": _compare}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MFPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
