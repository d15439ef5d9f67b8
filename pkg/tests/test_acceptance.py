"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 8 trains all five variants at desk scale and takes the bulk of the
runtime (tens of minutes on one core).
"""
import itertools
import math

import numpy as np
import pytest

from mfpnet import bica
from mfpnet.cli import cli_main
from mfpnet.experiment import desk_table
from mfpnet.gradcheck import run_suite
from mfpnet.metrics import LabelVolume, dice_volumetric, msd, paired_t_test
from mfpnet.model import ModelSpec, build_model, encoder_levels, param_count, reuse_branch, wiring
from mfpnet.tensor import Tensor
from mfpnet.trainer import LrSchedule, OptimState, TrainConfig, lr_at, sgd_step

REQUIRED_OPS = ("conv2d", "conv2d_dilated", "conv2d_strided", "group_norm", "relu", "sigmoid", "softmax",
                "upsample_bilinear", "block_mean", "sample_bilinear_normalized", "flow_estimate",
                "channel_attention", "flow_warp", "bica_fuse", "loss")


def test_criterion_1_gradient_suite(verdict):
    result = run_suite(seed=0)
    worst = max(max(r.max_rel_error.values()) for r in result.reports.values())
    covered = all(op in result.reports for op in REQUIRED_OPS)
    ok = result.passed and covered and worst < 1e-4 and result.seconds < 120
    assert verdict(1, ok, f"{len(result.reports)} operator cases, max rel err {worst:.2e} (< 1e-4), "
                          f"{result.seconds:.1f}s (< 120s)")


def test_criterion_2_warp_identity_and_clamp(verdict):
    rng = np.random.default_rng(0)
    O = rng.normal(size=(2, 3, 7, 5))
    ident = bica.flow_warp(Tensor(O), Tensor(np.zeros((2, 7, 5, 2)))).data
    err = float(np.abs(ident - O).max())
    hi = bica.flow_warp(Tensor(O), Tensor(np.full((2, 7, 5, 2), 1e6))).data
    lo = bica.flow_warp(Tensor(O), Tensor(np.full((2, 7, 5, 2), -1e6))).data
    sat = np.allclose(hi, O[..., -1:, -1:]) and np.allclose(lo, O[..., :1, :1])
    assert verdict(2, err <= 1e-6 and sat, f"zero-flow max deviation {err:.1e} (<= 1e-6); "
                                           f"+/-1e6 flow saturates to corner pixels: {sat}")


def _oracle_surface(mask):
    padded = np.pad(mask, 1)
    interior = np.ones_like(mask)
    for axis, shift in itertools.product(range(3), (-1, 1)):
        interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(mask & ~interior).astype(np.float64)


def _oracle_msd(a, b, spacing):
    sa, sb = _oracle_surface(a) * spacing, _oracle_surface(b) * spacing
    d = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(-1))
    return (d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(sa) + len(sb))


def test_criterion_3_metric_oracles(verdict):
    rng = np.random.default_rng(3)
    dice_exact, msd_err, scale_err = True, 0.0, 0.0
    for _ in range(100):
        labels = [rng.integers(0, 3, (16, 16, 16)).astype(np.uint8) for _ in range(2)]
        spacing = tuple(rng.uniform(0.5, 3.0, 3))
        A, B = (LabelVolume(v, spacing) for v in labels)
        a, b = labels[0] == 1, labels[1] == 1
        nab, na, nb = int((a & b).sum()), int(a.sum()), int(b.sum())
        dice_exact &= dice_volumetric(A, B, 1) == 2 * nab / (na + nb)
        value = msd(A, B, 1)
        msd_err = max(msd_err, abs(value - _oracle_msd(a, b, np.array(spacing))))
        s = rng.uniform(0.5, 4.0)
        scaled = msd(LabelVolume(labels[0], tuple(s * x for x in spacing)),
                     LabelVolume(labels[1], tuple(s * x for x in spacing)), 1)
        scale_err = max(scale_err, abs(scaled - s * value))
    ok = dice_exact and msd_err <= 1e-6 and scale_err <= 1e-6
    assert verdict(3, ok, f"100 random 16^3 pairs: Dice exact {dice_exact}, max MSD error {msd_err:.1e}, "
                          f"max scaling-law error {scale_err:.1e} (<= 1e-6)")


def test_criterion_4_semantic_domain_rows(verdict):
    O = Tensor(np.random.default_rng(4).normal(size=(1, 16, 32, 32)))
    gm = bica.stacked_domain(O, O, 8)
    assert verdict(4, gm.shape == (1, 32, 16), f"stacked block-mean rows {gm.shape[1]} x {gm.shape[2]} channels "
                                               f"(expected 32 x 16)")


def test_criterion_5_branch_shape_law(verdict):
    spec = ModelSpec(variant="mfp2", levels=5, base_channels=16, image_size=64)
    params, w = build_model(spec)
    feats = encoder_levels(Tensor(np.random.default_rng(5).normal(size=(1, 1, 64, 64)).astype(np.float32)),
                           params, spec)
    checked, bad = 0, []
    for i in range(1, spec.levels):
        for k in range(0, spec.levels - i + 1):
            out = reuse_branch(feats[i - 1], i, k, params, spec).features
            C, H = w.encoder_widths[i], feats[i - 1].shape[2]
            checked += 1
            if out.shape[1:] != (C // 2, H // 2 ** k, H // 2 ** k):
                bad.append((i, k, out.shape))
    assert verdict(5, not bad and checked == 14, f"{checked} admissible (i, k) branches in a depth-5 build, "
                                                 f"shape-law violations: {bad or 'none'}")


def test_criterion_6_parameter_direction(verdict):
    counts = {}
    for v in ("unet", "mfp2"):
        params, _ = build_model(ModelSpec(variant=v, levels=5, base_channels=16))
        counts[v] = param_count(params)
    ok = counts["mfp2"] < counts["unet"]
    assert verdict(6, ok, f"mfp2 {counts['mfp2'] / 1e6:.3f} M < unet {counts['unet'] / 1e6:.3f} M "
                          f"at C1=16, depth 5")


def test_criterion_7_optimizer_exactness(verdict):
    def one(w, g, **kw):
        p, s = sgd_step({"w": np.array([w])}, {"w": np.array([g])}, OptimState(**kw))
        return p["w"][0], s

    errs = []
    w, _ = one(1.0, 0.5, lr=0.1, momentum=0.0, weight_decay=0.0)
    errs.append(abs(w - 0.95))
    w, s = one(1.0, 0.5, lr=0.1, momentum=0.0, weight_decay=0.001)
    errs += [abs(w - 0.9499), abs(s.buffers["w"][0] - 0.501)]
    state, p = OptimState(lr=0.1, momentum=0.9, weight_decay=0.0), {"w": np.array([0.0])}
    p, state = sgd_step(p, {"w": np.array([1.0])}, state)
    errs += [abs(state.buffers["w"][0] - 1.0), abs(p["w"][0] + 0.1)]
    p, state = sgd_step(p, {"w": np.array([1.0])}, state)
    errs += [abs(state.buffers["w"][0] - 1.9), abs(p["w"][0] + 0.29)]
    lrs = {e: lr_at(LrSchedule(), e) for e in (0, 200, 300, 399)}
    ok = max(errs) <= 1e-7 and lrs == {0: 0.01, 200: 0.001, 300: 0.0001, 399: 0.0001}
    assert verdict(7, ok, f"sgd examples max error {max(errs):.1e} (<= 1e-7); lr_at {lrs}")


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = TrainConfig(base_channels=8, batch_size=8, epochs=30, seed=0, threads=4)
    return desk_table(root / "data", root / "runs", config=cfg, cases=12, dims=(16, 64, 64))


def test_criterion_8_desk_scale_learning(verdict, desk):
    bica_run = desk.results["mfp-bica"]
    csv_text = desk.to_csv()
    rows = csv_text.strip().splitlines()
    print(csv_text)
    table_ok = (len(rows) == 6 and all("±" in r for r in rows[1:])
                and " t" in rows[0] and " p" in rows[0]
                and {r.split(",")[0] for r in rows[1:]} == {"unet", "unet-add", "mfp1", "mfp2", "mfp-bica"})
    dice, secs = bica_run.mean_dice, bica_run.train_seconds
    others = ", ".join(f"{v} {r.mean_dice:.3f}" for v, r in desk.results.items() if v != "mfp-bica")
    ok = dice >= 0.85 and secs <= 1800 and table_ok
    assert verdict(8, ok, f"mfp-bica held-out mean foreground Dice {dice:.3f} (>= 0.85) in {secs / 60:.1f} min "
                          f"(<= 30); table with t-tests: {table_ok}; others: {others}")


def test_criterion_9_determinism(verdict, tmp_path):
    assert cli_main(["gen-data", "--cases", "3", "--dims", "16x32x32", "--seed", "9", "--out", str(tmp_path / "d")]) == 0
    base = ["train", "--threads", "1", "--seed", "11", "--data", str(tmp_path / "d"), "--variant", "mfp-bica",
            "--set", "epochs=2", "--set", "levels=3", "--set", "base_channels=4"]
    assert cli_main(base + ["--out", str(tmp_path / "a"), "--set", "checkpoint_every=1"]) == 0
    assert cli_main(base + ["--out", str(tmp_path / "b")]) == 0
    assert cli_main(base + ["--out", str(tmp_path / "r"), "--resume", str(tmp_path / "a" / "epoch_001.ckpt")]) == 0
    same = lambda x, y, f: (tmp_path / x / f).read_bytes() == (tmp_path / y / f).read_bytes()  # noqa: E731
    rerun = all(same("a", "b", f) for f in ("last.ckpt", "best.ckpt", "train_log.csv"))
    resumed = all(same("a", "r", f) for f in ("last.ckpt", "train_log.csv"))
    assert verdict(9, rerun and resumed, f"rerun byte-identical: {rerun}; resume matches uninterrupted: {resumed}")


def test_criterion_10_statistics(verdict):
    same = paired_t_test([0.8, 0.9, 0.7], [0.8, 0.9, 0.7])
    d = [1.0, -1.0, 2.0, 0.0, 3.0]
    mean = sum(d) / 5
    sd = math.sqrt(sum((x - mean) ** 2 for x in d) / 4)
    textbook = mean / (sd / math.sqrt(5))
    t = paired_t_test(d, [0.0] * 5).t
    ok = (same.t, same.p) == (0.0, 1.0) and abs(t - textbook) <= 1e-6
    assert verdict(10, ok, f"identical inputs t={same.t}, p={same.p}; 5-element example t={t:.7f} "
                           f"vs textbook {textbook:.7f}")
