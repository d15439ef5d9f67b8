"""Desk-scale comparison of every variant on one generated phantom dataset."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import ORGANS, MetricReport, aggregate_report, paired_t_test
from .model import VARIANTS, build_model, param_count
from .phantom import generate_dataset, read_manifest
from .trainer import TrainConfig, TrainLog, case_predictions, load_checkpoint, train

log = logging.getLogger(__name__)


@dataclass
class VariantResult:
    variant: str
    params: int
    train_seconds: float
    log: TrainLog
    report: MetricReport
    cases: list[dict] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return self.report.average.dsc_mean


@dataclass
class DeskTable:
    baseline: str
    results: dict[str, VariantResult]

    def to_csv(self) -> str:
        """One row per variant: params, per-organ DSC "mean ± SD", average, paired t-test vs the baseline."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["variant", "params"]
        for organ in ORGANS:
            header += [f"{organ} dsc", f"{organ} t", f"{organ} p"]
        header += ["average dsc", "average t", "average p", "train_seconds"]
        w.writerow(header)
        base = self.results.get(self.baseline)
        for name, r in self.results.items():
            row = [name, r.params]
            for idx, organ in enumerate(ORGANS, 1):
                o = r.report.row(organ)
                t, p = self._ttest(r, base, lambda c: c[idx][0])
                row += [f"{o.dsc_mean:.4f} ± {o.dsc_sd:.4f}", t, p]
            a = r.report.average
            t, p = self._ttest(r, base, lambda c: float(np.mean([c[i][0] for i in range(1, len(ORGANS) + 1)])))
            row += [f"{a.dsc_mean:.4f} ± {a.dsc_sd:.4f}", t, p, f"{r.train_seconds:.1f}"]
            w.writerow(row)
        return buf.getvalue()

    def _ttest(self, r: VariantResult, base: VariantResult | None, score) -> tuple[str, str]:
        if base is None or r is base or len(r.cases) < 2:
            return "", ""
        tt = paired_t_test([score(c) for c in r.cases], [score(c) for c in base.cases])
        return f"{tt.t:.4g}", f"{tt.p:.4g}"


def ensure_dataset(data_dir, cases: int = 12, dims=(16, 64, 64), seed: int = 0) -> dict[str, list[str]]:
    manifest = Path(data_dir) / "manifest.csv"
    if manifest.exists():
        return read_manifest(manifest)
    return generate_dataset(data_dir, cases, dims=dims, seed=seed)


def run_variant(cfg: TrainConfig) -> VariantResult:
    t0 = time.perf_counter()
    ck, tlog = train(cfg)
    seconds = time.perf_counter() - t0
    best = load_checkpoint(Path(cfg.out_dir) / "best.ckpt")
    ids = read_manifest(Path(cfg.data_dir) / "manifest.csv")["test"]
    cases = case_predictions(best, cfg.data_dir, ids)
    params, _ = build_model(best.spec)
    return VariantResult(cfg.variant, param_count(params), seconds, tlog, aggregate_report(cases), cases)


def desk_table(data_dir, out_dir, variants: Sequence[str] = VARIANTS, baseline: str = "unet",
               config: TrainConfig | None = None, cases: int = 12, dims=(16, 64, 64)) -> DeskTable:
    """Train each variant with the same config and seed, then tabulate held-out results.

    Results land in ``out_dir/<variant>/`` and ``out_dir/table.csv``.
    """
    cfg = config or TrainConfig()
    ensure_dataset(data_dir, cases, dims, cfg.seed)
    out = Path(out_dir)
    results = {}
    for v in variants:
        log.info("training %s", v)
        results[v] = run_variant(replace(cfg, data_dir=str(data_dir), out_dir=str(out / v), variant=v))
    table = DeskTable(baseline, results)
    (out / "table.csv").write_text(table.to_csv())
    return table
