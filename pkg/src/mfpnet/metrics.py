"""Volumetric Dice, mean surface distance, paired t-test and report tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage, special
from scipy.spatial import cKDTree

from .errors import ContractError, ShapeError

ORGANS = ("anal canal", "bladder", "rectum", "femoral head (left)", "femoral head (right)")

# below this many point pairs MSD uses the dense distance matrix
_BRUTE_FORCE_PAIRS = 4_000_000


@dataclass
class LabelVolume:
    """Integer labels on a (D, H, W) grid with physical spacing in mm."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ShapeError(f"label volume must be 3-d, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ContractError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def mask(self, organ: int) -> np.ndarray:
        return self.voxels == organ


def _as_volume(v) -> LabelVolume:
    return v if isinstance(v, LabelVolume) else LabelVolume(v)


def _pair(pred, truth) -> tuple[LabelVolume, LabelVolume]:
    pred, truth = _as_volume(pred), _as_volume(truth)
    if pred.dims != truth.dims:
        raise ShapeError(f"volume dims differ: {pred.dims} vs {truth.dims}")
    return pred, truth


def dice_volumetric(pred, truth, organ: int) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    pred, truth = _pair(pred, truth)
    a, b = pred.mask(organ), truth.mask(organ)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


_SIX_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


def extract_surface(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Physical (mm) coordinates of foreground voxels with a background 6-neighbor.

    Voxels on the array border count as touching background.
    """
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_SIX_NEIGHBORS, border_value=0)
    idx = np.argwhere(mask & ~interior)
    return idx * np.asarray(spacing, dtype=np.float64)


def _min_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    if len(src) * len(dst) <= _BRUTE_FORCE_PAIRS:
        d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=-1)
        return np.sqrt(d2.min(axis=1))
    return cKDTree(dst).query(src, k=1)[0]


def msd(pred, truth, organ: int) -> float | None:
    """Symmetric mean surface distance in mm; None when either surface is empty."""
    pred, truth = _pair(pred, truth)
    if not np.allclose(pred.spacing, truth.spacing):
        raise ContractError(f"spacing differs: {pred.spacing} vs {truth.spacing}")
    sa = extract_surface(pred.mask(organ), pred.spacing)
    sb = extract_surface(truth.mask(organ), truth.spacing)
    if len(sa) == 0 or len(sb) == 0:
        return None
    total = _min_distances(sa, sb).sum() + _min_distances(sb, sa).sum()
    return float(total / (len(sa) + len(sb)))


@dataclass(frozen=True)
class TTest:
    t: float
    p: float
    n: int
    degenerate: bool = False


def paired_t_test(xs: Sequence[float], ys: Sequence[float]) -> TTest:
    """Two-sided paired t-test; p via the regularized incomplete beta function."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"paired samples must have equal 1-d lengths, got {x.shape} and {y.shape}")
    n = x.size
    if n < 2:
        raise ContractError("paired t-test needs at least 2 pairs")
    d = x - y
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTest(0.0, 1.0, n)
        return TTest(math.copysign(math.inf, mean), 0.0, n, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    dof = n - 1
    p = float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return TTest(float(t), p, n)


# ---------------------------------------------------------------------------
# reports


@dataclass
class OrganRow:
    organ: str
    dsc_mean: float
    dsc_sd: float
    msd_mean: float | None
    msd_sd: float | None
    msd_excluded: int
    cases: int
    dsc_t: float | None = None
    dsc_p: float | None = None
    msd_t: float | None = None
    msd_p: float | None = None


@dataclass
class MetricReport:
    rows: list[OrganRow]
    average: OrganRow
    per_case: list[dict] = field(default_factory=list)

    FIELDS = ("organ", "cases", "dsc_mean", "dsc_sd", "msd_mean", "msd_sd", "msd_excluded",
              "dsc_t", "dsc_p", "msd_t", "msd_p")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        for row in self.rows + [self.average]:
            w.writerow([_fmt(getattr(row, f)) for f in self.FIELDS])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def row(self, organ: str) -> OrganRow:
        for r in self.rows:
            if r.organ == organ:
                return r
        raise KeyError(organ)


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _mean_sd(values: list[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def case_metrics(pred, truth, organs: Sequence[int] = (1, 2, 3, 4, 5)) -> dict[int, tuple[float, float | None]]:
    """Per-organ (dice, msd) for one case."""
    return {o: (dice_volumetric(pred, truth, o), msd(pred, truth, o)) for o in organs}


def aggregate_report(cases: Sequence[Mapping[int, tuple[float, float | None]]],
                     names: Sequence[str] = ORGANS,
                     baseline: Sequence[Mapping[int, tuple[float, float | None]]] | None = None) -> MetricReport:
    """Means and population SDs per organ plus an average row.

    ``cases`` holds one mapping organ id -> (dice, msd or None) per case, organ
    ids 1.. in ``names`` order. Undefined MSD values are excluded from the means
    and counted. With ``baseline`` (same cases, same order) each row carries a
    paired t-test of this report against it.
    """
    if not cases:
        raise ContractError("aggregate_report needs at least one case")
    if baseline is not None and len(baseline) != len(cases):
        raise ContractError("baseline must cover the same cases")
    rows = []
    for idx, name in enumerate(names, 1):
        dsc = [c[idx][0] for c in cases]
        msds = [c[idx][1] for c in cases if c[idx][1] is not None]
        dm, ds = _mean_sd(dsc)
        mm, ms = _mean_sd(msds) if msds else (None, None)
        row = OrganRow(name, dm, ds, mm, ms, len(cases) - len(msds), len(cases))
        if baseline is not None and len(cases) >= 2:
            tt = paired_t_test(dsc, [b[idx][0] for b in baseline])
            row.dsc_t, row.dsc_p = tt.t, tt.p
            pairs = [(c[idx][1], b[idx][1]) for c, b in zip(cases, baseline)
                     if c[idx][1] is not None and b[idx][1] is not None]
            if len(pairs) >= 2:
                tm = paired_t_test([a for a, _ in pairs], [b for _, b in pairs])
                row.msd_t, row.msd_p = tm.t, tm.p
        rows.append(row)
    case_avg_dsc = [float(np.mean([c[i][0] for i in range(1, len(names) + 1)])) for c in cases]
    defined = [r.msd_mean for r in rows if r.msd_mean is not None]
    avg = OrganRow("average", float(np.mean([r.dsc_mean for r in rows])), float(np.std(case_avg_dsc)),
                   float(np.mean(defined)) if defined else None, None,
                   sum(r.msd_excluded for r in rows), len(cases))
    if baseline is not None and len(cases) >= 2:
        base_avg = [float(np.mean([b[i][0] for i in range(1, len(names) + 1)])) for b in baseline]
        tt = paired_t_test(case_avg_dsc, base_avg)
        avg.dsc_t, avg.dsc_p = tt.t, tt.p
    per_case = [{names[i - 1]: c[i] for i in range(1, len(names) + 1)} for c in cases]
    return MetricReport(rows, avg, per_case)
