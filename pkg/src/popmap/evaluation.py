"""Metrics, day-based cross-validation and the experiment battery.

NRMSE is RMSE divided by the mean ground truth over the evaluation mask.
Correlation is pooled over every (cell, frame) pair rather than averaged per
frame.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from popmap.citygen import CityModel, FunctionClass, POICategory
from popmap.errors import InputError, ShapeError
from popmap.preprocess import PopCube

logger = logging.getLogger(__name__)

DEFAULT_PERIODS: tuple[tuple[int, int], ...] = ((0, 7), (7, 17), (17, 24))
METRIC_COLUMNS = ("RMSE", "NRMSE", "Corr", "MAE")


@dataclass
class MetricReport:
    rmse: float
    nrmse: float
    corr: float
    mae: float
    n: int
    corr_defined: bool = True
    scope: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {**self.scope, "RMSE": self.rmse, "NRMSE": self.nrmse, "Corr": self.corr, "MAE": self.mae}


def _values(x, mask):
    frames = x.frames if isinstance(x, PopCube) else np.asarray(x, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    return frames[:, mask]


def compute_metrics(pred, truth, mask: np.ndarray | None = None, scope: dict | None = None) -> MetricReport:
    """Metric trio plus MAE over masked cells of every frame.

    ``pred``/``truth`` are cubes or ``(T, H, W)`` / ``(H, W)`` arrays. A
    constant truth leaves the correlation undefined: it is reported as NaN
    with ``corr_defined`` False.
    """
    if mask is None:
        mask = truth.mask if isinstance(truth, PopCube) else np.ones(np.shape(truth)[-2:], bool)
    p, t = _values(pred, mask).ravel(), _values(truth, mask).ravel()
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} vs truth {t.shape}")
    if t.size == 0:
        raise InputError("empty evaluation mask")
    err = p - t
    rmse = float(np.sqrt(np.mean(err**2)))
    mean = float(t.mean())
    nrmse = rmse / mean if mean != 0 else float("nan")
    defined = bool(np.ptp(t) > 0 and np.ptp(p) > 0)
    corr = float(np.corrcoef(p, t)[0, 1]) if defined else float("nan")
    if not defined:
        logger.warning("correlation undefined (constant series); reported as NaN")
    return MetricReport(rmse, nrmse, corr, float(np.mean(np.abs(err))), int(t.size), defined, dict(scope or {}))


def mean_report(reports: Sequence[MetricReport], scope: dict | None = None) -> MetricReport:
    return MetricReport(
        float(np.mean([r.rmse for r in reports])),
        float(np.mean([r.nrmse for r in reports])),
        float(np.mean([r.corr for r in reports])),
        float(np.mean([r.mae for r in reports])),
        int(sum(r.n for r in reports)),
        all(r.corr_defined for r in reports),
        dict(scope or {}),
    )


# -- folds ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    """Days split into disjoint folds by a seeded permutation of the sorted day list."""

    days: Sequence[int]
    n_folds: int = 5
    seed: int = 0
    folds: list[list[int]] = field(init=False)

    def __post_init__(self):
        days = sorted(set(int(d) for d in self.days))
        if len(days) < self.n_folds:
            raise InputError(f"{self.n_folds}-fold CV needs at least {self.n_folds} days, got {len(days)}")
        order = np.random.default_rng(self.seed).permutation(days)
        self.folds = [sorted(int(d) for d in part) for part in np.array_split(order, self.n_folds)]

    def test_days(self, k: int) -> list[int]:
        return self.folds[k]

    def train_days(self, k: int) -> list[int]:
        return sorted(d for i, f in enumerate(self.folds) if i != k for d in f)


Pipeline = Callable[[PopCube, PopCube], PopCube]


@dataclass
class CVResult:
    folds: list[MetricReport]
    mean: MetricReport


def run_cv(pipeline: Pipeline, truth: PopCube, plan: FoldPlan, folds: Iterable[int] | None = None) -> CVResult:
    """Train on the other folds' days and score the held-out days, fold by fold.

    ``pipeline(train_truth, test_truth)`` must return a prediction cube
    aligned with ``test_truth``; it may only use ``test_truth`` for its
    coarse aggregates.
    """
    reports = []
    for k in folds if folds is not None else range(plan.n_folds):
        train = truth.select(days=plan.train_days(k))
        test = truth.select(days=plan.test_days(k))
        reports.append(compute_metrics(pipeline(train, test), test, scope={"fold": k}))
    return CVResult(reports, mean_report(reports, {"fold": "mean"}))


def check_periods(periods: Sequence[tuple[int, int]]) -> None:
    hours = [h for a, b in periods for h in range(a, b)]
    if sorted(hours) != list(range(24)) or len(hours) != len(set(hours)):
        raise InputError(f"periods {list(periods)} must cover every hour exactly once")


def period_hours(period: tuple[int, int]) -> list[int]:
    return list(range(period[0], period[1]))


def run_segmented(
    pipeline: Pipeline,
    train: PopCube,
    test: PopCube,
    periods: Sequence[tuple[int, int]] = DEFAULT_PERIODS,
    overall: PopCube | None = None,
) -> list[dict]:
    """One model per period against the all-hours model restricted to that period.

    ``overall`` may carry an existing all-hours prediction for ``test``.
    """
    check_periods(periods)
    if overall is None:
        overall = pipeline(train, test)
    rows = []
    for k, period in enumerate(periods):
        hours = period_hours(period)
        sel = np.isin(test.hours, hours)
        test_p = test.select(hours=hours)
        seg = compute_metrics(pipeline(train.select(hours=hours), test_p), test_p)
        full = compute_metrics(overall.frames[sel], test_p.frames, test.mask)
        rows.append({"period": k + 1, "hours": hours, "segmented": seg, "overall": full})
    return rows


def poi_subsets() -> list[tuple[int, ...]]:
    cats = [int(c) for c in POICategory]
    return [s for r in range(len(cats) + 1) for s in itertools.combinations(cats, r)]


def subset_signature(subset: Sequence[int]) -> str:
    """``{1,4}`` style label, categories numbered from 1."""
    return "{" + ",".join(str(c + 1) for c in sorted(subset)) + "}"


def run_poi_ablation(
    make_pipeline: Callable[[tuple[int, ...]], Pipeline],
    train: PopCube,
    test: PopCube,
    subsets: Sequence[Sequence[int]] | None = None,
) -> dict[str, MetricReport]:
    subsets = [tuple(sorted(s)) for s in (subsets if subsets is not None else poi_subsets())]
    if len(set(subsets)) != len(subsets):
        raise InputError("PoI subsets must be distinct")
    full = tuple(int(c) for c in POICategory)
    for must in ((), full):
        if must not in subsets:
            subsets.append(must)
    out = {}
    for s in subsets:
        out[subset_signature(s)] = compute_metrics(make_pipeline(s)(train, test), test, scope={"pois": subset_signature(s)})
    return out


# -- locality ------------------------------------------------------------------------


@dataclass
class Bin:
    label: str
    count: int
    rmse: float


def _binned(err2: np.ndarray, keys: np.ndarray, labels: dict) -> tuple[list[Bin], list[str]]:
    bins, empty = [], []
    for key, label in labels.items():
        sel = keys == key
        n = int(sel.sum())
        if n == 0:
            empty.append(label)
            continue
        bins.append(Bin(label, n, float(np.sqrt(err2[sel].mean()))))
    return bins, empty


def locality_breakdown(pred: PopCube, truth: PopCube, city: CityModel, n_deciles: int = 10) -> dict:
    """Per-bin RMSE by distance to downtown, local PoI count decile and function class.

    Counts are cells x frames, so ``sum(count * rmse^2) / sum(count)`` equals
    the global MSE. Bins with no cells are omitted and listed under ``empty``.
    """
    mask = truth.mask
    err2 = ((pred.frames - truth.frames) ** 2)[:, mask]  # (T, n)
    t = err2.shape[0]
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cr, cc = city.downtown_center
    dist = np.floor(np.hypot(yy - cr, xx - cc))[mask].astype(int)
    pois = city.poi_grid().counts.sum(axis=0)[mask]
    edges = np.unique(np.quantile(pois, np.linspace(0, 1, n_deciles + 1)))
    decile = np.clip(np.searchsorted(edges, pois, side="right") - 1, 0, max(len(edges) - 2, 0))
    fclass = city.function_class[mask]
    flat = err2.ravel()
    rep = lambda a: np.tile(a, t)
    out = {}
    for name, keys, labels in (
        ("distance", dist, {d: str(d) for d in range(int(dist.max()) + 1)}),
        ("poi_decile", decile, {k: f"{edges[k]:g}-{edges[min(k + 1, len(edges) - 1)]:g}" for k in range(max(len(edges) - 1, 1))}),
        ("function", fclass, {int(c): c.name.lower() for c in FunctionClass}),
    ):
        bins, empty = _binned(flat, rep(keys), labels)
        out[name] = {"bins": bins, "empty": empty}
    return out


def recombine_mse(bins: Sequence[Bin]) -> float:
    return sum(b.count * b.rmse**2 for b in bins) / sum(b.count for b in bins)


# -- report files ----------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else f"{float(v):.10g}"
    return str(v)


def write_report_csv(path: str | Path, rows: Sequence[dict]) -> None:
    """Rows sorted by nothing, formatted deterministically; columns from the first row."""
    if not rows:
        raise InputError("no rows to write")
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])


def format_table(rows: Sequence[dict], keys: Sequence[str], metrics: Sequence[str] = METRIC_COLUMNS) -> str:
    header = list(keys) + list(metrics)
    body = [[_fmt(r[k]) for k in keys] + [f"{r[m]:.4f}" if isinstance(r[m], float) else str(r[m]) for m in metrics] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.rjust(wd) for c, wd in zip(cells, widths))
    rule = "-" * len(line(header))
    return "\n".join([line(header), rule, *map(line, body)])
