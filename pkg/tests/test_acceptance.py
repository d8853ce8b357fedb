"""Acceptance criteria, one test each, printing a single PASS/FAIL line per criterion.

Criteria 4 to 8 share trained desk-preset models through the session-scoped
``lab`` cache, so running the whole module costs much less than the sum of
its parts. Expect roughly half an hour on one core.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from helpers import max_rel_error, naive_matmul, numeric_grad, stratified_voronoi_weights
from popmap import nn
from popmap.baselines import BaselineHyper
from popmap.citygen import simulate_device_records
from popmap.cli import main
from popmap.config import DEFAULT_DROPOUT, desk_preset
from popmap.evaluation import (
    DEFAULT_PERIODS,
    FoldPlan,
    compute_metrics,
    locality_breakdown,
    recombine_mse,
    run_poi_ablation,
    run_segmented,
)
from popmap.experiments import (
    BaselinePipeline,
    SrcnnPipeline,
    build_world,
    diurnal_range_ratio,
    residential_cells,
    temporal_experiment,
)
from popmap.preprocess import activation_correct, aggregate, rasterize, voronoi_weights, zone_sums
from popmap.spatial import ALL_POIS
from popmap.temporal import TimeEmbedding, embed_hour
from popmap.tensor import Tensor

SEEDS = (0, 1, 2)
INSTANCES = 20
GRAD_TOL = 1e-4


def announce(capsys, n: int, title: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")


# -- shared desk-preset models -------------------------------------------------------


@dataclass
class Lab:
    worlds: dict = field(default_factory=dict)
    pipes: dict = field(default_factory=dict)
    temporal: dict = field(default_factory=dict)

    def cfg(self, seed):
        return desk_preset(seed)

    def world(self, seed):
        if seed not in self.worlds:
            self.worlds[seed] = build_world(self.cfg(seed))
        return self.worlds[seed]

    def split(self, seed, fold=0):
        truth = self.world(seed).truth
        plan = FoldPlan(truth.days, 5, seed)
        return truth.select(days=plan.train_days(fold)), truth.select(days=plan.test_days(fold))

    def srcnn(self, seed, fold=0, selected=ALL_POIS) -> SrcnnPipeline:
        """Fitted pipeline for (seed, fold, PoI subset); trained once per session."""
        key = (seed, fold, tuple(selected))
        if key not in self.pipes:
            pipe = SrcnnPipeline(self.world(seed), self.cfg(seed).srcnn, selected)
            pipe.fit(self.split(seed, fold)[0])
            self.pipes[key] = pipe
        return self.pipes[key]

    def temporal_outputs(self, seed):
        if seed not in self.temporal:
            train, test = self.split(seed)
            self.temporal[seed] = temporal_experiment(self.world(seed), self.srcnn(seed).model, train, test, self.cfg(seed).temporal)
        return self.temporal[seed]


@pytest.fixture(scope="session")
def lab():
    return Lab()


# -- 1. conservation -----------------------------------------------------------------


def test_criterion_1_conservation(capsys):
    start = time.perf_counter()
    cfg = desk_preset(0)
    world = build_world(cfg)
    city, truth = world.city, world.truth

    records = simulate_device_records(truth, city, DEFAULT_DROPOUT, 0)
    corrected, valid = activation_correct(records)
    totals = corrected.sum(axis=0)[valid]
    act = float(np.ptp(totals) / totals.max())

    weights = voronoi_weights(city.stations, city.mask)
    row = float(np.max(np.abs(np.asarray(weights.sum(axis=1)).ravel() - 1.0)))

    frames = rasterize(corrected, weights, city.mask.shape)
    ras = float(np.max(np.abs(frames.sum(axis=(1, 2)) - corrected.sum(axis=0)) / corrected.sum(axis=0)))

    eq1 = 0.0
    for zones in world.ladder:
        agg = aggregate(truth.frames, zones)
        got, want = zone_sums(agg, zones), zone_sums(truth.frames, zones)
        eq1 = max(eq1, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300))))
    wall = time.perf_counter() - start

    ok = act < 1e-9 and row < 1e-9 and ras < 1e-9 and eq1 < 1e-9 and wall < 30
    detail = f"activation {act:.1e}, voronoi rows {row:.1e}, raster {ras:.1e}, zone sums {eq1:.1e}, {wall:.1f}s"
    announce(capsys, 1, "conservation", ok, detail)
    assert ok, detail


# -- 2. gradients --------------------------------------------------------------------


def _p(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def _check(build, params) -> float:
    """Worst relative error of every parameter gradient of scalar ``build()``."""
    for t in params:
        t.grad = None
    build().backward()
    worst = 0.0
    for t in params:
        analytic = t.grad.copy()
        num = numeric_grad(lambda: float(build().data), t.data)
        worst = max(worst, max_rel_error(analytic, num))
    return worst


def _grad_conv(rng):
    x, w, b = _p(rng.normal(size=(1, 4, 4))), _p(rng.normal(size=(2, 1, 3, 3))), _p(rng.normal(size=2))
    proj = rng.normal(size=(2, 4, 4))
    return _check(lambda: (nn.conv2d(x, w, b) * proj).sum(), [x, w, b])


def _grad_batchnorm(rng):
    x = _p(rng.normal(size=(2, 3, 4, 4)))
    g, b = _p(rng.uniform(0.5, 1.5, 3)), _p(rng.normal(size=3))
    target = rng.normal(size=(2, 3, 4, 4))
    return _check(lambda: nn.mse_loss(nn.batchnorm2d(x, g, b), Tensor(target)), [x, g, b])


def _grad_linear(rng):
    x, w, b = _p(rng.normal(size=(3, 4))), _p(rng.normal(size=(2, 4))), _p(rng.normal(size=2))
    proj = rng.normal(size=(3, 2))
    return _check(lambda: (nn.linear(x, w, b) * proj).sum(), [x, w, b])


def _grad_lstm(rng):
    f, h = 2, 3
    xs = [_p(rng.normal(size=f)) for _ in range(3)]
    w, b = _p(rng.normal(0, 0.5, size=(f + h, 4 * h))), _p(rng.normal(0, 0.5, size=4 * h))
    h0, c0 = _p(rng.normal(size=h)), _p(rng.normal(size=h))
    proj = rng.normal(size=h)

    def build():
        hh, cc = h0, c0
        for x in xs:
            hh, cc = nn.lstm_cell(x, hh, cc, w, b)
        return (hh * proj).sum() + (cc * proj).sum()

    return _check(build, [w, b, h0, c0, *xs])


def _grad_mse(rng):
    pred = _p(rng.normal(size=(3, 5)))
    target = rng.normal(size=(3, 5))
    worst = _check(lambda: nn.mse_loss(pred, Tensor(target)), [pred])
    # closed form 2 (pred - target) / n
    pred.grad = None
    nn.mse_loss(pred, Tensor(target)).backward()
    closed = 2 * (pred.data - target) / target.size
    return max(worst, max_rel_error(pred.grad, closed))


def _grad_embedding(rng):
    emb = TimeEmbedding(5, rng)
    hour = int(rng.integers(24))
    proj = rng.normal(size=5)
    return _check(lambda: (embed_hour(emb, hour) * proj).sum(), [emb.table])


GRAD_CASES = {
    "conv2d": _grad_conv,
    "batchnorm2d": _grad_batchnorm,
    "linear": _grad_linear,
    "lstm_cell": _grad_lstm,
    "mse_loss": _grad_mse,
    "embedding": _grad_embedding,
}


def test_criterion_2_gradients(capsys):
    start = time.perf_counter()
    worst = {}
    for k, (name, case) in enumerate(GRAD_CASES.items()):
        rng = np.random.default_rng(k)
        worst[name] = max(case(rng) for _ in range(INSTANCES))
    wall = time.perf_counter() - start
    ok = all(v < GRAD_TOL for v in worst.values()) and wall < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" ({INSTANCES} instances each, {wall:.1f}s)"
    announce(capsys, 2, "gradient suite", ok, detail)
    assert ok, detail


# -- 3. oracles ----------------------------------------------------------------------


def _direct_rmse_corr(p, t):
    n = len(t)
    se = sum((a - b) ** 2 for a, b in zip(p, t))
    mp, mt = sum(p) / n, sum(t) / n
    cov = sum((a - mp) * (b - mt) for a, b in zip(p, t))
    vp = sum((a - mp) ** 2 for a in p)
    vt = sum((b - mt) ** 2 for b in t)
    return math.sqrt(se / n), cov / math.sqrt(vp * vt), sum(abs(a - b) for a, b in zip(p, t)) / n


def test_criterion_3_oracles(capsys):
    vor = 0.0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        mask = rng.uniform(size=(10, 12)) < 0.85
        cells = np.argwhere(mask)
        pick = cells[rng.choice(len(cells), 8, replace=False)]
        stations = np.column_stack([pick[:, 1] + rng.uniform(0, 1, 8), pick[:, 0] + rng.uniform(0, 1, 8)])
        exact = voronoi_weights(stations, mask).toarray().reshape(8, *mask.shape)
        mc = stratified_voronoi_weights(stations, mask, samples=1_000_000, seed=seed)
        vor = max(vor, float(np.max(np.abs(exact - mc))))

    lin = 0.0
    rng = np.random.default_rng(7)
    for _ in range(INSTANCES):
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)
        ref = naive_matmul(x.tolist(), w.T.tolist()) + b
        lin = max(lin, float(np.max(np.abs(nn.linear(Tensor(x), Tensor(w), Tensor(b)).data - ref))))

    met = 0.0
    for _ in range(INSTANCES):
        t = rng.gamma(2.0, 50.0, size=(3, 5, 5))
        p = t + rng.normal(0, 10, size=t.shape)
        r = compute_metrics(p, t)
        rmse, corr, mae = _direct_rmse_corr(list(p.ravel()), list(t.ravel()))
        met = max(met, abs(r.rmse - rmse) / rmse, abs(r.corr - corr), abs(r.mae - mae) / mae, abs(r.nrmse - rmse / t.mean()) / r.nrmse)

    world = build_world(desk_preset(0))
    truth = world.truth.select(days=[0])
    pred = truth.with_frames(truth.frames * rng.uniform(0.6, 1.4, size=truth.frames.shape))
    mse = compute_metrics(pred, truth).rmse ** 2
    rec = max(abs(recombine_mse(c["bins"]) - mse) / mse for c in locality_breakdown(pred, truth, world.city).values())

    ok = vor < 1e-3 and lin < 1e-12 and met < 1e-12 and rec < 1e-9
    detail = f"voronoi vs MC {vor:.1e} (5 layouts), linear vs naive {lin:.1e}, metrics vs direct {met:.1e}, bin recombination {rec:.1e}"
    announce(capsys, 3, "oracle equivalence", ok, detail)
    assert ok, detail


# -- 4. method ordering -------------------------------------------------------------


def test_criterion_4_method_ordering(lab, capsys):
    start = time.perf_counter()
    rmse = {m: [] for m in ("srcnn", "forest", "tree", "lasso")}
    for seed in SEEDS:
        world = lab.world(seed)
        plan = FoldPlan(world.truth.days, 5, seed)
        hp = BaselineHyper(seed=seed)
        for fold in range(5):
            _, test = lab.split(seed, fold)
            rmse["srcnn"].append(compute_metrics(lab.srcnn(seed, fold).predict(test), test).rmse)
            train = world.truth.select(days=plan.train_days(fold))
            for method in ("forest", "tree", "lasso"):
                rmse[method].append(compute_metrics(BaselinePipeline(world, method, hp)(train, test), test).rmse)
    wall = time.perf_counter() - start
    means = {m: float(np.mean(v)) for m, v in rmse.items()}
    ordered = means["srcnn"] < means["forest"] < means["tree"] < means["lasso"]
    ok = ordered and wall < 20 * 60
    detail = ", ".join(f"{m} {v:.2f}" for m, v in means.items()) + f" (mean RMSE, 3 seeds x 5 folds, {wall / 60:.1f} min)"
    announce(capsys, 4, "static SRCNN < forest < tree < lasso", ok, detail)
    assert ok, detail


# -- 5. temporal ordering -------------------------------------------------------------


def test_criterion_5_temporal_ordering(lab, capsys):
    votes, parts = 0, []
    for seed in SEEDS:
        _, test = lab.split(seed)
        out = lab.temporal_outputs(seed)
        n = {k: compute_metrics(getattr(out, k), test).nrmse for k in ("static", "flat", "time")}
        cut = 1 - n["time"] / n["static"]
        win = n["time"] < n["flat"] < n["static"] and cut >= 0.05
        votes += win
        parts.append(f"seed {seed}: {n['static']:.4f}/{n['flat']:.4f}/{n['time']:.4f} (-{100 * cut:.1f}%)")
    ok = votes * 2 > len(SEEDS)
    detail = f"{votes}/{len(SEEDS)} seeds; static/flat/time NRMSE " + "; ".join(parts)
    announce(capsys, 5, "time-embedded < flat LSTM < static", ok, detail)
    assert ok, detail


# -- 6. PoI ablation -----------------------------------------------------------------


def test_criterion_6_poi_ablation(lab, capsys):
    none, full = [], []
    for seed in SEEDS:
        _, test = lab.split(seed)
        reports = run_poi_ablation(lambda s, seed=seed: (lambda tr, te: lab.srcnn(seed, 0, s).predict(te)), None, test, [(), ALL_POIS])
        none.append(reports["{}"].rmse)
        full.append(reports["{1,2,3,4}"].rmse)
    ok = np.mean(full) <= np.mean(none)
    detail = f"mean RMSE all PoIs {np.mean(full):.2f} vs none {np.mean(none):.2f} (per seed {np.round(full, 2).tolist()} vs {np.round(none, 2).tolist()})"
    announce(capsys, 6, "all PoIs <= no PoIs", ok, detail)
    assert ok, detail


# -- 7. segmented models -------------------------------------------------------------


def test_criterion_7_segmented(lab, capsys):
    seg = np.zeros((len(SEEDS), len(DEFAULT_PERIODS)))
    full = np.zeros_like(seg)
    for i, seed in enumerate(SEEDS):
        train, test = lab.split(seed)
        overall = lab.srcnn(seed).predict(test)
        pipe = SrcnnPipeline(lab.world(seed), lab.cfg(seed).srcnn)
        for j, row in enumerate(run_segmented(pipe, train, test, DEFAULT_PERIODS, overall=overall)):
            seg[i, j], full[i, j] = row["segmented"].rmse, row["overall"].rmse
    s, f = seg.mean(axis=0), full.mean(axis=0)
    wins = int(np.sum(s <= f))
    ok = wins >= 2
    detail = f"{wins}/3 periods; mean RMSE segmented {np.round(s, 2).tolist()} vs all-hours {np.round(f, 2).tolist()}"
    announce(capsys, 7, "segmented <= all-hours per period", ok, detail)
    assert ok, detail


# -- 8. residential diurnal range ----------------------------------------------------


def test_criterion_8_diurnal_range(lab, capsys):
    ratios, parts = [], []
    for seed in SEEDS:
        _, test = lab.split(seed)
        out = lab.temporal_outputs(seed)
        cells = residential_cells(lab.world(seed))
        r_static = diurnal_range_ratio(out.static, test, cells)
        r_time = diurnal_range_ratio(out.time, test, cells)
        ratios.append(r_time / r_static)
        parts.append(f"seed {seed}: static {r_static:.3f}, smoothed {r_time:.3f}")
    votes = sum(r >= 3 for r in ratios)
    ok = votes * 2 > len(SEEDS)
    detail = f"smoothed/static range ratio {np.round(ratios, 3).tolist()} (need >= 3); " + "; ".join(parts)
    announce(capsys, 8, "residential diurnal range contrast", ok, detail)
    assert ok, detail


# -- 9. determinism ------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path, capsys):
    start = time.perf_counter()
    for name in ("a", "b"):
        assert main(["pipeline", "--preset", "desk", "--out", str(tmp_path / name)]) == 0
    files = ("metrics.csv", "temporal.csv", "locality.csv")
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files}
    ok = all(same.values())
    detail = ", ".join(f"{f} {'identical' if v else 'DIFFERS'}" for f, v in same.items()) + f" ({(time.perf_counter() - start) / 60:.1f} min for two runs)"
    announce(capsys, 9, "byte-identical desk pipeline metrics", ok, detail)
    assert ok, detail
