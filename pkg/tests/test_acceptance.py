"""Acceptance criteria, one test each.

Each test prints a single ``[Cn] PASS|FAIL ...`` line. The lines are also
collected and shown in an "acceptance criteria" section at the end of the run.
"""
import time

import numpy as np
import pytest

from gwskit.cv import (ExperimentData, PredictorSpec, audit_leakage, holdout_count, run_experiment,
                       spatial_split, temporal_folds)
from gwskit.geo import GeoPoint, MaskedGrid, coords_xy
from gwskit.kriging import LocalMode, build_system, idw, kriging_weights, krige_targets
from gwskit.metrics import CompositeLossConfig, composite_loss, masked_mse, r2
from gwskit.models import make_predictor
from gwskit.pipeline.cli import main
from gwskit.synthetic import make_dataset
from gwskit.variogram import (FAMILIES, EmpiricalVariogram, VariogramModel, empirical_variogram,
                              fit, gamma)
from conftest import VERDICTS
from oracles.brute import ok_weights_dense, variogram_all_pairs
from oracles.fd import max_rel_error, numeric_grads, random_case


def verdict(n, ok, detail):
    line = f"[C{n}] {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, detail


def _points(xy):
    return [GeoPoint(f"S{i:03d}", 90.0, 23.0, float(x), float(y)) for i, (x, y) in enumerate(xy)]


def test_c1_kriging_exact_and_unbiased():
    t0 = time.perf_counter()
    worst_sum = worst_exact = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 101))
        xy = r.uniform(0, 200_000, (n, 2))
        model = VariogramModel(FAMILIES[seed % 3], 0.0, float(r.uniform(0.5, 2)), float(r.uniform(2e4, 8e4)))
        sys_ = build_system(_points(xy), model)
        targets = np.vstack([xy, r.uniform(0, 200_000, (20, 2))])
        w, _, _ = kriging_weights(sys_, targets)
        z = r.normal(size=n)
        worst_sum = max(worst_sum, float(np.max(np.abs(w.sum(axis=1) - 1.0))))
        worst_exact = max(worst_exact, float(np.max(np.abs(w[:n] @ z - z))))
    elapsed = time.perf_counter() - t0
    verdict(1, worst_sum < 1e-9 and worst_exact < 1e-8 and elapsed < 10,
            f"max |sum w - 1| = {worst_sum:.2e}, max station error = {worst_exact:.2e}, {elapsed:.2f}s")


def test_c2_solver_matches_dense_and_local_matches_global():
    model = VariogramModel("spherical", 0.1, 0.9, 40_000.0)
    worst = 0.0
    for n in (5, 20, 100):
        r = np.random.default_rng(n)
        xy = r.uniform(0, 100_000, (n, 2))
        targets = r.uniform(0, 100_000, (10, 2))
        sys_ = build_system(_points(xy), model)
        w, _, _ = kriging_weights(sys_, targets)
        for k, (w_ref, _, _) in enumerate(ok_weights_dense(xy, targets, model)):
            worst = max(worst, float(np.max(np.abs(w[k] - w_ref)) / np.max(np.abs(w_ref))))
    r = np.random.default_rng(0)
    xy = r.uniform(0, 100_000, (40, 2))
    z = r.normal(size=(3, 40))
    tg = r.uniform(0, 100_000, (15, 2))
    g, gv = krige_targets(build_system(_points(xy), model), z, tg)
    lo, lv = krige_targets(build_system(_points(xy), model, LocalMode(40, float("inf"))), z, tg)
    local_gap = float(max(np.max(np.abs(g - lo)), np.max(np.abs(gv - lv))))
    verdict(2, worst < 1e-8 and local_gap < 1e-8,
            f"max rel weight diff vs dense = {worst:.2e}, local vs global = {local_gap:.2e}")


def test_c3_variogram_round_trip_and_brute_force():
    errs = {}
    for fam in FAMILIES:
        truth = VariogramModel(fam, 0.1, 0.9, 500.0)
        h = np.linspace(50.0, 2000.0, 40)
        got = fit(EmpiricalVariogram(h, gamma(truth, h), np.full(40, 100)), fam)
        errs[fam] = max(abs(got.nugget / 0.1 - 1), abs(got.partial_sill / 0.9 - 1), abs(got.range / 500 - 1))
    exact = True
    for n in (10, 50, 200):
        r = np.random.default_rng(n)
        xy, z = r.uniform(0, 5e4, (n, 2)), r.normal(size=(4, n))
        a, b = empirical_variogram(xy, z, 12), variogram_all_pairs(xy, z, 12)
        exact &= all(np.array_equal(u, v) for u, v in
                     zip((a.bin_centers, a.semivariances, a.pair_counts), b))
    worst = max(errs.values())
    verdict(3, worst < 0.01 and exact,
            f"worst relative parameter error {worst:.2e} ({', '.join(f'{k} {v:.1e}' for k, v in errs.items())}); "
            f"brute-force match exact: {exact}")


def test_c4_kriging_beats_idw_on_synthetic_field():
    t0 = time.perf_counter()
    ds = make_dataset(n_stations=100, n_times=60, seed=0)
    split = spatial_split(ds.obs.ids, 0.2, 0)
    pos = {w: i for i, w in enumerate(ds.obs.ids)}
    mod = [pos[w] for w in split.model_ids]
    hold = [pos[w] for w in split.holdout_ids]
    xy, z = coords_xy(ds.obs.points), ds.obs.values
    model = fit(empirical_variogram(xy[mod], z[mod].T, 15), "exponential")
    est, _ = krige_targets(build_system([ds.obs.points[i] for i in mod], model), z[mod].T, xy[hold])
    base = idw(xy[mod], z[mod].T, xy[hold])
    k_r2, i_r2 = r2(est, z[hold].T), r2(base, z[hold].T)
    elapsed = time.perf_counter() - t0
    verdict(4, len(mod) == 80 and k_r2 - i_r2 >= 0.05 and k_r2 > 0.5 and elapsed < 60,
            f"kriging R2 {k_r2:.4f}, IDW R2 {i_r2:.4f}, gap {k_r2 - i_r2:.4f}, {elapsed:.2f}s")


def _masked(r, shape):
    mask = r.random(shape) > 0.3
    mask.flat[0] = True
    return MaskedGrid(r.normal(size=shape), mask)


def test_c5_composite_loss_reductions():
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        shape = tuple(int(v) for v in r.integers(2, 12, size=2))
        p, t = _masked(r, shape), _masked(r, shape)
        mask = p.mask & t.mask      # both grids share the first cell, so never empty
        p, t = MaskedGrid(p.filled(), mask), MaskedGrid(t.filled(), mask)
        worst = max(worst, abs(composite_loss([p], [t], CompositeLossConfig(1.0, 0.0, 0.0)) - masked_mse(p, t)))
    same = all(composite_loss([g], [g], CompositeLossConfig(*w)) == 0.0
               for g in (_masked(np.random.default_rng(1), (5, 6)),)
               for w in ((1, 0, 0), (1, 0.5, 0.5), (3, 7, 11)))
    ones = np.ones((2, 2), bool)
    hand = composite_loss([MaskedGrid([[2.0, 0.0], [0.0, 0.0]], ones)], [MaskedGrid(np.zeros((2, 2)), ones)],
                          CompositeLossConfig(1.0, 0.0, 1.0))
    verdict(5, worst < 1e-12 and same and hand == 1.25,
            f"max |composite - masked_mse| = {worst:.1e}, identical inputs zero: {same}, 2x2 example = {hand!r}")


def test_c6_gradient_checks():
    errs = []
    for seed in range(24):
        net, x, y = random_case(seed)
        _, grads = net.backward(x, y)
        errs.append(max_rel_error(grads, numeric_grads(net, x, y, eps=1e-5)))
    verdict(6, len(errs) >= 20 and max(errs) < 1e-4,
            f"{len(errs)} random nets, max relative error {max(errs):.2e}")


def test_c7_protocol_shape():
    folds = temporal_folds(182, 10, 8)
    last = folds[-1]
    final = (len(last.train), len(last.val), len(last.test))
    tests = [set(f.test) for f in folds]
    disjoint = all(not (a & b) for i, a in enumerate(tests) for b in tests[i + 1:])
    nested = all(set(a.train) < set(b.train) for a, b in zip(folds, folds[1:]))
    n_hold = len(spatial_split([f"w{i}" for i in range(1023)], 0.08, 0).holdout_ids)
    ratios = tuple(round(v / 182, 3) for v in final)
    verdict(7, final == (166, 8, 8) and last.test.stop == 182 and disjoint and nested
            and n_hold == 82 == holdout_count(1023, 0.08),
            f"final fold {final} ratios {ratios}, test windows disjoint {disjoint}, nested {nested}, "
            f"holdout {n_hold}")


@pytest.fixture(scope="module")
def synthetic_run():
    ds = make_dataset(n_stations=100, n_times=60, seed=0)
    split = spatial_split(ds.obs.ids, 0.2, 0)
    folds = temporal_folds(60, 3, 8)
    specs = [PredictorSpec("ridge", lambda: make_predictor("ridge", alpha=1.0, patch_radius=1, lags=1)),
             PredictorSpec("rbf_quantile", lambda: make_predictor("rbf_quantile")),
             PredictorSpec("ridge_lag5", lambda: make_predictor("ridge", alpha=1.0, patch_radius=1, lags=5)),
             PredictorSpec("climatology", lambda: make_predictor("climatology")),
             PredictorSpec("persistence", lambda: make_predictor("persistence"))]
    res = run_experiment(ExperimentData(ds.obs, ds.stack, ds.grid), specs, split, folds)
    return res, split, folds


def test_c8_scalar_rbf_overfits_more_than_ridge(synthetic_run):
    res, _, _ = synthetic_run
    assert not res.report.failures, res.report.failures

    def drop(name):
        tr = res.report.values(name, "prediction", "train", "r2")
        te = res.report.values(name, "prediction", "test", "r2")
        return float(np.mean(tr - te)), tr, te

    d_rbf, tr_rbf, te_rbf = drop("rbf_quantile")
    d_ridge, _, _ = drop("ridge")
    verdict(8, d_rbf > 0 and d_rbf >= 2 * d_ridge,
            f"mean train-test R2 drop: rbf {d_rbf:.3f} (train {np.round(tr_rbf, 3)}, test {np.round(te_rbf, 3)}), "
            f"ridge {d_ridge:.3f}, ratio {d_rbf / d_ridge:.1f}")


def test_c9_cli_runs_are_byte_identical(tmp_path):
    data = tmp_path / "data"
    assert main(["make-synthetic", "--out", str(data)]) == 0
    for run in ("a", "b"):
        assert main(["cv-run", "--config", str(data / "config.toml"), "--out", str(tmp_path / run)]) == 0
    names = ["metrics.csv", "summary.csv", "per_well.csv", "composite_loss.csv", "predictions.csv"]
    same = {n: (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names}
    n_rows = (tmp_path / "a" / "metrics.csv").read_text().count("\n") - 1
    verdict(9, all(same.values()) and n_rows > 0,
            f"{sum(same.values())}/{len(names)} report CSVs byte-identical, metrics rows {n_rows}")


def test_c10_no_leakage(synthetic_run):
    res, split, folds = synthetic_run
    problems = audit_leakage(res.access_log, split, folds)
    fit_reads = [a for a in res.access_log.entries if a.phase == "fit"]
    ends = {f.fold_index: f.train_end for f in folds}
    hold = set(split.holdout_ids)
    # second route: recheck the raw log without going through the auditor
    raw_clean = all(a.t_max < ends[a.fold] and not (a.wells & hold) for a in fit_reads) and all(
        a.phase == "score" for a in res.access_log.entries if a.kind == "targets" and a.wells & hold)
    covered = {a.fold for a in fit_reads} == set(ends)
    verdict(10, not problems and raw_clean and covered,
            f"{len(res.access_log.entries)} logged reads over {len(folds)} folds, "
            f"{len(problems)} violations")
