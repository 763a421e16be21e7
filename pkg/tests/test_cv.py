import math

import numpy as np
import pytest

from gwskit.cv import (AccessLog, ExperimentConfig, ExperimentData, PredictorSpec, audit_leakage,
                       holdout_count, run_experiment, spatial_split, temporal_folds)
from gwskit.metrics import METRICS, ROLES, SPLITS
from gwskit.models import Climatology, ExternalPredictions, Predictor
from gwskit.synthetic import make_dataset


def test_holdout_count_rounding():
    assert holdout_count(1023, 0.08) == 82
    assert holdout_count(2, 0.5) == 1
    assert holdout_count(5, 0.5) == 3      # 2.5 rounds up
    assert holdout_count(25, 0.1) == 3     # 2.5 again, no binary drift


def test_spatial_split_properties():
    ids = [f"w{i}" for i in range(1023)]
    s = spatial_split(ids, 0.08, seed=3)
    assert len(s.holdout_ids) == 82
    assert set(s.holdout_ids) | set(s.model_ids) == set(ids)
    assert not set(s.holdout_ids) & set(s.model_ids)
    assert spatial_split(ids, 0.08, seed=3) == s
    assert spatial_split(ids, 0.08, seed=4) != s
    assert len(spatial_split(["a", "b"], 0.5, 0).holdout_ids) == 1


@pytest.mark.parametrize("args", [(["a", "b", "c"], 0.1), (["a", "b"], 0.99), (["a"], 0.5),
                                  (["a", "b"], 0.0), (["a", "b"], 1.0), (["a", "a", "b"], 0.5)])
def test_spatial_split_errors(args):
    with pytest.raises(ValueError):
        spatial_split(*args)


def test_temporal_folds_geometry():
    folds = temporal_folds(182, 10, 8)
    assert len(folds) == 10
    assert folds[0].train == range(0, 94)
    last = folds[-1]
    assert (last.train, last.val, last.test) == (range(0, 166), range(166, 174), range(174, 182))
    for a, b in zip(folds, folds[1:]):
        assert a.train.stop < b.train.stop
        assert a.test.stop == b.test.start
    for f in folds:
        assert len(f.val) == len(f.test) == 8
        assert f.val.start == f.train.stop and f.test.start == f.val.stop


def test_single_fold_and_minimum_length():
    (only,) = temporal_folds(40, 1, 8)
    assert only.train == range(0, 24)
    assert len(temporal_folds(96, 10, 8)) == 10
    with pytest.raises(ValueError, match="at least 96"):
        temporal_folds(95, 10, 8)


@pytest.fixture(scope="module")
def synth():
    return make_dataset(n_stations=30, n_times=40, seed=1)


def _truth_table(obs):
    return {(w, t): float(obs.values[i, t]) for i, w in enumerate(obs.ids) for t in range(obs.n_times)}


class MeanOfTrain(Predictor):
    name = "train_mean"

    def fit(self, data):
        self.level = float(np.nanmean(data.targets))
        return self

    def predict(self, ctx, sites, times):
        return np.full((len(sites), len(times)), self.level)


def test_perfect_predictor_scores_one_everywhere(synth):
    truth = _truth_table(synth.obs)
    split = spatial_split(synth.obs.ids, 0.2, 0)
    folds = temporal_folds(40, 3, 8)
    res = run_experiment(ExperimentData(synth.obs, synth.stack, synth.grid),
                         [PredictorSpec("oracle", lambda: ExternalPredictions(truth), "direct")],
                         split, folds)
    r2s = [r[5] for r in res.report.rows if r[4] == "r2"]
    assert len(r2s) == 3 * 2 * 3
    assert all(v == 1.0 for v in r2s)
    assert all(r[5] == 0.0 for r in res.report.rows if r[4] == "mse")


def test_mean_of_train_has_zero_train_r2(synth):
    split = spatial_split(synth.obs.ids, 0.2, 0)
    res = run_experiment(ExperimentData(synth.obs, synth.stack, synth.grid),
                         [PredictorSpec("train_mean", MeanOfTrain, "direct")], split,
                         temporal_folds(40, 3, 8))
    for v in res.report.values("train_mean", "prediction", "train", "r2"):
        assert abs(v) < 1e-12


def test_report_shape_and_clean_audit(synth):
    split = spatial_split(synth.obs.ids, 0.2, 0)
    folds = temporal_folds(40, 3, 8)
    res = run_experiment(ExperimentData(synth.obs, synth.stack, synth.grid),
                         [PredictorSpec("climatology", Climatology)], split, folds)
    keys = {(f, p, r, s, m) for f, p, r, s, m, _ in res.report.rows}
    assert len(keys) == len(res.report.rows) == 3 * 1 * len(ROLES) * len(SPLITS) * len(METRICS)
    assert audit_leakage(res.access_log, split, folds) == []
    # interpolation holdout targets are only ever read for scoring
    hold = set(split.holdout_ids)
    assert all(a.phase == "score" for a in res.access_log.entries
               if a.kind == "targets" and a.wells & hold)
    assert sorted(res.variograms) == [1, 2, 3]
    assert len(res.composite) == 3 * 3


def test_scaling_on_all_times_is_flagged(synth):
    split = spatial_split(synth.obs.ids, 0.2, 0)
    folds = temporal_folds(40, 3, 8)
    res = run_experiment(ExperimentData(synth.obs, synth.stack, synth.grid),
                         [PredictorSpec("climatology", Climatology)], split, folds,
                         ExperimentConfig(scaler_fit="all"))
    problems = audit_leakage(res.access_log, split, folds)
    assert problems and all("read while fitting" in p for p in problems)


def test_audit_catches_holdout_read():
    split = spatial_split(["a", "b", "c", "d"], 0.25, 0)
    log = AccessLog()
    log.record(1, "fit", "targets", [split.holdout_ids[0]], [0, 1])
    (msg,) = audit_leakage(log, split, temporal_folds(40, 1, 8))
    assert "holdout wells" in msg


class Exploding(Predictor):
    def fit(self, data):
        if data.n_train > 10:
            raise RuntimeError("boom")
        return self

    def predict(self, ctx, sites, times):
        return np.zeros((len(sites), len(times)))


def test_fold_failure_recorded_and_run_continues(synth):
    split = spatial_split(synth.obs.ids, 0.2, 0)
    res = run_experiment(ExperimentData(synth.obs, synth.stack, synth.grid),
                         [PredictorSpec("x", Exploding, "direct")], split, temporal_folds(40, 3, 8))
    assert sorted(res.report.failures) == [2, 3]
    assert "boom" in res.report.failures[2]
    assert {r[0] for r in res.report.rows} == {1}


def test_final_fold_predictions_cover_all_wells(synth):
    split = spatial_split(synth.obs.ids, 0.2, 0)
    res = run_experiment(ExperimentData(synth.obs, synth.stack, synth.grid),
                         [PredictorSpec("climatology", Climatology)], split, temporal_folds(40, 3, 8))
    wells = {w for _, _, w, _, _ in res.final_predictions}
    assert wells == set(synth.obs.ids)
    assert len(res.final_predictions) == 30 * 40
    interp = [v for _, role, _, t, v in res.final_predictions if role == "interpolation" and t >= 12]
    assert all(math.isfinite(v) for v in interp)
