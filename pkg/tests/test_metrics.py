import math

import numpy as np
import pytest

from gwskit.geo import MaskedGrid
from gwskit.metrics import (CompositeLossConfig, EmptyMaskError, MetricsReport, UndefinedR2Error,
                            composite_loss, lowpass, masked_mse, mse, r2)

ALL = np.ones((2, 2), bool)


def test_r2_examples():
    obs = np.array([1.0, 2.0, 3.0])
    assert r2(obs, obs) == 1.0
    assert r2(np.full(3, 2.0), obs) == 0.0
    assert r2([3.0, 2.0, 1.0], obs) == -3.0
    with pytest.raises(UndefinedR2Error):
        r2([1.0, 2.0], [5.0, 5.0])
    with pytest.raises(UndefinedR2Error):
        r2([1.0], [2.0])


def test_r2_pools_2d_inputs():
    obs = np.array([[1.0, 2.0], [3.0, 4.0]])
    pred = obs + np.array([[0.5, 0.0], [0.0, -0.5]])
    assert r2(pred, obs) == pytest.approx(1 - 0.5 / 5.0)


def test_mse():
    assert mse([1.0, 3.0], [1.0, 1.0]) == 2.0


def test_masked_mse_examples():
    t = MaskedGrid(np.zeros((2, 2)), ALL)
    assert masked_mse(t, t) == 0.0
    assert masked_mse(MaskedGrid(np.ones((2, 2)), ALL), t) == 1.0
    p = MaskedGrid([[2.0, 7.0], [0.0, 0.0]], ALL)
    tm = MaskedGrid(np.zeros((2, 2)), [[True, False], [True, True]])
    assert masked_mse(p, tm) == 4 / 3
    with pytest.raises(EmptyMaskError):
        masked_mse(MaskedGrid(np.zeros((2, 2)), [[True, False], [False, False]]),
                   MaskedGrid(np.zeros((2, 2)), [[False, True], [False, False]]))


def test_lowpass_examples():
    c = MaskedGrid(np.full((4, 5), 2.5), np.ones((4, 5), bool))
    assert np.allclose(lowpass(c).filled(), 2.5)
    single = MaskedGrid([[0, 0, 0], [0, 7.0, 0], [0, 0, 0]], [[0, 0, 0], [0, 1, 0], [0, 0, 0]])
    out = lowpass(single)
    assert out.filled(np.nan)[1, 1] == 7.0 and out.mask.sum() == 1
    spike = np.zeros((3, 3))
    spike[1, 1] = 9.0
    assert lowpass(MaskedGrid(spike, np.ones((3, 3), bool))).filled()[1, 1] == 1.0


def test_lowpass_edges_normalized_by_count():
    g = MaskedGrid([[1.0, 2.0], [3.0, 4.0]], ALL)
    out = lowpass(g).filled()
    assert np.allclose(out, 2.5)       # every 3x3 window clipped to the 4 cells
    with pytest.raises(ValueError):
        lowpass(g, 4)


def test_composite_hand_example():
    truth = MaskedGrid(np.zeros((2, 2)), ALL)
    pred = MaskedGrid([[2.0, 0.0], [0.0, 0.0]], ALL)
    cfg = CompositeLossConfig(w_main=1.0, w_trend=0.0, w_mean=1.0)
    assert composite_loss([pred], [truth], cfg) == 1.25


def test_composite_reductions():
    r = np.random.default_rng(0)
    p = [MaskedGrid(r.normal(size=(3, 4)), r.random((3, 4)) > 0.2) for _ in range(3)]
    t = [MaskedGrid(r.normal(size=(3, 4)), g.mask) for g in p]
    assert composite_loss(p, t, CompositeLossConfig(1.0, 0.0, 0.0)) == masked_mse(p, t)
    assert composite_loss(t, t, CompositeLossConfig(2.0, 3.0, 4.0)) == 0.0
    base = composite_loss(p, t, CompositeLossConfig(1.0, 0.5, 0.5))
    assert composite_loss(p, t, CompositeLossConfig(2.0, 1.0, 1.0)) == pytest.approx(2 * base, rel=1e-14)


def test_composite_config_validation():
    with pytest.raises(ValueError):
        CompositeLossConfig(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        CompositeLossConfig(-1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        CompositeLossConfig(pool_size=2)


def _report():
    rep = MetricsReport()
    for fold, (a, b) in enumerate([(0.5, 1.0), (0.7, 2.0), (0.6, math.nan)], start=1):
        rep.add(fold, "ridge", "prediction", "test", "r2", a)
        rep.add(fold, "ridge", "prediction", "test", "mse", b)
    return rep


def test_report_aggregate_is_derived():
    agg = {r[:4]: r[4:] for r in _report().aggregate()}
    mean, std, n = agg[("ridge", "prediction", "test", "r2")]
    assert mean == pytest.approx(0.6, abs=1e-12)
    assert std == pytest.approx(np.std([0.5, 0.7, 0.6], ddof=1), abs=1e-12)
    assert n == 3
    assert agg[("ridge", "prediction", "test", "mse")][2] == 2


def test_report_csv_round_trip():
    rep = _report()
    text = rep.to_csv()
    assert text.splitlines()[0] == "fold,predictor,role,split,metric,value"
    back = MetricsReport.from_csv(text)
    assert back.to_csv() == text
    assert "nan" in text
    with pytest.raises(ValueError):
        MetricsReport.from_csv("a,b\n")
