import math

import numpy as np
import pytest

from gwskit.geo import DomainError, GridSpec, make_points
from gwskit.models import (Climatology, ExternalPredictions, InsufficientHistoryError, Persistence,
                           PredictContext, QuantileNet, RbfQuantile, Ridge, RidgeSolverError,
                           TrainData, TrainingDivergedError, extract_features, feature_length,
                           feature_tensor, make_predictor, multires_centers, pinball_loss,
                           rbf_embed, ridge_fit, unflatten)
from gwskit.models.nn import train
from oracles.fd import max_rel_error, numeric_grads, random_case

GRID = GridSpec(90.0, 23.0, n_cols=4, n_rows=3, cell_size=0.5)


def _stack(t=6, c=5, seed=0):
    return np.random.default_rng(seed).normal(size=(t, c, GRID.n_rows, GRID.n_cols))


def _site(lon, lat, name="s"):
    return make_points([name], [lon], [lat])[0]


# features

def test_point_patch_is_the_cell_channels():
    data = _stack()
    site = _site(91.2, 24.1)      # col 2, row 2
    fv = extract_features(data, GRID, site, 3, patch_radius=0, lags=1)
    assert fv.as_array()[:5].tolist() == data[3, :, 2, 2].tolist()
    assert fv.validity.ravel().tolist() == [1.0]


def test_corner_patch_zero_filled_and_flagged():
    data = _stack()
    fv = extract_features(data, GRID, _site(90.1, 23.1), 0, patch_radius=1)
    assert np.all(fv.patch[:, 0, 0, :] == 0) and np.all(fv.patch[:, 0, :, 0] == 0)
    assert fv.validity[0].tolist() == [[0, 0, 0], [0, 1, 1], [0, 1, 1]]
    assert np.array_equal(fv.patch[:, 0, 1:, 1:], data[0, :, :2, :2])


def test_missing_cell_flagged_invalid():
    data = _stack()
    data[2, 3, 1, 1] = np.nan
    fv = extract_features(data, GRID, _site(90.7, 23.7), 2, patch_radius=0)
    assert fv.validity.ravel().tolist() == [0.0]
    assert fv.patch[3, 0, 0, 0] == 0.0


def test_feature_length_arithmetic():
    assert feature_length(5, 5, 1) == 225 + 45
    data = _stack(t=8)
    fv = extract_features(data, GRID, _site(90.7, 23.7), 4, patch_radius=1, lags=5,
                          site_scalars=[1.0, 2.0, 3.0])
    assert fv.patch.shape == (5, 5, 3, 3)
    assert fv.as_array().size == 225 + 45 + 3


def test_lag_order_and_unflatten_exact():
    data = _stack(t=8)
    site = _site(90.7, 23.7)
    vec = feature_tensor(data, GRID, [site], [6], patch_radius=1, lags=3)[0, 0]
    fv = unflatten(vec, 5, 3, 1)
    for lag in range(3):
        assert np.array_equal(fv.patch[:, lag], data[6 - lag, :, 0:3, 0:3])
    assert np.array_equal(fv.as_array(), vec)


def test_insufficient_history():
    with pytest.raises(InsufficientHistoryError):
        extract_features(_stack(), GRID, _site(90.7, 23.7), 3, lags=5)


def test_site_outside_grid():
    with pytest.raises(DomainError):
        extract_features(_stack(), GRID, _site(95.0, 23.7), 1)


# rbf embedding

def test_rbf_center_and_sqrt2_bandwidth():
    assert rbf_embed([[0.3, 0.4]], [[0.3, 0.4]], 0.2)[0, 0] == 1.0
    u = 0.2 * math.sqrt(2)
    assert rbf_embed([[u, 0.0]], [[0.0, 0.0]], 0.2)[0, 0] == pytest.approx(math.exp(-1), rel=1e-14)


def test_two_level_1d_embedding_hand_values():
    centers, bw = multires_centers([3, 5], 1)
    assert centers.ravel().tolist() == [0, 0.5, 1, 0, 0.25, 0.5, 0.75, 1]
    phi = rbf_embed(np.array([[0.3]]), centers, bw)[0]
    # hand evaluation: level 1 width 0.5, level 2 width 0.25
    expected = [math.exp(-0.09 / 0.5), math.exp(-0.04 / 0.5), math.exp(-0.49 / 0.5),
                math.exp(-0.09 / 0.125), math.exp(-0.0025 / 0.125), math.exp(-0.04 / 0.125),
                math.exp(-0.2025 / 0.125), math.exp(-0.49 / 0.125)]
    assert phi.tolist() == pytest.approx(expected, rel=1e-13)
    assert np.all((phi > 0) & (phi <= 1))


def test_rbf_zero_bandwidth():
    with pytest.raises(DomainError):
        rbf_embed([[0.5]], [[0.5]], 0.0)


# quantile network

def test_pinball_examples():
    assert pinball_loss([4.0, 4.0, 4.0], 4.0, [0.1, 0.5, 0.9]) == 0.0
    assert pinball_loss([2.0], 4.0, [0.5]) == 1.0
    assert pinball_loss([5.0], 4.0, [0.9]) == pytest.approx(0.1, abs=1e-15)


def test_gradient_check_2_4_3():
    r = np.random.default_rng(7)
    net = QuantileNet((2, 4, 3), seed=3, activation="tanh")
    x, y = r.normal(size=(20, 2)), r.normal(size=20)
    _, grads = net.backward(x, y)
    assert max_rel_error(grads, numeric_grads(net, x, y)) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_gradient_check_random_nets(seed):
    net, x, y = random_case(seed)
    _, grads = net.backward(x, y)
    assert max_rel_error(grads, numeric_grads(net, x, y)) < 1e-4


def test_zero_weight_net_outputs_bias():
    net = QuantileNet((3, 5, 3))
    for i, p in enumerate(net.params):
        p[...] = 0.0
    net.params[-1][...] = [-1.0, 0.5, 2.0]
    out = net.forward(np.random.default_rng(0).normal(size=(4, 3)))
    assert np.array_equal(out, np.tile([-1.0, 0.5, 2.0], (4, 1)))


def test_adam_zero_gradient_is_noop():
    net = QuantileNet((3, 4, 3), seed=1)
    before = net.copy_params()
    net.adam_step([np.zeros_like(p) for p in net.params], lr=0.1)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params))


def test_adam_first_step_moves_by_lr():
    net = QuantileNet((1, 3), seed=0)
    before = net.copy_params()
    grads = [np.full_like(p, 2.0) for p in net.params]
    net.adam_step(grads, lr=0.01)
    for a, b in zip(before, net.params):
        assert np.allclose(a - b, 0.01, atol=1e-9)


def test_network_validation():
    with pytest.raises(ValueError):
        QuantileNet((2, 4, 2), levels=(0.1, 0.5, 0.9))
    with pytest.raises(ValueError):
        QuantileNet((2, 3), levels=(0.5, 0.5, 0.9))
    with pytest.raises(ValueError):
        QuantileNet((2, 3), levels=(0.0, 0.5, 0.9))


def test_non_finite_loss_aborts():
    net = QuantileNet((2, 3))
    with pytest.raises(TrainingDivergedError, match="non-finite"):
        net.backward(np.array([[np.inf, 1.0]]), np.array([0.0]))


def test_training_is_deterministic():
    r = np.random.default_rng(0)
    x, y = r.normal(size=(80, 3)), r.normal(size=80)
    nets = []
    for _ in range(2):
        net = QuantileNet((3, 8, 3), seed=5)
        train(net, x[:60], y[:60], x[60:], y[60:], epochs=15, seed=5)
        nets.append(net)
    assert all(np.array_equal(a, b) for a, b in zip(nets[0].params, nets[1].params))


def test_sorted_heads_are_monotone():
    net = QuantileNet((2, 6, 3), seed=2)
    for p in net.params:
        p += np.random.default_rng(1).normal(0, 3, p.shape)
    q = net.predict_quantiles(np.random.default_rng(3).normal(size=(50, 2)))
    assert np.all(np.diff(q, axis=1) >= 0)


# baseline predictors

def _months(n, start=1):
    return (np.arange(n) + start - 1) % 12 + 1


def _sites(n=3):
    r = np.random.default_rng(0)
    return make_points([f"w{i}" for i in range(n)], 90.1 + 1.8 * r.random(n), 23.1 + 1.3 * r.random(n))


def test_climatology_exact_on_pure_cycle():
    sites = _sites()
    cycle = np.sin(2 * np.pi * np.arange(12) / 12)
    full = np.vstack([np.tile(cycle, 5) + k for k in range(3)])
    data = TrainData(sites, full[:, :36], _months(60), 60)
    model = Climatology().fit(data)
    pred = model.predict(PredictContext(_months(60), 60), sites, np.arange(36, 60))
    assert np.allclose(pred, full[:, 36:], rtol=0, atol=1e-14)


def test_persistence_exact_on_constant():
    sites = _sites()
    vals = np.full((3, 20), 0.4)
    ctx = PredictContext(_months(20), 20,
                         observed=lambda ids, t: vals[[int(i[1:]) for i in ids]][:, t])
    pred = Persistence().fit(None).predict(ctx, sites, np.arange(20))
    assert np.all(np.isnan(pred[:, 0]))
    assert np.array_equal(pred[:, 1:], vals[:, 1:])


def test_ridge_alpha_zero_recovers_beta():
    r = np.random.default_rng(0)
    x = r.normal(size=(50, 6))
    beta = r.normal(size=6)
    assert np.max(np.abs(ridge_fit(x, x @ beta, 0.0) - beta)) < 1e-6


def test_ridge_collinear_needs_alpha():
    x = np.random.default_rng(0).normal(size=(20, 3))
    x = np.column_stack([x, x[:, 0] * 2.0])
    with pytest.raises(RidgeSolverError, match="alpha > 0"):
        ridge_fit(x, x[:, 1], 0.0)
    assert np.all(np.isfinite(ridge_fit(x, x[:, 1], 0.1)))


def test_ridge_norm_shrinks_with_alpha():
    r = np.random.default_rng(1)
    x = r.normal(size=(40, 5))
    y = x @ r.normal(size=5) + r.normal(size=40)
    norms = [np.linalg.norm(ridge_fit(x, y, a)) for a in (0.0, 0.1, 1, 10, 100, 1e4, 1e8)]
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-6


def _grid_task(n_sites=6, n_t=30, seed=0):
    r = np.random.default_rng(seed)
    sites = make_points([f"w{i}" for i in range(n_sites)], 90.1 + 1.8 * r.random(n_sites),
                        23.1 + 1.3 * r.random(n_sites))
    grids = r.normal(size=(n_t, 2, GRID.n_rows, GRID.n_cols))
    rows, cols, _ = GRID.cell_indices([s.lon for s in sites], [s.lat for s in sites])
    targets = (0.7 * grids[:, 0, rows, cols] - 0.2 * grids[:, 1, rows, cols]).T
    return sites, grids, targets


def test_ridge_predictor_learns_linear_cell_map():
    sites, grids, targets = _grid_task()
    data = TrainData(sites, targets[:, :20], _months(30), 30, grids=grids[:20], grid=GRID)
    model = Ridge(alpha=1e-8, patch_radius=0).fit(data)
    pred = model.predict(PredictContext(_months(30), 30, grids=grids, grid=GRID), sites, np.arange(20, 30))
    assert np.allclose(pred, targets[:, 20:], atol=1e-6)


def test_rbf_quantile_fit_predict_shapes_and_determinism():
    sites, grids, targets = _grid_task()
    data = TrainData(sites, targets[:, :20], _months(30), 30, grids=grids[:20], grid=GRID, seed=4)
    ctx = PredictContext(_months(30), 30, grids=grids, grid=GRID)
    runs = []
    for _ in range(2):
        m = RbfQuantile(epochs=5, hidden=[8])
        m.fit(data)
        runs.append(m.predict_quantiles(ctx, sites, np.arange(30)))
    assert runs[0].shape == (6, 30, 3)
    assert np.array_equal(runs[0], runs[1])
    assert np.all(np.diff(runs[0], axis=2) >= 0)
    with pytest.raises(TypeError):
        RbfQuantile(bogus=1)


def test_external_predictions_csv(tmp_path):
    p = tmp_path / "pred.csv"
    p.write_text("well_id,time_index,value\nw0,0,1.5\nw0,2,-0.5\n")
    model = make_predictor("external", path=p)
    assert isinstance(model, ExternalPredictions)
    out = model.predict(None, _sites(2), [0, 1, 2])
    assert out[0, 0] == 1.5 and out[0, 2] == -0.5 and np.isnan(out[0, 1]) and np.all(np.isnan(out[1]))
    p.write_text("well,t,v\n")
    with pytest.raises(ValueError, match="header"):
        ExternalPredictions.from_csv(p)
    with pytest.raises(ValueError, match="unknown predictor kind"):
        make_predictor("cnn")
