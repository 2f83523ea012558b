"""Tests for regression-based power flow (linear and kernel ridge)."""

import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridscope.ddpf import (
    LAMBDA_GRID,
    DdpfModel,
    TrainingSet,
    evaluate_mae,
    predict,
    predict_voltages,
    train,
)
from gridscope.grid_model import solve_power_flow_batch
from gridscope.synth import make_feeder


def linear_voltage_set(seed, n=600, n_inj=11, n_bus=11):
    """Voltage-scale targets generated by an exact linear map of (p, q)."""
    rng = np.random.default_rng(seed)
    nominal = 8.0 * rng.uniform(0.008, 0.02, n_inj)
    level = rng.uniform(0.5, 1.5, size=(n, 1))
    per_bus = rng.uniform(0.95, 1.05, size=(n, n_inj))
    p = -nominal[None, :] * level * per_bus
    q = p * rng.uniform(0.28, 0.32, size=p.shape)
    sensitivity = rng.uniform(0.02, 0.12, size=(2 * n_inj, n_bus))
    vm = 1.0 + np.hstack([p, q]) @ sensitivity
    ts = np.arange(n, dtype=np.int64) * 900
    return TrainingSet.chronological(
        p, q, vm, ts,
        [f"inj{k}" for k in range(n_inj)],
        [f"bus{k}" for k in range(n_bus)],
    )


def solved_set(net, seed, n, level_lo, level_hi, jitter, load_scale=8.0):
    """Power-flow-solved samples over a common load level plus per-bus jitter."""
    rng = np.random.default_rng(seed)
    n_load = len(net.load_bus_ids)
    nominal = load_scale * rng.uniform(0.008, 0.02, n_load)
    level = rng.uniform(level_lo, level_hi, size=(n, 1))
    per_bus = rng.uniform(1.0 - jitter, 1.0 + jitter, size=(n, n_load))
    p = -nominal[None, :] * level * per_bus
    q = p * rng.uniform(0.28, 0.32, size=p.shape)
    v, _, _ = solve_power_flow_batch(net, p + 1j * q)
    keep = [i for i, b in enumerate(net.buses) if b.kind != "slack"]
    ts = np.arange(n, dtype=np.int64) * 900
    return TrainingSet.chronological(
        p, q, np.abs(v)[:, keep], ts,
        net.load_bus_ids,
        [net.buses[i].id for i in keep],
    )


@pytest.fixture(scope="module")
def feeder12():
    return make_feeder(12, 1, 0)


class TestTrainingSet:
    def test_chronological_blocks_partition_in_order(self):
        ds = linear_voltage_set(0, n=100)
        assert (ds.split[:60] == "train").all()
        assert (ds.split[60:80] == "validation").all()
        assert (ds.split[80:] == "test").all()
        assert ds.rows("train").sum() + ds.rows("validation").sum() + ds.rows("test").sum() == 100

    def test_duplicate_timestamp_across_splits_rejected(self):
        ds = linear_voltage_set(0, n=50)
        ts = ds.timestamps.copy()
        ts[-1] = ts[0]  # last sample (test) reuses a train timestamp
        with pytest.raises(ValueError, match="more than one split"):
            TrainingSet(ds.p, ds.q, ds.vm, ts, ds.split, ds.injection_ids, ds.bus_ids)

    def test_repeated_timestamp_within_one_split_allowed(self):
        ds = linear_voltage_set(0, n=50)
        ts = ds.timestamps.copy()
        ts[1] = ts[0]  # both in the train block
        TrainingSet(ds.p, ds.q, ds.vm, ts, ds.split, ds.injection_ids, ds.bus_ids)

    def test_shape_and_label_validation(self):
        ds = linear_voltage_set(0, n=50)
        with pytest.raises(ValueError, match="unknown split labels"):
            TrainingSet(ds.p, ds.q, ds.vm, ds.timestamps,
                        np.array(["holdout"] * 50), ds.injection_ids, ds.bus_ids)
        with pytest.raises(ValueError, match="n_buses"):
            TrainingSet(ds.p, ds.q, ds.vm[:, :3], ds.timestamps, ds.split,
                        ds.injection_ids, ds.bus_ids)
        with pytest.raises(ValueError, match="sum to 1"):
            TrainingSet.chronological(ds.p, ds.q, ds.vm, ds.timestamps,
                                      ds.injection_ids, ds.bus_ids,
                                      fractions=(0.5, 0.2, 0.2))
        with pytest.raises(ValueError, match="unknown split"):
            ds.rows("holdout")

    def test_feature_and_target_layout_per_direction(self):
        ds = linear_voltage_set(3, n=50, n_inj=4, n_bus=5)
        assert ds.features("inverse").shape == (50, 8)
        assert ds.features("forward").shape == (50, 5)
        targets, labels = ds.targets("forward")
        assert targets.shape == (50, 8)
        assert labels[:4] == tuple(f"p:inj{k}" for k in range(4))
        assert labels[4:] == tuple(f"q:inj{k}" for k in range(4))
        _, inv_labels = ds.targets("inverse")
        assert inv_labels == ds.bus_ids
        with pytest.raises(ValueError, match="unknown direction"):
            ds.features("sideways")

    def test_angle_channel_widens_forward_features(self):
        ds = linear_voltage_set(1, n=50, n_inj=4, n_bus=5)
        with_va = TrainingSet.chronological(
            ds.p, ds.q, ds.vm, ds.timestamps, ds.injection_ids, ds.bus_ids,
            va=np.zeros_like(ds.vm) + 0.01,
        )
        assert with_va.features("forward").shape == (50, 10)

    @given(n=st.integers(min_value=20, max_value=400))
    @settings(max_examples=30, deadline=None)
    def test_chronological_split_is_a_partition(self, n):
        p = np.zeros((n, 2))
        vm = np.ones((n, 3))
        ts = np.arange(n) * 60
        ds = TrainingSet.chronological(p, p, vm, ts, ["a", "b"], ["x", "y", "z"])
        masks = [ds.rows(s) for s in ("train", "validation", "test")]
        assert sum(m.sum() for m in masks) == n
        assert not (masks[0] & masks[1]).any()
        assert not (masks[0] & masks[2]).any()
        assert masks[0].sum() == int(round(0.6 * n))


class TestTrainLinear:
    def test_recovers_exact_linear_map(self):
        for seed in range(5):
            report = evaluate_mae(train(linear_voltage_set(seed), "linear", "inverse"),
                                  linear_voltage_set(seed))
            assert report.aggregate <= 1e-6

    def test_training_rows_reproduced_without_ridge(self):
        ds = linear_voltage_set(7)
        model = train(ds, "linear", "inverse", ridge=0.0)
        rows = ds.rows("train")
        pred = predict(model, ds.features("inverse")[rows])
        assert np.max(np.abs(pred - ds.vm[rows])) <= 1e-6

    def test_zero_variance_column_dropped_with_warning(self):
        rng = np.random.default_rng(2)
        n, n_inj = 600, 6
        p = -rng.uniform(0.05, 0.15, (n, n_inj))
        p[:, 0] = -0.05  # a load that never varies
        q = p * 0.3
        sensitivity = rng.uniform(0.02, 0.12, size=(2 * n_inj, 5))
        vm = 1.0 + np.hstack([p, q]) @ sensitivity
        frozen = TrainingSet.chronological(
            p, q, vm, np.arange(n) * 900,
            [f"inj{k}" for k in range(n_inj)], [f"bus{k}" for k in range(5)])
        with pytest.warns(RuntimeWarning, match="zero-variance feature column"):
            model = train(frozen, "linear", "inverse")
        assert 0 not in model.kept and n_inj not in model.kept
        assert model.n_features_raw == 2 * n_inj
        assert evaluate_mae(model, frozen).aggregate <= 1e-6

    def test_all_constant_features_rejected(self):
        n = 80
        p = np.full((n, 2), -0.05)
        vm = np.random.default_rng(0).uniform(0.95, 1.0, (n, 3))
        ds = TrainingSet.chronological(p, p * 0.3, vm, np.arange(n) * 900,
                                       ["a", "b"], ["x", "y", "z"])
        with pytest.warns(RuntimeWarning):
            with pytest.raises(ValueError, match="constant"):
                train(ds, "linear", "inverse")

    def test_sample_count_precondition(self):
        ds = linear_voltage_set(0, n=100, n_inj=6)  # 60 train rows < 10 * 12
        with pytest.raises(ValueError, match="10 samples per dimension"):
            train(ds, "linear", "inverse")

    def test_training_is_deterministic(self):
        ds = linear_voltage_set(4)
        a = train(ds, "linear", "inverse")
        b = train(ds, "linear", "inverse")
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.feature_mean, b.feature_mean)


class TestTrainKernel:
    def test_kernel_close_on_linear_data(self):
        for seed in range(5):
            report = evaluate_mae(train(linear_voltage_set(seed), "kernel", "inverse"),
                                  linear_voltage_set(seed))
            assert report.aggregate <= 1e-4

    def test_hyperparameters_come_from_grid_and_heuristic(self):
        ds = linear_voltage_set(1)
        model = train(ds, "kernel", "inverse")
        assert model.lam in LAMBDA_GRID
        assert model.bandwidth > 0
        assert model.support.shape[0] == ds.rows("train").sum()
        assert model.dual.shape == (model.support.shape[0], len(ds.bus_ids))

    def test_kernel_training_is_deterministic(self):
        ds = linear_voltage_set(5)
        a = train(ds, "kernel", "inverse")
        b = train(ds, "kernel", "inverse")
        assert a.lam == b.lam and a.bandwidth == b.bandwidth
        assert np.array_equal(a.dual, b.dual)

    def test_mostly_duplicate_rows_degenerate_bandwidth(self):
        n, n_inj = 200, 2
        rng = np.random.default_rng(0)
        p = np.tile([-0.05, -0.08], (n, 1))
        p[115:120] += rng.uniform(0.001, 0.01, (5, n_inj))  # few distinct train rows
        p[120:] += rng.uniform(0.001, 0.01, (80, n_inj))
        vm = rng.uniform(0.95, 1.0, (n, 3))
        ds = TrainingSet.chronological(p, p * 0.3, vm, np.arange(n) * 900,
                                       ["a", "b"], ["x", "y", "z"])
        with pytest.raises(ValueError, match="median pairwise distance"):
            train(ds, "kernel", "inverse")

    def test_unknown_kind_rejected(self):
        ds = linear_voltage_set(0, n=100)
        with pytest.raises(ValueError, match="unknown model kind"):
            train(ds, "spline", "inverse")


class TestPredict:
    def test_forward_model_refused_for_voltage_prediction(self):
        ds = linear_voltage_set(0)
        fwd = train(ds, "linear", "forward")
        with pytest.raises(ValueError, match="inverse-direction"):
            predict_voltages(fwd, ds.vm[:3])

    def test_feature_width_mismatch_rejected(self):
        model = train(linear_voltage_set(0), "linear", "inverse")
        with pytest.raises(ValueError, match="shape"):
            predict(model, np.zeros((4, 5)))
        with pytest.raises(ValueError, match="shape"):
            predict(model, np.zeros(22))

    def test_batch_prediction_preserves_order(self):
        ds = linear_voltage_set(6)
        X = ds.features("inverse")[ds.rows("test")]
        perm = np.random.default_rng(1).permutation(len(X))
        for kind in ("linear", "kernel"):
            model = train(ds, kind, "inverse")
            pred = predict(model, X)
            assert pred.shape == (len(X), len(ds.bus_ids))
            np.testing.assert_allclose(predict(model, X[perm]), pred[perm],
                                       rtol=1e-12, atol=1e-15)

    def test_zero_injection_predicts_slack_setpoint(self, feeder12):
        # Zero load is interior to the sampled range, so the prediction at
        # the flat-voltage point should land within the model's own MAE.
        for seed in range(5):
            ds = solved_set(feeder12, seed, 600, -0.5, 1.5, 0.05)
            zero = np.zeros((1, 2 * len(feeder12.load_bus_ids)))
            for kind in ("linear", "kernel"):
                model = train(ds, kind, "inverse")
                mae = evaluate_mae(model, ds).aggregate
                pred = predict_voltages(model, zero)
                assert np.max(np.abs(pred - 1.0)) <= mae

    def test_constant_target_column_reproduced(self):
        ds = linear_voltage_set(3)
        vm = ds.vm.copy()
        vm[:, 2] = 0.97
        pinned = TrainingSet(ds.p, ds.q, vm, ds.timestamps, ds.split,
                             ds.injection_ids, ds.bus_ids)
        model = train(pinned, "linear", "inverse")
        pred = predict(model, pinned.features("inverse")[pinned.rows("test")])
        assert np.max(np.abs(pred[:, 2] - 0.97)) <= 1e-9

    def test_normalization_round_trip(self):
        model = train(linear_voltage_set(0), "linear", "inverse")
        rng = np.random.default_rng(0)
        y = rng.uniform(0.9, 1.1, (50, len(model.target_ids)))
        back = ((y - model.target_mean) / model.target_std) * model.target_std + model.target_mean
        np.testing.assert_allclose(back, y, rtol=1e-12)
        x = rng.uniform(-0.3, 0.0, (50, model.kept.size))
        back = ((x - model.feature_mean) / model.feature_std) * model.feature_std + model.feature_mean
        np.testing.assert_allclose(back, x, rtol=1e-12)


class TestEvaluate:
    def test_perfect_predictor_scores_zero(self):
        ds = linear_voltage_set(0)
        report = evaluate_mae(train(ds, "linear", "inverse"), ds)
        assert report.aggregate <= 1e-10
        assert np.all(report.mae <= 1e-10)

    def test_constant_predictor_mae_is_mean_absolute_deviation(self):
        ds = linear_voltage_set(1)
        fitted = train(ds, "linear", "inverse")
        flat = dataclasses.replace(fitted, weights=np.zeros_like(fitted.weights))
        report = evaluate_mae(flat, ds)
        expected = np.abs(ds.vm[ds.rows("test")] - fitted.target_mean).mean(axis=0)
        np.testing.assert_allclose(report.mae, expected, rtol=1e-12)

    def test_overlapping_timestamps_refused(self):
        ds = linear_voltage_set(2)
        model = train(ds, "linear", "inverse")
        leaky = TrainingSet(ds.p, ds.q, ds.vm, ds.timestamps,
                            np.array(["test"] * len(ds.timestamps)),
                            ds.injection_ids, ds.bus_ids)
        with pytest.raises(ValueError, match="overlap the training window"):
            evaluate_mae(model, leaky)

    def test_empty_test_split_refused(self):
        ds = linear_voltage_set(2)
        model = train(ds, "linear", "inverse")
        train_only = TrainingSet(
            ds.p[:100], ds.q[:100], ds.vm[:100], ds.timestamps[:100] + 10**9,
            np.array(["train"] * 100), ds.injection_ids, ds.bus_ids)
        with pytest.raises(ValueError, match="test split is empty"):
            evaluate_mae(model, train_only)

    def test_target_mismatch_refused(self):
        ds = linear_voltage_set(2)
        model = train(ds, "linear", "inverse")
        renamed = TrainingSet(ds.p, ds.q, ds.vm, ds.timestamps + 10**9, ds.split,
                              ds.injection_ids,
                              tuple(f"other{k}" for k in range(len(ds.bus_ids))))
        with pytest.raises(ValueError, match="do not match"):
            evaluate_mae(model, renamed)

    def test_quantile_bands_partition_the_test_rows(self):
        ds = linear_voltage_set(4)
        report = evaluate_mae(train(ds, "linear", "inverse"), ds, n_bands=4)
        n_test = int(ds.rows("test").sum())
        assert report.band_counts.sum() == n_test
        assert report.band_counts.min() >= n_test // 4 - 2
        assert len(report.band_edges) == 5
        assert np.all(np.diff(report.band_edges) >= 0)
        recombined = float(
            np.sum(report.band_counts * report.band_aggregate) / n_test
        )
        np.testing.assert_allclose(recombined, report.aggregate, rtol=1e-9)

    def test_identical_totals_collapse_to_one_band(self):
        # Constant injections put every row at the same total, leaving the
        # other quantile bands empty (NaN MAE, zero count).
        n = 60
        rng = np.random.default_rng(0)
        p = np.full((n, 2), -0.05)
        vm = rng.uniform(0.95, 1.0, (n, 3))
        ds = TrainingSet.chronological(p, p * 0.3, vm, np.arange(n) * 900,
                                       ["a", "b"], ["x", "y", "z"])
        model = DdpfModel(
            kind="linear", direction="inverse", kept=np.arange(4),
            n_features_raw=4, feature_mean=np.zeros(4), feature_std=np.ones(4),
            target_mean=vm.mean(axis=0), target_std=np.ones(3),
            target_ids=("x", "y", "z"),
            train_timestamps=np.array([-1]),
            weights=np.zeros((4, 3)), intercept=np.zeros(3),
        )
        report = evaluate_mae(model, ds, n_bands=4)
        assert report.band_counts.tolist() == [0, 0, 0, int(ds.rows("test").sum())]
        assert np.isnan(report.band_aggregate[:3]).all()
        assert np.isfinite(report.band_aggregate[3])

    def test_csv_report_format(self):
        ds = linear_voltage_set(5, n_bus=3)
        report = evaluate_mae(train(ds, "linear", "inverse"), ds, n_bands=4)
        lines = report.to_csv().strip().split("\n")
        assert lines[0] == "bus,range_band,mae"
        assert len(lines) == 1 + 3 * (1 + 4)
        bus, band, mae = lines[1].split(",")
        assert bus == "bus0" and band == "all"
        assert float(mae) == report.mae[0]
        assert lines[2].split(",")[1] == "q1"


class TestPowerFlowRegimes:
    def test_wide_range_kernel_at_least_as_good(self, feeder12):
        wins = 0
        ratios = []
        for seed in range(5):
            ds = solved_set(feeder12, seed, 600, 0.5, 1.5, 0.05)
            lin = evaluate_mae(train(ds, "linear", "inverse"), ds).aggregate
            ker = evaluate_mae(train(ds, "kernel", "inverse"), ds).aggregate
            wins += ker <= lin
            ratios.append(ker / lin)
        assert wins >= 4
        assert np.median(ratios) < 1.0

    def test_narrow_range_linear_within_2x_kernel(self, feeder12):
        ratios = []
        for seed in range(5):
            ds = solved_set(feeder12, seed, 600, 0.95, 1.05, 0.01)
            lin = evaluate_mae(train(ds, "linear", "inverse"), ds).aggregate
            ker = evaluate_mae(train(ds, "kernel", "inverse"), ds).aggregate
            ratios.append(lin / ker)
        assert np.median(ratios) <= 2.0

    def test_forward_inverse_composition_is_identity(self, feeder12):
        for seed in range(3):
            ds = solved_set(feeder12, seed, 600, 0.95, 1.05, 0.01)
            fwd = train(ds, "linear", "forward")
            inv = train(ds, "linear", "inverse")
            vm = ds.vm[ds.rows("test")]
            composed = predict(inv, predict(fwd, vm))
            assert np.mean(np.abs(composed - vm)) <= 1e-8


class TestPersistence:
    @pytest.mark.parametrize("kind", ["linear", "kernel"])
    def test_json_round_trip_preserves_predictions(self, kind):
        ds = linear_voltage_set(8)
        model = train(ds, kind, "inverse")
        doc = json.loads(json.dumps(model.to_dict()))
        restored = DdpfModel.from_dict(doc)
        X = ds.features("inverse")[ds.rows("test")]
        assert np.array_equal(predict(restored, X), predict(model, X))
        assert restored.target_ids == model.target_ids
        assert np.array_equal(restored.train_timestamps, model.train_timestamps)

    def test_invalid_models_rejected(self):
        model = train(linear_voltage_set(0), "linear", "inverse")
        with pytest.raises(ValueError, match="unknown model kind"):
            dataclasses.replace(model, kind="spline")
        with pytest.raises(ValueError, match="unknown direction"):
            dataclasses.replace(model, direction="backward")
        with pytest.raises(ValueError, match="stds must be positive"):
            dataclasses.replace(model, target_std=np.zeros(len(model.target_ids)))
        kernel = train(linear_voltage_set(0), "kernel", "inverse")
        with pytest.raises(ValueError, match="bandwidth"):
            dataclasses.replace(kernel, bandwidth=0.0)
