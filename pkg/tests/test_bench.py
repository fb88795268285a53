import json
import math

import numpy as np
import pytest

from qtstream.bench import (
    DetectorConfig,
    ExperimentReport,
    StreamFamily,
    aggregate_arl0,
    aggregate_delay_far,
    auc_by_lag,
    geometric_false_alarm_rate,
    measure_arl0,
    measure_batch_arl0,
    measure_delay_far,
    rank_auc,
    run_monitoring_runs,
    run_records,
    write_report,
)
from qtstream.calibration import calibrate_batch_threshold
from qtstream.datagen import ChangeSpec, GaussianLaw, MeanShift, UniformLaw


def test_geometric_false_alarm_rate_direct():
    assert geometric_false_alarm_rate(1 / 500, 500) == pytest.approx(0.6321, abs=5e-4)
    assert geometric_false_alarm_rate(1 / 1000, 500) == pytest.approx(0.3935, abs=5e-4)
    assert geometric_false_alarm_rate(1 / 2000, 500) == pytest.approx(0.2212, abs=5e-4)
    assert geometric_false_alarm_rate(1 / 5000, 500) == pytest.approx(0.0952, abs=5e-4)


class TestAggregators:
    def geometric_t_stars(self, arl0, n, length, seed):
        rng = np.random.default_rng(seed)
        t = rng.geometric(1.0 / arl0, size=n)
        t[t > length] = 0  # censored: ran past the horizon undetected
        return t

    def test_arl0_recovers_geometric_mean(self):
        arl0, length = 200.0, 5000
        t = self.geometric_t_stars(arl0, 20_000, length, 0)
        res = aggregate_arl0(t, length)
        # censoring at 25x the mean is negligible
        assert res.ci_low < arl0 < res.ci_high
        assert res.n_detected + res.n_censored == 20_000

    def test_arl0_censoring_counted(self):
        t = np.array([0, 10, 0, 30])
        res = aggregate_arl0(t, 100)
        assert res.empirical_arl0 == 20.0
        assert res.n_censored == 2

    def test_arl0_all_censored(self):
        res = aggregate_arl0(np.zeros(5, dtype=int), 100)
        assert math.isnan(res.empirical_arl0)
        assert res.n_censored == 5

    def test_false_alarm_rate_matches_geometric_law(self):
        arl0, tau, n = 500.0, 500, 20_000
        t = self.geometric_t_stars(arl0, n, 5000, 1)
        res = aggregate_delay_far(t, tau)
        expect = geometric_false_alarm_rate(1 / arl0, tau - 1)
        band = 3 * math.sqrt(expect * (1 - expect) / n)
        assert abs(res.false_alarm_rate - expect) < band

    def test_delay_partition(self):
        t = np.array([0, 5, 100, 120, 99])
        res = aggregate_delay_far(t, tau=100)
        assert res.n_false_alarms == 2  # 5 and 99
        assert res.n_valid_detections == 2  # 100 and 120
        assert res.n_censored == 1
        assert res.arl1 == pytest.approx(10.0)  # delays 0 and 20

    def test_rank_auc_extremes_and_ties(self):
        assert rank_auc(np.array([5, 6, 7]), np.array([1, 2, 3])) == 1.0
        assert rank_auc(np.array([1, 2, 3]), np.array([5, 6, 7])) == 0.0
        assert rank_auc(np.array([1, 1, 1]), np.array([1, 1, 1])) == 0.5
        # hand-computed midrank case: pos (2, 4), neg (1, 4)
        # pairs: 2>1, 2<4, 4>1, 4=4 (half) -> (1 + 0 + 1 + 0.5)/4
        assert rank_auc(np.array([2, 4]), np.array([1, 4])) == pytest.approx(0.625)


UNIFORM8 = StreamFamily(phi0=UniformLaw(np.zeros(2), np.ones(2)), length=400)


class TestRunMachinery:
    def test_worker_count_invariance(self, small_table):
        cfg = DetectorConfig(lam=0.03, n_train=16, k=4)
        one = run_monitoring_runs(cfg, UNIFORM8, 300, 0, table=small_table, workers=1)
        two = run_monitoring_runs(cfg, UNIFORM8, 300, 0, table=small_table, workers=2)
        assert np.array_equal(one["t_star"], two["t_star"])

    def test_repeat_invocation_bitwise(self, small_table):
        cfg = DetectorConfig(lam=0.03, n_train=16, k=4)
        a = run_monitoring_runs(cfg, UNIFORM8, 120, 0, table=small_table)
        b = run_monitoring_runs(cfg, UNIFORM8, 120, 0, table=small_table)
        assert np.array_equal(a["t_star"], b["t_star"])

    def test_measure_arl0_near_target(self, small_table):
        cfg = DetectorConfig(lam=0.03, n_train=16, k=4)
        res = measure_arl0(cfg, small_table, UNIFORM8, 600, 0)
        # tiny table (ARL0=50): generous band, this is a smoke-level check
        assert 35 < res.empirical_arl0 < 65

    def test_measure_arl0_input_validation(self, small_table):
        cfg = DetectorConfig(lam=0.03, n_train=16, k=4)
        with pytest.raises(ValueError):
            measure_arl0(cfg, small_table, UNIFORM8, 50, 0)
        changed = StreamFamily(
            phi0=GaussianLaw(np.zeros(2), np.eye(2)), length=400,
            change=ChangeSpec(tau=100, transform=MeanShift(1.0)),
        )
        with pytest.raises(ValueError):
            measure_arl0(cfg, small_table, changed, 200, 0)

    def test_measure_delay_far_detects_big_change(self, small_table):
        cfg = DetectorConfig(lam=0.03, n_train=16, k=4)
        family = StreamFamily(
            phi0=GaussianLaw(np.zeros(2), np.eye(2)), length=400,
            change=ChangeSpec(tau=10, transform=MeanShift(16.0)),
        )
        res = measure_delay_far(cfg, small_table, family, 200, 0)
        # at ARL0=50 the expected false-alarm mass before tau=10 is ~17%
        assert res.arl1 is not None and res.arl1 < 100
        assert res.n_valid_detections > 120

    def test_batch_baseline_runs(self):
        cfg = DetectorConfig(lam=0.03, n_train=16, k=4)
        bt = calibrate_batch_threshold(4, (0.25,) * 4, 16, nu=8, alpha=8 / 50,
                                       replicates=100_000, seed=0)
        res = measure_batch_arl0(cfg, bt, UNIFORM8, 300, 0)
        assert res.empirical_arl0 > 25  # conservative by construction
        # detection times are multiples of the batch size
        assert np.all(res.t_stars[res.t_stars > 0] % 8 == 0)

    def test_auc_by_lag_orders_easy_vs_hard(self):
        cfg = {"ewma": DetectorConfig(lam=0.03, n_train=16, k=4)}
        stationary = StreamFamily(phi0=GaussianLaw(np.zeros(2), np.eye(2)), length=300)
        changed = StreamFamily(
            phi0=GaussianLaw(np.zeros(2), np.eye(2)), length=300,
            change=ChangeSpec(tau=100, transform=MeanShift(9.0)),
        )
        series = auc_by_lag(cfg, stationary, changed, [10, 100, 9999], 200, 0)["ewma"]
        assert 9999 not in series  # beyond the horizon, skipped
        assert series[100] > series[10]
        assert series[100] > 0.9


class TestReports:
    def make_report(self):
        t_stars = np.array([0, 12, 40])
        return ExperimentReport(
            experiment="arl0",
            config={"runs": 3},
            aggregates={"empirical_arl0": 26.0},
            runs=run_records(t_stars, None),
            deviations=[],
        )

    def test_schema_validates(self):
        self.make_report().validate()

    def test_bad_report_rejected(self):
        import jsonschema

        bad = ExperimentReport(
            experiment="arl0", config={}, aggregates={},
            runs=[{"run": "zero", "t_star": 1}], deviations=[],
        )
        with pytest.raises(jsonschema.ValidationError):
            bad.validate()

    def test_json_roundtrip(self):
        rep = self.make_report()
        again = ExperimentReport.from_json(rep.to_json())
        assert again == rep

    def test_run_records_flag_false_alarms(self):
        recs = run_records(np.array([0, 50, 150]), tau=100)
        assert recs[0]["censored"] and recs[0]["t_star"] is None
        assert recs[1]["false_alarm"] is True
        assert recs[2]["false_alarm"] is False

    def test_write_report_byte_identical(self, tmp_path):
        rep = self.make_report()
        d1, d2 = tmp_path / "a", tmp_path / "b"
        write_report(rep, d1)
        write_report(rep, d2)
        assert (d1 / "report.json").read_bytes() == (d2 / "report.json").read_bytes()
        assert (d1 / "runs.csv").read_bytes() == (d2 / "runs.csv").read_bytes()
        doc = json.loads((d1 / "report.json").read_text())
        assert doc["schema_version"] == "qtstream.report/1"
        header = (d1 / "runs.csv").read_text().splitlines()[0]
        assert header == "run,t_star,tau,false_alarm,censored"

    def test_write_report_with_figures(self, tmp_path):
        rep = self.make_report()
        written = write_report(rep, tmp_path / "fig", figures=True)
        pngs = [w for w in written if w.endswith(".png")]
        assert pngs and all((tmp_path / "fig").exists() for _ in pngs)
