"""Experiment runner, rate fitting, quantiles, audits, and output files."""

import dataclasses
import hashlib
import json
import math

import numpy as np
import pytest

from plmarkov.errors import (
    HypothesisViolated,
    InfeasibleK0,
    InvalidConfig,
    IoFailure,
    NonFinite,
    NonPositiveValues,
    TooFewTrials,
)
from plmarkov.harness import (
    ExperimentConfig,
    constants_snapshot,
    emit,
    envelope_audit,
    expected_audit,
    fit_rate,
    quantile_curve,
    run_experiment,
)
from plmarkov.problems import build_instance
from plmarkov.theory import (
    TheoryConstants,
    TheoryInputs,
    expected_bound,
    expected_bound_floor,
    hp_envelope,
    k0_lower_bound,
)

TOKEN_PROBLEM = {
    "kind": "token",
    "nodes": 8,
    "dim": 10,
    "rows_per_node": [40, 24, 20, 20, 16, 16, 12, 12],
    "data_seed": 11,
    "label_noise": 0.3,
    "start_offset": 0.0,
}

QUAD_PROBLEM = {"kind": "quadratic", "dim": 2, "curvature": 1.0, "start_offset": 1.0}


def quad_constants(k0="auto", a=2.5, delta=0.5):
    problem = build_instance(QUAD_PROBLEM)
    if k0 == "auto":
        provisional = TheoryInputs.from_problem(problem, a, 1.0, delta)
        k0 = max(1.0, k0_lower_bound(provisional))
    inputs = TheoryInputs.from_problem(problem, a, float(k0), delta)
    return TheoryConstants.from_inputs(inputs)


def envelope_values(constants, horizon):
    tail = hp_envelope(constants, np.arange(1, horizon + 1))
    return np.concatenate([[constants.Delta0], tail])


class TestFitRate:
    def test_exact_reciprocal_slope(self):
        k = np.arange(1, 2001, dtype=float)
        curve = np.concatenate([[1.0], 3.7 / k])
        slope, intercept, r2 = fit_rate(curve, 1)
        assert abs(slope - (-1.0)) < 1e-10
        assert abs(r2 - 1.0) < 1e-10
        assert abs(intercept - math.log(3.7)) < 1e-10

    def test_constant_sequence_slope_zero(self):
        curve = np.full(500, 3.0)
        slope, _, r2 = fit_rate(curve, 100)
        assert abs(slope) < 1e-12
        assert r2 == 1.0

    def test_reciprocal_plus_quadratic_correction(self):
        k = np.arange(0, 5001, dtype=float)
        k[0] = 1.0
        curve = 2.0 / k + 30.0 / k**2
        slope, _, r2 = fit_rate(curve, 100)
        assert -1.02 < slope < -0.98
        assert r2 > 0.999

    def test_nonpositive_rejected(self):
        curve = np.concatenate([np.full(150, 2.0), [0.0], np.full(50, 1.0)])
        with pytest.raises(NonPositiveValues):
            fit_rate(curve, 100)
        curve[150] = -1.0
        with pytest.raises(NonPositiveValues):
            fit_rate(curve, 100)
        curve[150] = np.nan
        with pytest.raises(NonPositiveValues):
            fit_rate(curve, 100)

    def test_window_validation(self):
        with pytest.raises(InvalidConfig):
            fit_rate(np.ones(300), 0)
        with pytest.raises(InvalidConfig):
            fit_rate(np.ones(101), 100)
        with pytest.raises(InvalidConfig):
            fit_rate(np.ones((4, 5)), 1)


class TestQuantileCurve:
    def test_matches_sorting_oracle(self):
        rng = np.random.default_rng(0)
        curves = np.exp(rng.standard_normal((200, 40)))
        for q in (0.05, 0.25, 0.5, 0.75, 0.95):
            result = quantile_curve(curves, q)
            rank = math.ceil(q * 200) - 1
            for k in (0, 9, 19, 29, 39):
                column = np.sort(curves[:, k])
                assert result[k] == column[rank]

    def test_identical_trajectories(self):
        base = np.linspace(5.0, 1.0, 30)
        curves = np.tile(base, (25, 1))
        out = quantile_curve(curves, 0.5)
        np.testing.assert_array_equal(out, base)

    def test_too_few_trials(self):
        with pytest.raises(TooFewTrials):
            quantile_curve(np.ones((19, 10)), 0.5)

    def test_level_edges_rejected(self):
        curves = np.ones((25, 10))
        for q in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(InvalidConfig):
                quantile_curve(curves, q)


class TestEnvelopeAudit:
    def test_trajectories_below_envelope_pass(self):
        constants = quad_constants()
        env = envelope_values(constants, 60)
        curves = np.tile(0.5 * env, (24, 1))
        report = envelope_audit(curves, constants)
        assert report.violation_count == 0
        assert report.fraction == 0.0
        assert report.passed
        assert report.violating_trials == ()
        expected_threshold = 0.5 + 2.0 * math.sqrt(0.25 / 24)
        assert abs(report.threshold - expected_threshold) < 1e-15

    def test_single_step_violation_counts_whole_trajectory(self):
        constants = quad_constants()
        env = envelope_values(constants, 60)
        curves = np.tile(0.5 * env, (24, 1))
        for trial in (3, 11, 17):
            curves[trial, 30] = env[30] * 1.0001
        report = envelope_audit(curves, constants)
        assert report.violation_count == 3
        assert report.violating_trials == (3, 11, 17)
        assert report.passed  # 3/24 = 0.125 <= 0.5 + slack

    def test_uniform_excess_fails(self):
        constants = quad_constants()
        env = envelope_values(constants, 60)
        curves = np.tile(1.01 * env, (24, 1))
        report = envelope_audit(curves, constants)
        assert report.violation_count == 24
        assert report.fraction == 1.0
        assert not report.passed

    def test_infeasible_offset_rejected(self):
        constants = quad_constants(k0=20.0)
        assert constants.K0 < constants.K0_required
        with pytest.raises(InfeasibleK0):
            envelope_audit(np.ones((24, 30)), constants)

    def test_scaled_down_constants_fail_audit(self):
        constants = quad_constants()
        env = envelope_values(constants, 60)
        curves = np.tile(0.9 * env, (24, 1))
        assert envelope_audit(curves, constants).passed
        inverted = dataclasses.replace(
            constants,
            Gamma1=constants.Gamma1 / 100.0,
            Gamma2=constants.Gamma2 / 100.0,
            Delta0=constants.Delta0 / 100.0,
        )
        report = envelope_audit(curves, inverted)
        assert report.fraction > 0.99
        assert not report.passed


class TestExpectedAudit:
    def test_dominated_mean_passes(self):
        constants = quad_constants(k0="auto")
        ks = np.arange(1, 61)
        bound = expected_bound(constants, ks)
        curves = np.tile(np.concatenate([[constants.Delta0], 0.5 * bound]), (30, 1))
        report = expected_audit(curves, constants)
        assert report.passed
        assert report.worst_margin > 0.0

    def test_single_step_excess_fails_with_location(self):
        constants = quad_constants(k0="auto")
        ks = np.arange(1, 61)
        bound = expected_bound(constants, ks)
        curves = np.tile(np.concatenate([[constants.Delta0], 0.5 * bound]), (30, 1))
        curves[:, 7] = 2.0 * bound[6]  # column 7 is step k = 7
        report = expected_audit(curves, constants)
        assert not report.passed
        assert report.worst_k == 7
        assert report.worst_margin < 0.0


class TestExperimentConfig:
    def test_validation(self):
        good = dict(problem=QUAD_PROBLEM)
        ExperimentConfig(**good)
        with pytest.raises(InvalidConfig):
            ExperimentConfig(problem={"dim": 3})
        with pytest.raises(InvalidConfig):
            ExperimentConfig(**good, horizon=9)
        with pytest.raises(InvalidConfig):
            ExperimentConfig(**good, trial_count=0)
        with pytest.raises(InvalidConfig):
            ExperimentConfig(**good, delta=0.0)
        with pytest.raises(InvalidConfig):
            ExperimentConfig(**good, delta=1.0)
        with pytest.raises(InvalidConfig):
            ExperimentConfig(**good, gain="fast")
        with pytest.raises(InvalidConfig):
            ExperimentConfig(**good, k0="smallest")

    def test_from_mapping_sections_and_aliases(self):
        raw = {
            "problem": dict(QUAD_PROBLEM),
            "schedule": {"a": 2.5, "K0": 30},
            "run": {"horizon": 50, "trials": 4, "seed": 9, "delta": 0.25},
            "audit": {"rate": True, "slope_min": -2.0, "fit_k_min": 10},
            "output": {"csv": "x.csv"},
        }
        cfg = ExperimentConfig.from_mapping(raw)
        assert cfg.gain == 2.5
        assert cfg.k0 == 30
        assert cfg.horizon == 50
        assert cfg.trial_count == 4
        assert cfg.delta == 0.25
        assert cfg.audit_rate and not cfg.audit_envelope
        assert cfg.slope_min == -2.0
        assert cfg.fit_k_min == 10
        assert cfg.csv_path == "x.csv"
        assert cfg.json_path is None
        with pytest.raises(InvalidConfig):
            ExperimentConfig.from_mapping({"schedule": {}})

    def test_from_toml(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text(
            '[problem]\nkind = "quadratic"\ndim = 2\n\n'
            "[schedule]\na = 2.5\nk0 = 12\n\n"
            "[run]\nhorizon = 40\ntrials = 2\nseed = 5\n"
        )
        cfg = ExperimentConfig.from_toml(str(path))
        assert cfg.problem["kind"] == "quadratic"
        assert cfg.gain == 2.5
        assert cfg.k0 == 12
        assert cfg.horizon == 40
        bad = tmp_path / "bad.toml"
        bad.write_text("[problem\nkind=")
        with pytest.raises(InvalidConfig):
            ExperimentConfig.from_toml(str(bad))
        with pytest.raises(IoFailure):
            ExperimentConfig.from_toml(str(tmp_path / "missing.toml"))


class TestRunExperiment:
    def test_noiseless_single_trial_equals_gradient_descent(self):
        cfg = ExperimentConfig(
            problem=QUAD_PROBLEM, gain=2.5, k0=5.0, horizon=60, trial_count=1, seed=3
        )
        summary = run_experiment(cfg)
        problem = build_instance(QUAD_PROBLEM)
        x = problem.x0.copy()
        oracle = np.empty(61)
        for k in range(61):
            oracle[k] = problem.objective(x) - problem.f_star
            x = x - (2.5 / (k + 5.0)) * problem.gradient(x)
        np.testing.assert_array_equal(summary.mean_delta, oracle)
        assert summary.quantile_delta is None  # below 20 trials
        assert summary.diverged_trials == ()

    def test_identical_configs_identical_summaries(self):
        cfg = ExperimentConfig(
            problem=TOKEN_PROBLEM, gain="auto", k0=40.0, horizon=300,
            trial_count=24, seed=12,
        )
        s1 = run_experiment(cfg)
        s2 = run_experiment(cfg)
        np.testing.assert_array_equal(s1.mean_delta, s2.mean_delta)
        np.testing.assert_array_equal(s1.quantile_delta, s2.quantile_delta)
        assert s1.to_json_dict() == s2.to_json_dict()

    def test_thread_count_does_not_change_results(self, monkeypatch):
        cfg = ExperimentConfig(
            problem=TOKEN_PROBLEM, gain="auto", k0=40.0, horizon=300,
            trial_count=24, seed=12,
        )
        monkeypatch.setenv("PLMARKOV_THREADS", "1")
        s1 = run_experiment(cfg)
        monkeypatch.setenv("PLMARKOV_THREADS", "4")
        s4 = run_experiment(cfg)
        np.testing.assert_array_equal(s1.mean_delta, s4.mean_delta)
        assert s1.to_json_dict() == s4.to_json_dict()

    def test_auto_gain_and_offset_resolution(self):
        problem = build_instance(TOKEN_PROBLEM)
        mu = problem.constants.mu
        cfg = ExperimentConfig(
            problem=TOKEN_PROBLEM, gain="auto", k0="auto", horizon=30,
            trial_count=2, seed=0,
        )
        summary = run_experiment(cfg)
        assert summary.gain == pytest.approx(2.1 / mu, rel=1e-15)
        inputs = TheoryInputs.from_problem(problem, summary.gain, 1.0, 0.5)
        assert summary.k0 == pytest.approx(k0_lower_bound(inputs), rel=1e-15)
        assert summary.constants["hypotheses"]["k0_feasible_hp"]

        cfg2 = dataclasses.replace(cfg, k0="auto-expected")
        summary2 = run_experiment(cfg2)
        assert summary2.k0 == pytest.approx(expected_bound_floor(inputs), rel=1e-15)
        assert summary2.constants["hypotheses"]["k0_feasible_expected"]
        assert summary2.k0 < summary.k0

    def test_low_gain_rejected(self):
        cfg = ExperimentConfig(
            problem=QUAD_PROBLEM, gain=1.5, k0=10.0, horizon=20, trial_count=1, seed=0
        )
        with pytest.raises(HypothesisViolated):
            run_experiment(cfg)

    def test_divergent_run_aborts_with_trial_ids(self):
        cfg = ExperimentConfig(
            problem=QUAD_PROBLEM, gain=5000.0, k0=2.0, horizon=200,
            trial_count=1, seed=0,
        )
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFinite) as excinfo:
                run_experiment(cfg)
        assert "0" in str(excinfo.value)

    def test_noiseless_envelope_audit_zero_violations(self):
        cfg = ExperimentConfig(
            problem=QUAD_PROBLEM, gain=2.5, k0="auto", horizon=400,
            trial_count=20, seed=2, audit_envelope=True,
        )
        summary = run_experiment(cfg)
        assert summary.envelope is not None
        assert summary.envelope.violation_count == 0
        assert summary.envelope.passed
        assert summary.all_audits_passed()
        # deterministic noiseless instance: the quantile picks one of the
        # identical rows; the mean agrees up to summation rounding
        np.testing.assert_allclose(
            summary.quantile_delta, summary.mean_delta, rtol=1e-15, atol=0.0
        )

    def test_expected_audit_passes_at_floor_offset(self):
        cfg = ExperimentConfig(
            problem=QUAD_PROBLEM, gain=2.5, k0="auto-expected", horizon=400,
            trial_count=20, seed=2, audit_expected=True,
        )
        summary = run_experiment(cfg)
        assert summary.expected is not None
        assert summary.expected.passed
        assert summary.all_audits_passed()

    def test_rate_audit_gates_exit_state(self):
        cfg = ExperimentConfig(
            problem=QUAD_PROBLEM, gain=2.5, k0=5.0, horizon=400, trial_count=1,
            seed=0, audit_rate=True, fit_k_min=50,
        )
        summary = run_experiment(cfg)
        # noiseless curve decays much faster than 1/k, so the audit fails
        assert summary.rate is not None
        assert summary.rate.slope < -1.25
        assert not summary.rate.passed
        assert not summary.all_audits_passed()

    def test_rate_report_informational_when_not_audited(self):
        cfg = ExperimentConfig(
            problem=QUAD_PROBLEM, gain=2.5, k0=5.0, horizon=400, trial_count=1,
            seed=0, fit_k_min=50,
        )
        summary = run_experiment(cfg)
        assert summary.rate is not None
        assert not summary.rate.passed
        assert summary.all_audits_passed()  # nothing enabled, nothing gates

    def test_rate_audit_window_validation(self):
        cfg = ExperimentConfig(
            problem=QUAD_PROBLEM, gain=2.5, k0=200.0, horizon=100, trial_count=1,
            seed=0, audit_rate=True,
        )
        with pytest.raises(InvalidConfig):
            run_experiment(cfg)

    def test_record_noise_path_matches_fast_path(self):
        base = ExperimentConfig(
            problem=QUAD_PROBLEM, gain=2.5, k0=5.0, horizon=40, trial_count=2, seed=3
        )
        recorded = dataclasses.replace(base, record_noise=True)
        np.testing.assert_array_equal(
            run_experiment(base).mean_delta, run_experiment(recorded).mean_delta
        )

    def test_constants_snapshot_matches_summary(self):
        cfg = ExperimentConfig(
            problem=QUAD_PROBLEM, gain=2.5, k0=30.0, horizon=20, trial_count=1, seed=0
        )
        snap = constants_snapshot(cfg)
        summary = run_experiment(cfg)
        assert snap["gain"] == summary.gain
        assert snap["k0"] == summary.k0
        assert snap["theory"] == summary.constants["theory"]
        assert snap["hypotheses"] == summary.constants["hypotheses"]


class TestEmit:
    def _summary(self, horizon=30, trials=24):
        cfg = ExperimentConfig(
            problem=TOKEN_PROBLEM, gain="auto", k0=40.0, horizon=horizon,
            trial_count=trials, seed=8,
        )
        return run_experiment(cfg)

    def test_csv_schema_and_precision(self, tmp_path):
        summary = self._summary()
        path = tmp_path / "out.csv"
        emit(summary, "csv", str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "k,mean_delta,q_delta,hp_envelope,expected_bound"
        assert len(lines) == 32  # header + horizon + 1
        first = lines[1].split(",")
        assert first[0] == "0"
        assert float(first[1]) == summary.mean_delta[0]
        # 17 significant digits: value round-trips exactly
        assert float(lines[2].split(",")[1]) == summary.mean_delta[1]
        # infeasible offset -> envelope and mean-bound columns are nan
        assert first[3] == "nan" and first[4] == "nan"

    def test_json_round_trip(self, tmp_path):
        summary = self._summary()
        path = tmp_path / "out.json"
        emit(summary, "json", str(path))
        reparsed = json.loads(path.read_text())
        assert reparsed == summary.to_json_dict()
        assert reparsed["config"]["problem"] == TOKEN_PROBLEM
        assert reparsed["constants"]["theory"]["mu"] > 0

    def test_byte_identical_across_runs(self, tmp_path):
        digests = []
        for tag in ("one", "two"):
            summary = self._summary()
            csv_path = tmp_path / f"{tag}.csv"
            json_path = tmp_path / f"{tag}.json"
            emit(summary, "csv", str(csv_path))
            emit(summary, "json", str(json_path))
            digests.append(
                (
                    hashlib.sha256(csv_path.read_bytes()).hexdigest(),
                    hashlib.sha256(json_path.read_bytes()).hexdigest(),
                )
            )
        assert digests[0] == digests[1]

    def test_empty_summary_header_only(self, tmp_path):
        summary = self._summary()
        empty = dataclasses.replace(
            summary,
            mean_delta=np.empty(0),
            quantile_delta=None,
            hp_envelope=None,
            expected_bound=None,
        )
        path = tmp_path / "empty.csv"
        emit(empty, "csv", str(path))
        assert path.read_text() == "k,mean_delta,q_delta,hp_envelope,expected_bound\n"

    def test_bad_format_and_io_failure(self, tmp_path):
        summary = self._summary(horizon=10, trials=1)
        with pytest.raises(InvalidConfig):
            emit(summary, "parquet", str(tmp_path / "x"))
        with pytest.raises(IoFailure):
            emit(summary, "csv", str(tmp_path / "no-such-dir" / "x.csv"))

    def test_run_experiment_writes_configured_outputs(self, tmp_path):
        csv_path = tmp_path / "auto.csv"
        json_path = tmp_path / "auto.json"
        cfg = ExperimentConfig(
            problem=QUAD_PROBLEM, gain=2.5, k0=9.0, horizon=15, trial_count=1,
            seed=0, csv_path=str(csv_path), json_path=str(json_path),
        )
        summary = run_experiment(cfg)
        assert csv_path.exists() and json_path.exists()
        assert json.loads(json_path.read_text()) == summary.to_json_dict()
