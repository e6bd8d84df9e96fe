"""Tests for harness.py - replicate runner and statistical experiments."""

import numpy as np
import pandas as pd
import pytest

import config
from harness import (
    Check, ExperimentReport, TooFewMajorsError, cross_validation, curve_convergence, extinction_check,
    reed_frost_check, run_replicates, stationary_laws_check,
)
from models import make_rng

slow = pytest.mark.skipif(not config.RUN_SLOW_TESTS, reason="set EPICURVE_SLOW=1 to run")


def draw_integer(stream):
    return int(stream.integers(1_000_000))


class TestReport:
    """Tests for report pass/fail bookkeeping."""

    def test_passed_and_failures(self):
        report = ExperimentReport("demo", "spec", pd.DataFrame(), pd.DataFrame(),
                                  checks={"a": Check(0.1, 0.2, True), "b": Check(0.3, 0.2, False)})
        assert not report.passed
        assert report.failures() == ["b"]

    def test_check_casts_numpy_scalars(self):
        check = Check(np.float64(0.1), np.float64(0.2), np.bool_(True))
        assert type(check.value) is float and type(check.tolerance) is float
        assert type(check.passed) is bool

    def test_too_few_majors_message(self):
        err = TooFewMajorsError(3, 50, 1000)
        assert err.achieved == 3
        assert "only 3 of 50" in str(err)


class TestRunReplicates:
    """Tests for stream-ordered replicate execution."""

    def test_results_in_stream_order(self):
        streams = make_rng(4).spawn(5)
        expected = [draw_integer(s) for s in make_rng(4).spawn(5)]
        assert run_replicates(draw_integer, streams, desc="test") == expected


class TestCurveConvergence:
    """Tests for the convergence experiment."""

    def test_needs_enough_replicates(self, markov_sir, rng):
        with pytest.raises(ValueError, match="at least"):
            curve_convergence(markov_sir, [1000], 5, rng)

    def test_major_factor(self, markov_sir, rng):
        with pytest.raises(ValueError, match="major_factor"):
            curve_convergence(markov_sir, [1000], 100, rng, major_factor=3)

    @slow
    def test_markov_sir_converges(self, markov_sir):
        report = curve_convergence(markov_sir, [1000, 10_000], 50, make_rng(20240611))
        assert list(report.summary["N"]) == [1000, 10_000]
        assert report.summary["median"].iloc[-1] < report.summary["median"].iloc[0]
        assert report.checks["median_at_largest_N"].passed


class TestReedFrostCheck:
    """Tests for the Reed-Frost time-shift experiment."""

    def test_small_run(self):
        report = reed_frost_check(2.0, 10_000, 20, [0, 1, 2], make_rng(0))
        assert report.diagnostics["n"] == 6
        assert set(report.records["r"]) == {0, 1, 2}
        assert len(report.records) == 60
        assert "median_deviation" in report.checks

    def test_r_before_generation_zero(self):
        with pytest.raises(ValueError, match="before generation 0"):
            reed_frost_check(2.0, 10_000, 5, [-13], make_rng(0))

    def test_subcritical(self):
        with pytest.raises(ValueError, match="must exceed 1"):
            reed_frost_check(1.0, 100, 5, [0], make_rng(0))

    @slow
    def test_time_shift_limit(self):
        report = reed_frost_check(2.0, 100_000, 200, range(-2, 5), make_rng(20240613))
        assert report.passed


class TestExtinctionCheck:
    """Tests for minor-outbreak frequencies."""

    def test_markov_sir(self, markov_sir):
        report = extinction_check(markov_sir, 300, 200, 1, make_rng(1))
        row = report.summary.iloc[0]
        assert row["expected"] == pytest.approx(0.5)
        assert abs(row["minor_frequency"] - 0.5) < 0.15
        assert len(report.records) == 200

    def test_several_initial_infectives(self, markov_sir):
        report = extinction_check(markov_sir, 300, 100, 2, make_rng(2))
        assert report.summary.iloc[0]["expected"] == pytest.approx(0.25)

    def test_markov_sir_large_population(self, markov_sir):
        """Half of all runs stay minor when N = 10^5."""
        report = extinction_check(markov_sir, 100_000, 1000, 1, make_rng(7))
        assert report.summary.iloc[0]["expected"] == pytest.approx(0.5)
        assert report.passed
        assert report.records["infections"].max() <= 10_000

    def test_reed_frost_single_infective(self, reed_frost):
        """Minor frequency matches the Po(2) extinction probability 0.2032."""
        report = extinction_check(reed_frost, 100_000, 1000, 1, make_rng(8))
        assert report.summary.iloc[0]["expected"] == pytest.approx(0.2032, abs=1e-4)
        assert report.passed

    def test_reed_frost_many_infectives(self, reed_frost):
        """With 50 initial infectives a minor outbreak is practically impossible."""
        report = extinction_check(reed_frost, 100_000, 200, 50, make_rng(9))
        assert report.summary.iloc[0]["expected"] < 1e-30
        assert report.summary.iloc[0]["minor_frequency"] == 0.0
        assert report.passed

    def test_check_values_are_python_floats(self, markov_sir):
        check = extinction_check(markov_sir, 300, 50, 1, make_rng(3)).checks["minor_frequency"]
        assert type(check.value) is float
        assert type(check.tolerance) is float
        assert type(check.passed) is bool


class TestStationaryLaws:
    """Tests for the age and residual-delay experiment."""

    def test_invalid_time(self, markov_sir, rng):
        with pytest.raises(ValueError, match="T must be positive"):
            stationary_laws_check(markov_sir, 0.0, rng)

    def test_records(self, two_type):
        report = stationary_laws_check(two_type, 7.0, make_rng(3), min_births=200)
        laws = set(report.records["law"])
        assert laws == {"ages", "residual"}
        assert report.records["ks"].between(0.0, 1.0).all()
        assert "birth_fractions" in report.checks
        assert report.summary.iloc[0]["births"] >= 200

    @slow
    def test_markov_sir_laws(self, markov_sir):
        report = stationary_laws_check(markov_sir, 10.0, make_rng(20240611))
        assert report.passed


class TestCrossValidation:
    """Tests for solver against Monte Carlo."""

    def test_markov_sir(self, markov_sir):
        grid = np.linspace(-4.0, 4.0, 81)
        report = cross_validation(markov_sir, 2000, make_rng(5), grid=grid)
        assert list(report.records.columns) == ["u", "s_hat_1", "mc_s_hat_1"]
        assert report.checks["sup_distance_1"].value < 0.06
        assert all(type(check.value) is float for check in report.checks.values())
        assert report.summary.iloc[0]["expected_mean"] == pytest.approx(2.0)

    def test_reed_frost_expected_mean(self, reed_frost):
        grid = np.linspace(-2.0, 4.0, 13)
        report = cross_validation(reed_frost, 1000, make_rng(6), grid=grid)
        assert report.summary.iloc[0]["expected_mean"] == pytest.approx(2.0)

    @slow
    def test_volz_regular(self, volz_regular):
        report = cross_validation(volz_regular, 10_000, make_rng(20240615))
        assert report.passed
