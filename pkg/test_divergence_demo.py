#!/usr/bin/env python3
"""
Tests for the single-state off-policy example.
"""

import sys
import math
import logging

import numpy as np

from divergence_demo import (
    OffPolicySpec,
    closed_form_step,
    forced_sequence,
    on_policy_contrast,
    replay,
    sampled_demo,
    threshold_table,
)
from testing_support import run_tests

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def test_closed_form_step():
    spec = OffPolicySpec(epsilon=0.5)
    assert abs(spec.coefficient - 1.72) <= 1e-12
    assert abs(closed_form_step(spec, 0.0, 1) - 1.8) <= 1e-12
    assert abs(closed_form_step(spec, 3.0, 2) - 0.3) <= 1e-15
    assert closed_form_step(spec, 0.0, 2) == 0.0
    try:
        closed_form_step(spec, 0.0, 3)
        raise AssertionError("action 3 accepted")
    except ValueError:
        pass


def test_importance_ratios():
    for eps in (0.01, 0.3, 0.9):
        spec = OffPolicySpec(epsilon=eps)
        expected = spec.target_policy.probs / spec.behavior_policy.probs
        assert np.max(np.abs(spec.ratios - expected)) <= 1e-14
    for eps in (0.0, 1.0, -0.2):
        try:
            OffPolicySpec(epsilon=eps)
        except ValueError:
            continue
        raise AssertionError(f"epsilon = {eps} accepted")


def test_forced_sequence():
    spec = OffPolicySpec(epsilon=0.5)
    values, prob = forced_sequence(spec, 2)
    assert np.allclose(values, [0.0, 1.8, 4.896], atol=1e-12)
    assert abs(prob - 0.25) <= 1e-15
    assert abs(forced_sequence(OffPolicySpec(epsilon=0.3), 1)[1] - 0.7) <= 1e-15
    long_values, _ = forced_sequence(spec, 40)
    assert all(b > a for a, b in zip(long_values, long_values[1:]))
    assert long_values[-1] > 1e6
    try:
        forced_sequence(spec, 0)
        raise AssertionError("N = 0 accepted")
    except ValueError:
        pass


def test_convergent_below_threshold():
    spec = OffPolicySpec(epsilon=0.05)
    assert abs(spec.coefficient - (0.1 + 0.81 / 0.95)) <= 1e-12
    assert spec.coefficient < 1.0
    values, _ = forced_sequence(spec, 2000)
    fixed_point = spec.intercept / (1.0 - spec.coefficient)
    assert abs(values[-1] - fixed_point) <= 1e-9 * fixed_point


def test_threshold_table():
    grid = [0.01, 0.05, 0.09, 0.099, 0.101, 0.11, 0.2, 0.5, 0.9, 0.99]
    table = threshold_table(grid)
    assert (table["diverges"] == (table["epsilon"] > 0.1)).all()
    assert table.loc[~table["diverges"], "fixed_point"].notna().all()
    assert table.loc[table["diverges"], "fixed_point"].isna().all()


def test_sampled_streaks_and_replay():
    spec = OffPolicySpec(epsilon=0.5)
    result = sampled_demo(spec, n_runs=100_000, horizon=20, seed=2024, streak_lengths=[1, 2, 3])
    for n in (1, 2, 3):
        p = 0.5 ** n
        assert result.streak_expected[n] == p
        assert abs(result.streak_freqs[n] - p) <= 4 * math.sqrt(p * (1 - p) / 100_000)
    assert result.replay_gap <= 1e-9
    assert result.hist_counts.sum() == 100_000
    assert len(result.runs_frame()) == 100_000
    assert list(result.streak_frame()["N"]) == [1, 2, 3]


def test_almost_surely_second_action():
    spec = OffPolicySpec(epsilon=1 - 1e-12)
    result = sampled_demo(spec, n_runs=1000, horizon=20, seed=3, streak_lengths=[1])
    assert result.max_abs.max() == 0.0
    assert replay(spec, [2, 2, 2], v0=5.0)[-1] < 5.0 * 0.1 ** 3 + 1e-15


def test_on_policy_contrast():
    contrast = on_policy_contrast(horizon=200, n_runs=500, seed=0)
    assert contrast["within"]
    assert contrast["max_sup_norm"] <= 10.0 + 1e-9
    assert contrast["max_sup_norm"] > 9.0


def main():
    """Run all tests"""
    return run_tests("off-policy divergence", [
        ("Closed-form step", test_closed_form_step),
        ("Importance ratios", test_importance_ratios),
        ("Forced sequence", test_forced_sequence),
        ("Convergent regime", test_convergent_below_threshold),
        ("Threshold table", test_threshold_table),
        ("Sampled streaks and replay", test_sampled_streaks_and_replay),
        ("Second action almost surely", test_almost_surely_second_action),
        ("On-policy contrast", test_on_policy_contrast),
    ])


if __name__ == "__main__":
    sys.exit(main())
