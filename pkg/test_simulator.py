#!/usr/bin/env python3
"""
Tests for the seeded TD ensemble: determinism, agreement with the exact
moments and the deterministic sup-norm envelope.
"""

import sys
import logging
import itertools

import numpy as np

from bound_suite import (
    averaged_bound,
    chebyshev_floor,
    comparison_bound,
    comparison_step_limit,
    markov_floor,
    mse_bound,
    td_noise_variance,
)
from linear_model import build_system
from mdp_core import AssumptionError, Policy, TabularMdp, induce_chain
from moment_engine import MomentState, noise_covariance, propagate_correlation, trace
from simulator import (
    RunConfig,
    averaged_iterate_stats,
    record_trajectories,
    run_td,
    sample_td_noise_variance,
)
from testing_support import random_instance, run_tests, two_state_model

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

WINDOW = 4.0


def within(empirical, exact, se):
    return bool(np.all(np.abs(np.asarray(empirical) - np.asarray(exact)) <= WINDOW * np.asarray(se) + 1e-12))


def test_config_validation():
    for kwargs, error in [
        (dict(alpha=1.0), AssumptionError),
        (dict(v0=np.array([1.5, 0.0])), AssumptionError),
        (dict(record_ks=[11]), ValueError),
        (dict(n_runs=0), ValueError),
        (dict(epsilons=[0.0]), ValueError),
    ]:
        base = dict(alpha=0.25, horizon=10, n_runs=10, seed=1, v0=np.zeros(2), record_ks=[10])
        base.update(kwargs)
        try:
            RunConfig(**base)
        except error:
            continue
        raise AssertionError(f"accepted invalid config {kwargs}")


def test_deterministic_and_worker_independent():
    mdp, policy, chain, _ = two_state_model()
    base = dict(alpha=0.25, horizon=30, n_runs=2000, seed=123, v0=np.zeros(2), record_ks=[0, 5, 30],
                epsilons=[1.0], block_size=500)
    first = run_td(mdp, policy, chain, RunConfig(**base))
    second = run_td(mdp, policy, chain, RunConfig(**base))
    threaded = run_td(mdp, policy, chain, RunConfig(**base, n_workers=3))
    for k in (0, 5, 30):
        assert np.array_equal(first.probes[k].emp_mean, second.probes[k].emp_mean)
        assert np.array_equal(first.probes[k].emp_corr, threaded.probes[k].emp_corr)
        assert first.probes[k].emp_mse == threaded.probes[k].emp_mse
        assert first.probes[k].plain_coverage == threaded.probes[k].plain_coverage
    assert first.max_sup_norm == threaded.max_sup_norm
    assert first.probes[0].emp_avg_iterate_err is None


def test_matches_exact_moments():
    grid = list(itertools.product([2, 3, 4], [0.1, 0.3], [0.5, 0.9]))
    for seed in range(10):
        n, alpha, gamma = grid[seed]
        mdp, policy, chain = random_instance(seed, n, gamma=gamma)
        model = build_system(chain, alpha)
        v0 = np.zeros(chain.n_states)
        x0 = model.to_error(v0)
        states = propagate_correlation(chain, model, MomentState.initial(x0), 100)
        stats = run_td(mdp, policy, chain, RunConfig(alpha=alpha, horizon=100, n_runs=10_000, seed=5 + seed,
                                                      v0=v0, record_ks=[1, 10, 100]))
        for k, at_k in stats.probes.items():
            state = states[k]
            assert within(at_k.emp_mean, state.mean, at_k.emp_mean_se), (seed, k, at_k.emp_mean, state.mean)
            assert within(at_k.emp_mse, trace(state), at_k.emp_mse_se), (seed, k, at_k.emp_mse, trace(state))


def test_iterates_stay_bounded():
    for seed, gamma in [(1, 0.5), (3, 0.9)]:
        mdp, policy, chain = random_instance(seed, 4, gamma=gamma)
        v0 = np.array([1.0, -1.0, 0.5, -0.5])
        stats = run_td(mdp, policy, chain, RunConfig(alpha=0.9, horizon=300, n_runs=2000, seed=seed,
                                                      v0=v0, record_ks=[300]))
        assert stats.max_sup_norm <= stats.sup_bound
        assert stats.sup_bound == max(chain.r_max, 1.0) / (1.0 - gamma)


def test_trajectories_agree_with_ensemble():
    mdp, policy, chain, model = two_state_model()
    v0 = np.zeros(2)
    stats = run_td(mdp, policy, chain, RunConfig(alpha=0.25, horizon=40, n_runs=1000, seed=9, v0=v0,
                                                 record_ks=[10, 40]))
    trajectories, actions = record_trajectories(mdp, policy, chain, 0.25, 40, 1000, 9, v0)
    assert trajectories.shape == (1000, 41, 2) and actions.shape == (1000, 40)
    averaged = averaged_iterate_stats(trajectories, chain.v_pi, [10, 40])
    for k in (10, 40):
        assert abs(averaged[k][0] - stats.probes[k].emp_avg_iterate_err) <= 1e-9
        mse = np.mean(np.sum((trajectories[:, k] - chain.v_pi) ** 2, axis=1))
        assert abs(mse - stats.probes[k].emp_mse) <= 1e-9
        assert averaged[k][0] <= averaged_bound(model, model.to_error(v0), k)
    try:
        averaged_iterate_stats(trajectories, chain.v_pi, [0])
        raise AssertionError("k = 0 accepted")
    except ValueError:
        pass


def test_deterministic_single_state_trajectory():
    mdp = TabularMdp(n_states=1, n_actions=1, transition=np.ones((1, 1, 1)), reward=np.ones((1, 1, 1)), gamma=0.5)
    policy = Policy(np.ones((1, 1)))
    chain = induce_chain(mdp, policy)
    trajectories, _ = record_trajectories(mdp, policy, chain, 0.5, 2, 3, 1, np.zeros(1))
    for run in trajectories:
        assert np.allclose(run[:, 0], [0.0, 0.5, 0.875], atol=1e-15)


def test_coverage_meets_probability_floors():
    cases = [two_state_model()[:3] + (0.25,), random_instance(6, 3, gamma=0.5) + (0.3,)]
    for mdp, policy, chain, alpha in cases:
        model = build_system(chain, alpha)
        v0 = np.full(chain.n_states, 0.5)
        x0 = model.to_error(v0)
        # twice the final-iterate bound at k = 1 keeps both floors positive for every k >= 1
        epsilons = [48.0, float(2.0 * mse_bound(model, x0, 1)[0])]
        stats = run_td(mdp, policy, chain, RunConfig(alpha=alpha, horizon=50, n_runs=5000, seed=21, v0=v0,
                                                     record_ks=[1, 10, 50], epsilons=epsilons))
        checked = 0
        for k, at_k in stats.probes.items():
            for eps in epsilons:
                for coverage, floor in ((at_k.threshold_coverage[eps], chebyshev_floor(model, x0, k, eps)[1]),
                                        (at_k.plain_coverage[eps], markov_floor(model, x0, k, eps))):
                    if floor <= 0.0:
                        continue
                    se = np.sqrt(floor * (1.0 - floor) / at_k.n_runs)
                    assert coverage >= floor - 3.0 * se, (k, eps, coverage, floor)
                    checked += 1
        assert checked >= 2 * len(stats.probes)


def test_comparison_bound_dominates_averaged_error():
    for seed in range(5):
        mdp, policy, chain = random_instance(seed, 3)
        alpha = comparison_step_limit(chain)
        model = build_system(chain, alpha)
        v0 = np.zeros(3)
        x0 = model.to_error(v0)
        stats = run_td(mdp, policy, chain, RunConfig(alpha=alpha, horizon=1000, n_runs=1000, seed=40 + seed,
                                                     v0=v0, record_ks=[10, 100, 1000]))
        for k, at_k in stats.probes.items():
            bound = comparison_bound(chain, model, x0, k)
            assert at_k.emp_avg_iterate_err <= bound, (seed, k, at_k.emp_avg_iterate_err, bound)


def test_sampled_td_noise_variance():
    mdp, policy, chain = random_instance(4, 3)
    exact = td_noise_variance(chain)
    estimate, se = sample_td_noise_variance(mdp, policy, chain, 100_000, seed=3)
    assert abs(estimate - exact) <= WINDOW * se


def main():
    """Run all tests"""
    return run_tests("simulator", [
        ("Config validation", test_config_validation),
        ("Determinism", test_deterministic_and_worker_independent),
        ("Exact moments oracle (10 instances)", test_matches_exact_moments),
        ("Sup-norm envelope", test_iterates_stay_bounded),
        ("Trajectories vs ensemble", test_trajectories_agree_with_ensemble),
        ("Deterministic single-state trajectory", test_deterministic_single_state_trajectory),
        ("Coverage vs probability floors", test_coverage_meets_probability_floors),
        ("Comparison bound dominance", test_comparison_bound_dominates_averaged_error),
        ("TD noise variance", test_sampled_td_noise_variance),
    ])


if __name__ == "__main__":
    sys.exit(main())
