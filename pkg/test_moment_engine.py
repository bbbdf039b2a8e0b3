#!/usr/bin/env python3
"""
Tests for the closed-form noise covariance and the correlation recursion.
"""

import sys
import logging

import numpy as np

from bound_suite import td_noise_variance, trace_bound, x_norm_bound
from linear_model import build_system
from mdp_core import Policy, TabularMdp, induce_chain
from moment_engine import (
    MomentPropagationError,
    MomentState,
    moments_frame,
    noise_bounds,
    noise_covariance,
    propagate_correlation,
    trace,
)
from testing_support import random_instance, run_tests, two_state_model

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def enumerated_noise_covariance(chain, x):
    """E[w w^T] with w = e_s delta - B x, by summing over every (s, a, s')"""
    mdp, policy = chain.mdp, chain.policy
    n = chain.n_states
    v = chain.v_pi + x
    d_mat = np.diag(chain.d)
    b = chain.gamma * d_mat @ chain.p_pi - d_mat
    mean_part = b @ x
    cov = np.zeros((n, n))
    for s in range(n):
        for a in range(mdp.n_actions):
            for t in range(n):
                p = chain.d[s] * policy.probs[s, a] * mdp.transition[s, a, t]
                if p == 0:
                    continue
                w = -mean_part.copy()
                w[s] += mdp.reward[s, a, t] + chain.gamma * v[t] - v[s]
                cov += p * np.outer(w, w)
    return cov


def test_closed_form_matches_enumeration():
    rng = np.random.default_rng(4)
    for seed, n in [(0, 2), (1, 3), (2, 4)]:
        _, _, chain = random_instance(seed, n)
        model = build_system(chain, 0.3)
        x = rng.uniform(-1.0, 1.0, n)
        state = MomentState(k=0, mean=x, corr=np.outer(x, x))
        closed = noise_covariance(chain, model, state).w_matrix
        assert np.max(np.abs(closed - enumerated_noise_covariance(chain, x))) <= 1e-12


def test_closed_form_is_affine_in_moments():
    _, _, chain = random_instance(7, 3)
    model = build_system(chain, 0.2)
    rng = np.random.default_rng(8)
    xs = [rng.uniform(-1.0, 1.0, 3) for _ in range(2)]
    mixture = MomentState(k=0, mean=(xs[0] + xs[1]) / 2,
                          corr=(np.outer(xs[0], xs[0]) + np.outer(xs[1], xs[1])) / 2)
    expected = (enumerated_noise_covariance(chain, xs[0]) + enumerated_noise_covariance(chain, xs[1])) / 2
    assert np.max(np.abs(noise_covariance(chain, model, mixture).w_matrix - expected)) <= 1e-12


def test_noise_at_fixed_point():
    _, _, chain, model = two_state_model()
    cov = noise_covariance(chain, model, MomentState.initial(np.zeros(2)))
    # x = 0: W = Diag(d * E[delta_bar^2 | s]) = Diag(0.5 * 0.5625)
    assert np.allclose(cov.w_matrix, np.diag([0.28125, 0.28125]), atol=1e-14)
    stats = noise_bounds(chain, model, MomentState.initial(np.zeros(2)))
    assert stats["mean_norm"] == 0.0
    assert stats["second_moment"] <= stats["w_max"]
    assert stats["l2_norm_upper"] <= stats["sqrt_w_max"]


def test_propagation_stays_psd_and_bounded():
    for seed, n, gamma in [(3, 2, 0.5), (4, 3, 0.9), (5, 4, 0.9)]:
        _, _, chain = random_instance(seed, n, gamma=gamma)
        model = build_system(chain, 0.3)
        x0 = -chain.v_pi
        states = propagate_correlation(chain, model, MomentState.initial(x0), 500)
        assert len(states) == 501 and states[-1].k == 500
        x_bound = x_norm_bound(model, x0)
        for state in states:
            state.validate()
            assert trace(state) <= trace_bound(model, x0, state.k)
            assert np.linalg.eigvalsh(state.corr)[-1] <= x_bound
            w = noise_covariance(chain, model, state)
            assert w.trace <= model.w_max
            assert w.lambda_max <= w.trace + 1e-12


def test_mean_follows_system_matrix():
    _, _, chain, model = two_state_model()
    x0 = np.array([0.5, -1.5])
    states = propagate_correlation(chain, model, MomentState.initial(x0), 10)
    expected = x0.copy()
    for state in states:
        assert np.allclose(state.mean, expected, atol=1e-14)
        expected = model.a_matrix @ expected


def test_zero_td_error_single_state():
    mdp = TabularMdp(n_states=1, n_actions=1, transition=np.ones((1, 1, 1)), reward=np.ones((1, 1, 1)), gamma=0.5)
    chain = induce_chain(mdp, Policy(np.ones((1, 1))))
    assert abs(chain.v_pi[0] - 2.0) <= 1e-14
    model = build_system(chain, 0.5)
    states = propagate_correlation(chain, model, MomentState.initial(np.array([1.0])), 3)
    for state in states:
        assert abs(noise_covariance(chain, model, state).trace) <= 1e-14
    # X_k = a^{2k} X_0 with a = 1 - alpha (1 - gamma) = 0.75
    assert np.allclose([trace(s) for s in states], [1.0, 0.5625, 0.31640625, 0.177978515625], atol=1e-14)


def test_zero_td_error_constant_reward():
    mdp = TabularMdp(n_states=2, n_actions=1, transition=np.full((2, 1, 2), 0.5), reward=np.ones((2, 1, 2)),
                     gamma=0.5)
    chain = induce_chain(mdp, Policy(np.ones((2, 1))))
    assert np.allclose(chain.v_pi, [2.0, 2.0], atol=1e-14)
    assert np.allclose(chain.d, [0.5, 0.5], atol=1e-14)
    assert abs(td_noise_variance(chain)) <= 1e-14
    model = build_system(chain, 0.5)
    cov = noise_covariance(chain, model, MomentState.initial(np.zeros(2)))
    assert np.allclose(cov.w_matrix, 0.0, atol=1e-14)


def test_zero_horizon_and_initial_trace():
    _, _, chain, model = two_state_model()
    init = MomentState.initial(np.zeros(2))
    states = propagate_correlation(chain, model, init, 0)
    assert states == [init]
    assert trace(init) == 0.0
    stepped = propagate_correlation(chain, model, init, 1)[1]
    # X_1 = alpha^2 W_0
    assert abs(trace(stepped) - 0.0625 * 0.5625) <= 1e-14


def test_invalid_state_rejected():
    bad = MomentState(k=3, mean=np.zeros(2), corr=np.array([[1.0, 2.0], [0.0, 1.0]]))
    try:
        bad.validate()
    except MomentPropagationError as e:
        assert e.step == 3
        return
    raise AssertionError("asymmetric correlation accepted")


def test_moments_frame():
    _, _, chain, model = two_state_model()
    states = propagate_correlation(chain, model, MomentState.initial(np.array([1.0, 0.0])), 5)
    frame = moments_frame(chain, model, states)
    assert list(frame.columns) == ["k", "trace_x", "mean_inf", "lambda_max_w", "trace_w", "x_norm_2"]
    assert frame["k"].tolist() == list(range(6))
    assert frame["trace_x"].iloc[0] == 1.0


def main():
    """Run all tests"""
    return run_tests("moment engine", [
        ("Closed form vs enumeration", test_closed_form_matches_enumeration),
        ("Affine in moments", test_closed_form_is_affine_in_moments),
        ("Noise at fixed point", test_noise_at_fixed_point),
        ("PSD and bounded propagation", test_propagation_stays_psd_and_bounded),
        ("Mean dynamics", test_mean_follows_system_matrix),
        ("Zero TD error, single state", test_zero_td_error_single_state),
        ("Zero TD error, constant reward", test_zero_td_error_constant_reward),
        ("Zero horizon", test_zero_horizon_and_initial_trace),
        ("Invalid state", test_invalid_state_rejected),
        ("Moments frame", test_moments_frame),
    ])


if __name__ == "__main__":
    sys.exit(main())
