#!/usr/bin/env python3
"""
Tests for MDP validation, chain induction and transition sampling.
"""

import os
import sys
import logging
import tempfile

import numpy as np

from mdp_core import (
    AssumptionError,
    ChainNotErgodicError,
    Policy,
    TabularMdp,
    induce_chain,
    iterate_sup_bound,
    load_mdp_document,
    neumann_value,
    sample_transition,
    sample_transitions,
    save_mdp_document,
    td_error_moments,
)
from testing_support import random_instance, run_tests, two_state_uniform

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def single_action_mdp(p, reward=None, gamma=0.9):
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    reward = np.zeros((n, 1, n)) if reward is None else reward
    return TabularMdp(n_states=n, n_actions=1, transition=p[:, None, :], reward=reward, gamma=gamma), Policy(np.ones((n, 1)))


def test_two_state_chain():
    mdp, policy = two_state_uniform()
    chain = induce_chain(mdp, policy)
    assert np.allclose(chain.d, [0.5, 0.5], atol=1e-14)
    assert abs(chain.d_min - 0.5) <= 1e-14 and abs(chain.d_max - 0.5) <= 1e-14
    assert np.allclose(chain.v_pi, [0.5, -0.5], atol=1e-14)
    assert chain.rewards_bounded


def test_stationary_is_invariant():
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(4), size=4)
    mdp, policy = single_action_mdp(p)
    chain = induce_chain(mdp, policy)
    assert abs(chain.d.sum() - 1.0) <= 1e-12
    assert np.max(np.abs(chain.d @ chain.p_pi - chain.d)) <= 1e-12
    assert np.all(chain.d > 0)


def test_single_state_is_ergodic():
    mdp, policy = single_action_mdp([[1.0]])
    chain = induce_chain(mdp, policy)
    assert chain.d.tolist() == [1.0]


def test_reducible_chain_rejected():
    mdp, policy = single_action_mdp(np.eye(2))
    try:
        induce_chain(mdp, policy)
    except ChainNotErgodicError:
        return
    raise AssertionError("identity chain should be rejected")


def test_periodic_chain_rejected():
    mdp, policy = single_action_mdp([[0.0, 1.0], [1.0, 0.0]])
    try:
        induce_chain(mdp, policy)
    except ChainNotErgodicError:
        return
    raise AssertionError("two-cycle should be rejected")


def test_invalid_inputs_rejected():
    bad_rows = np.array([[[0.5, 0.6]], [[0.5, 0.5]]])
    for args in [(2, 1, bad_rows, np.zeros((2, 1, 2)), 0.5), (1, 1, np.ones((1, 1, 1)), np.zeros((1, 1, 1)), 1.0)]:
        try:
            TabularMdp(*args)
        except AssumptionError:
            raise AssertionError("malformed input reported as an assumption violation")
        except ValueError:
            continue
        raise AssertionError(f"accepted malformed MDP {args}")
    try:
        TabularMdp(1, 1, np.ones((1, 1, 1)), np.full((1, 1, 1), 1.5), 0.5)
        raise AssertionError("rewards above 1 must be refused")
    except AssumptionError:
        pass
    unbounded = TabularMdp(1, 1, np.ones((1, 1, 1)), np.full((1, 1, 1), 1.5), 0.5, bounded_rewards=False)
    assert unbounded.r_max == 1.5


def test_neumann_series_matches_value():
    mdp, policy = two_state_uniform()
    chain = induce_chain(mdp, policy)
    assert np.max(np.abs(neumann_value(chain, 80) - chain.v_pi)) <= 1e-12


def test_neumann_series_on_seeded_instance():
    _, _, chain = random_instance(4, 4)
    assert np.max(np.abs(neumann_value(chain, 200) - chain.v_pi)) <= 1e-8


def test_rewards_scale_linearly():
    mdp, policy, chain = random_instance(9, 4)
    scaled = induce_chain(mdp.scaled_rewards(0.5), policy)
    assert np.max(np.abs(scaled.r_pi - 0.5 * chain.r_pi)) <= 1e-12
    assert np.max(np.abs(scaled.v_pi - 0.5 * chain.v_pi)) <= 1e-12
    assert np.array_equal(scaled.d, chain.d)


def test_off_policy_single_state_chain():
    mdp = TabularMdp(n_states=1, n_actions=2, transition=np.ones((1, 2, 1)), reward=np.ones((1, 2, 1)), gamma=0.9)
    chain = induce_chain(mdp, Policy(np.array([[1.0, 0.0]])))
    assert chain.p_pi.tolist() == [[1.0]]
    assert chain.r_pi.tolist() == [1.0] and chain.d.tolist() == [1.0]
    assert abs(chain.v_pi[0] - 10.0) <= 1e-12


def test_iterate_sup_bound():
    mdp, policy = two_state_uniform()
    chain = induce_chain(mdp, policy)
    assert iterate_sup_bound(chain, np.zeros(2)) == 2.0
    assert iterate_sup_bound(chain, np.array([-1.0, 0.0])) == 2.0
    assert np.max(np.abs(chain.v_pi)) <= iterate_sup_bound(chain, np.zeros(2))


def test_td_error_moments():
    mdp, policy = two_state_uniform()
    chain = induce_chain(mdp, policy)
    e1, e2 = td_error_moments(chain)
    assert np.allclose(e1, [[0.375, -0.375], [0.375, -0.375]], atol=1e-14)
    assert np.allclose(e2, np.full((2, 2), 0.28125), atol=1e-14)
    # Bellman consistency: conditional mean of the TD error vanishes
    assert np.max(np.abs(e1.sum(axis=1))) <= 1e-12


def test_sampling_frequencies():
    mdp, policy = two_state_uniform()
    chain = induce_chain(mdp, policy)
    rng = np.random.default_rng(11)
    n = 100_000
    s, a, s_next, r = sample_transitions(mdp, policy, chain, rng, n)
    se = np.sqrt(0.25 / n)
    assert abs((s == 0).mean() - 0.5) <= 4 * se
    assert abs((s_next == 0).mean() - 0.5) <= 4 * se
    assert np.all(a == 0)
    assert np.all(r == mdp.reward[s, a, s_next])
    single = sample_transition(mdp, policy, chain, rng)
    assert isinstance(single[0], int) and isinstance(single[3], float)


def test_document_io():
    mdp, policy = two_state_uniform()
    with tempfile.TemporaryDirectory() as tmp:
        path = save_mdp_document(os.path.join(tmp, "mdp.json"), mdp, policy)
        loaded, loaded_policy = load_mdp_document(path)
    assert np.array_equal(loaded.transition, mdp.transition)
    assert np.array_equal(loaded.reward, mdp.reward)
    assert np.array_equal(loaded_policy.probs, policy.probs)
    assert loaded.gamma == mdp.gamma


def main():
    """Run all tests"""
    return run_tests("MDP core", [
        ("Two-state chain", test_two_state_chain),
        ("Stationary invariance", test_stationary_is_invariant),
        ("Single-state chain", test_single_state_is_ergodic),
        ("Reducible chain", test_reducible_chain_rejected),
        ("Periodic chain", test_periodic_chain_rejected),
        ("Input validation", test_invalid_inputs_rejected),
        ("Neumann series", test_neumann_series_matches_value),
        ("Neumann series on seeded instance", test_neumann_series_on_seeded_instance),
        ("Reward linearity", test_rewards_scale_linearly),
        ("Off-policy single-state chain", test_off_policy_single_state_chain),
        ("Iterate sup bound", test_iterate_sup_bound),
        ("TD error moments", test_td_error_moments),
        ("Sampling frequencies", test_sampling_frequencies),
        ("Document I/O", test_document_io),
    ])


if __name__ == "__main__":
    sys.exit(main())
