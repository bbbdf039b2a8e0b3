"""
Shared instances and the script-mode runner for the test modules.
"""

import logging
from typing import Callable, List, Tuple

import numpy as np

from linear_model import build_system
from mdp_core import Policy, TabularMdp, induce_chain

logger = logging.getLogger(__name__)


def two_state_uniform():
    """Uniform 2-state chain, gamma = 0.5, d = (0.5, 0.5), V^pi = (0.5, -0.5)"""
    mdp = TabularMdp(
        n_states=2,
        n_actions=1,
        transition=np.full((2, 1, 2), 0.5),
        reward=np.array([[[1.0, 0.0]], [[0.0, -1.0]]]),
        gamma=0.5,
    )
    return mdp, Policy(np.ones((2, 1)))


def two_state_model(alpha: float = 0.25):
    """(mdp, policy, chain, model) for the uniform 2-state chain; rho = 0.9375 at alpha = 0.25"""
    mdp, policy = two_state_uniform()
    chain = induce_chain(mdp, policy)
    return mdp, policy, chain, build_system(chain, alpha)


def random_instance(seed: int, n_states: int, n_actions: int = 2, gamma: float = 0.9):
    """Seeded instance with strictly positive transitions (always ergodic)"""
    rng = np.random.default_rng(seed)
    mdp = TabularMdp(
        n_states=n_states,
        n_actions=n_actions,
        transition=rng.dirichlet(np.ones(n_states), size=(n_states, n_actions)),
        reward=rng.uniform(-1.0, 1.0, size=(n_states, n_actions, n_states)),
        gamma=gamma,
    )
    policy = Policy(rng.dirichlet(np.ones(n_actions), size=n_states))
    return mdp, policy, induce_chain(mdp, policy)


def run_tests(title: str, tests: List[Tuple[str, Callable[[], None]]]) -> int:
    """Run (name, function) pairs, log each outcome and return a process exit code"""
    logger.info(f"Starting {title} tests...")

    passed = 0
    total = len(tests)

    for test_name, test_func in tests:
        logger.info(f"\n--- Testing: {test_name} ---")
        try:
            test_func()
            logger.info(f"✅ {test_name} PASSED")
            passed += 1
        except AssertionError as e:
            logger.error(f"❌ {test_name} FAILED: {e}")
        except Exception as e:
            logger.error(f"❌ {test_name} FAILED with exception: {e}")

    logger.info(f"\n--- Test Results ---")
    logger.info(f"Passed: {passed}/{total}")

    if passed == total:
        logger.info("🎉 All tests passed!")
        return 0
    else:
        logger.error("❌ Some tests failed!")
        return 1
