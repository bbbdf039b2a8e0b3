"""
Tabular MDPs, target policies and the Markov chain they induce.

The induced chain carries everything the linear system model needs:
P^pi, R^pi, the stationary distribution d and the exact value function V^pi.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import networkx as nx
import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

PROB_TOL = 1e-12
CHAIN_TOL = 1e-10


class ChainNotErgodicError(ValueError):
    """The induced chain has no unique, strictly positive stationary distribution"""


class AssumptionError(ValueError):
    """An input violates the standing assumptions: alpha in (0,1), |r| <= 1, d > 0, |V_0|_inf <= 1"""


def _as_frozen(array, name: str) -> np.ndarray:
    arr = np.array(array, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TabularMdp:
    n_states: int
    n_actions: int
    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    bounded_rewards: bool = True

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1:
            raise ValueError(f"n_states and n_actions must be positive, got {self.n_states}, {self.n_actions}")
        shape = (self.n_states, self.n_actions, self.n_states)
        transition = _as_frozen(self.transition, "transition")
        reward = _as_frozen(self.reward, "reward")
        if transition.shape != shape:
            raise ValueError(f"transition must have shape {shape}, got {transition.shape}")
        if reward.shape != shape:
            raise ValueError(f"reward must have shape {shape}, got {reward.shape}")
        if np.any(transition < 0):
            raise ValueError("transition has negative entries")
        row_sums = transition.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > PROB_TOL:
            bad = np.argwhere(np.abs(row_sums - 1.0) > PROB_TOL)[0]
            raise ValueError(f"transition P[{bad[0]}][{bad[1]}] sums to {row_sums[tuple(bad)]!r}, expected 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        r_max = float(np.max(np.abs(reward)))
        if self.bounded_rewards and r_max > 1.0:
            raise AssumptionError(f"R_max = {r_max} exceeds 1")
        if r_max > 1.0:
            logger.warning(f"Rewards reach {r_max}; bound evaluation will refuse this MDP")
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.reward)))

    def scaled_rewards(self, factor: float) -> "TabularMdp":
        """Same dynamics with every reward multiplied by factor"""
        return TabularMdp(self.n_states, self.n_actions, self.transition, self.reward * factor,
                          self.gamma, bounded_rewards=False)


@dataclass(frozen=True, eq=False)
class Policy:
    probs: np.ndarray

    def __post_init__(self):
        probs = _as_frozen(self.probs, "policy")
        if probs.ndim != 2:
            raise ValueError(f"policy must be a matrix pi[s][a], got shape {probs.shape}")
        if np.any(probs < 0):
            raise ValueError("policy has negative entries")
        if np.max(np.abs(probs.sum(axis=1) - 1.0)) > PROB_TOL:
            raise ValueError("policy rows must sum to 1")
        object.__setattr__(self, "probs", probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True, eq=False)
class InducedChain:
    p_pi: np.ndarray
    r_pi: np.ndarray
    d: np.ndarray
    d_min: float
    d_max: float
    v_pi: np.ndarray
    gamma: float
    r_max: float
    mdp: TabularMdp = field(repr=False)
    policy: Policy = field(repr=False)

    @property
    def n_states(self) -> int:
        return self.p_pi.shape[0]

    @property
    def rewards_bounded(self) -> bool:
        return self.r_max <= 1.0

    @property
    def d_matrix(self) -> np.ndarray:
        return np.diag(self.d)


def _check_ergodic(p_pi: np.ndarray) -> None:
    """Irreducibility and aperiodicity on the support graph of p_pi"""
    graph = nx.DiGraph()
    graph.add_nodes_from(range(p_pi.shape[0]))
    graph.add_edges_from((int(i), int(j)) for i, j in zip(*np.nonzero(p_pi > 0)))
    if not nx.is_strongly_connected(graph):
        components = [sorted(c) for c in nx.strongly_connected_components(graph)]
        raise ChainNotErgodicError(f"chain not ergodic: reducible, communicating classes {components}")
    if not nx.is_aperiodic(graph):
        raise ChainNotErgodicError("chain not ergodic: periodic transition graph")


def stationary_distribution(p_pi: np.ndarray) -> np.ndarray:
    """Solve (P^T - I) d = 0 with sum(d) = 1 replacing the last balance equation"""
    n = p_pi.shape[0]
    system = p_pi.T - np.eye(n)
    system[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        d = linalg.solve(system, rhs)
    except linalg.LinAlgError as e:
        raise ChainNotErgodicError(f"chain not ergodic: singular balance equations ({e})")
    return d


def induce_chain(mdp: TabularMdp, policy: Policy) -> InducedChain:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {policy.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})")

    pi = policy.probs
    p_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = np.einsum("sa,sat,sat->s", pi, mdp.transition, mdp.reward)

    _check_ergodic(p_pi)
    d = stationary_distribution(p_pi)
    d_min = float(np.min(d))
    if d_min <= 0:
        raise AssumptionError(f"d_min = {d_min} is not positive; every state needs positive visit probability")
    if abs(d.sum() - 1.0) > CHAIN_TOL or np.max(np.abs(d @ p_pi - d)) > CHAIN_TOL:
        raise ChainNotErgodicError("chain not ergodic: stationary solve did not converge to tolerance")

    n = mdp.n_states
    v_pi = linalg.solve(np.eye(n) - mdp.gamma * p_pi, r_pi)
    residual = np.max(np.abs((np.eye(n) - mdp.gamma * p_pi) @ v_pi - r_pi))
    if residual > CHAIN_TOL:
        raise RuntimeError(f"Bellman solve residual {residual} above tolerance")

    for arr in (p_pi, r_pi, d, v_pi):
        arr.setflags(write=False)

    logger.debug(f"Induced chain: d_min={d_min:.6g}, |S|={n}, |V^pi|_inf={np.max(np.abs(v_pi)):.6g}")
    return InducedChain(
        p_pi=p_pi,
        r_pi=r_pi,
        d=d,
        d_min=d_min,
        d_max=float(np.max(d)),
        v_pi=v_pi,
        gamma=mdp.gamma,
        r_max=mdp.r_max,
        mdp=mdp,
        policy=policy,
    )


def neumann_value(chain: InducedChain, terms: int) -> np.ndarray:
    """Truncated series sum_{k<=terms} gamma^k (P^pi)^k R^pi"""
    total = np.zeros_like(chain.r_pi)
    term = np.array(chain.r_pi, dtype=float)
    for _ in range(terms + 1):
        total = total + term
        term = chain.gamma * (chain.p_pi @ term)
    return total


def iterate_sup_bound(chain: InducedChain, v0: np.ndarray) -> float:
    """Deterministic sup-norm bound on every TD iterate"""
    return max(chain.r_max, float(np.max(np.abs(v0)))) / (1.0 - chain.gamma)


def td_error_moments(chain: InducedChain) -> Tuple[np.ndarray, np.ndarray]:
    """
    First and second moments of the Bellman-consistent TD error
    delta_bar(s,a,s') = r(s,a,s') + gamma V^pi(s') - V^pi(s), aggregated over actions:

        e1[s,s'] = sum_a pi(a|s) P(s'|s,a) delta_bar
        e2[s,s'] = sum_a pi(a|s) P(s'|s,a) delta_bar^2
    """
    mdp = chain.mdp
    delta_bar = mdp.reward + chain.gamma * chain.v_pi[None, None, :] - chain.v_pi[:, None, None]
    weights = chain.policy.probs[:, :, None] * mdp.transition
    e1 = np.einsum("sat,sat->st", weights, delta_bar)
    e2 = np.einsum("sat,sat->st", weights, delta_bar ** 2)
    return e1, e2


def _draw_index(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw along the last axis"""
    idx = (cdf <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, cdf.shape[-1] - 1)


def _cdf(probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    return cdf


def sample_transitions(mdp: TabularMdp, policy: Policy, chain: InducedChain,
                       rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Draw `size` i.i.d. transitions: s ~ d, a ~ pi(.|s), s' ~ P(s,a,.)"""
    u = rng.random((3, size))
    s = _draw_index(_cdf(chain.d), u[0])
    a = _draw_index(_cdf(policy.probs)[s], u[1])
    s_next = _draw_index(_cdf(mdp.transition)[s, a], u[2])
    r = mdp.reward[s, a, s_next]
    return s, a, s_next, r


def sample_transition(mdp: TabularMdp, policy: Policy, chain: InducedChain,
                      rng: np.random.Generator) -> Tuple[int, int, int, float]:
    """Observe one transition (s, a, s', r) of the i.i.d. observation model"""
    s, a, s_next, r = sample_transitions(mdp, policy, chain, rng, 1)
    return int(s[0]), int(a[0]), int(s_next[0]), float(r[0])


def mdp_from_document(doc: Dict, bounded_rewards: bool = True) -> Tuple[TabularMdp, Policy]:
    required_fields = ["n_states", "n_actions", "gamma", "transition", "reward", "policy"]
    missing_fields = [f for f in required_fields if f not in doc]
    if missing_fields:
        raise ValueError(f"Missing required fields in MDP document: {missing_fields}")
    mdp = TabularMdp(
        n_states=int(doc["n_states"]),
        n_actions=int(doc["n_actions"]),
        transition=np.array(doc["transition"], dtype=float),
        reward=np.array(doc["reward"], dtype=float),
        gamma=float(doc["gamma"]),
        bounded_rewards=bounded_rewards,
    )
    return mdp, Policy(np.array(doc["policy"], dtype=float))


def mdp_to_document(mdp: TabularMdp, policy: Policy) -> Dict:
    return {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
        "policy": policy.probs.tolist(),
    }


def load_mdp_document(path: str, bounded_rewards: bool = True) -> Tuple[TabularMdp, Policy]:
    """Load an MDP + policy JSON document; probabilities are validated on load"""
    try:
        with open(path, "r") as f:
            doc = json.load(f)
    except FileNotFoundError:
        logger.error(f"MDP document {path} not found")
        raise
    except json.JSONDecodeError as e:
        logger.error(f"Error parsing MDP document {path}: {e}")
        raise
    mdp, policy = mdp_from_document(doc, bounded_rewards=bounded_rewards)
    logger.info(f"Loaded MDP from {path}: |S|={mdp.n_states}, |A|={mdp.n_actions}, gamma={mdp.gamma}")
    return mdp, policy


def save_mdp_document(path: str, mdp: TabularMdp, policy: Policy) -> str:
    with open(path, "w") as f:
        json.dump(mdp_to_document(mdp, policy), f, indent=2)
    return path
