"""
Off-policy TD-learning with importance sampling on a single-state MDP.

S = {1}, A = {1, 2}, r = 1 for both actions, gamma = alpha = 0.9. The target
policy always takes action 1; the behavior policy takes it with probability
1 - epsilon. Sampled updates use

    V <- V + alpha (sigma(s, a) (r + gamma V) - V)

which has no deterministic sup-norm bound once epsilon > 0.1.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd

from mdp_core import Policy, TabularMdp, induce_chain
from simulator import RunConfig, record_trajectories, run_td

logger = logging.getLogger(__name__)

GAMMA = 0.9
ALPHA = 0.9
RATIO_TOL = 1e-14
ACTIONS = (1, 2)


@dataclass(frozen=True)
class OffPolicySpec:
    epsilon: float
    gamma: float = GAMMA
    alpha: float = ALPHA

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        target, behavior = self.target_policy.probs, self.behavior_policy.probs
        expected = np.divide(target, behavior)
        if np.max(np.abs(self.ratios - expected)) > RATIO_TOL:
            raise ValueError("importance ratios disagree with pi / b")

    @property
    def mdp(self) -> TabularMdp:
        return TabularMdp(n_states=1, n_actions=2, transition=np.ones((1, 2, 1)),
                          reward=np.ones((1, 2, 1)), gamma=self.gamma)

    @property
    def target_policy(self) -> Policy:
        return Policy(np.array([[1.0, 0.0]]))

    @property
    def behavior_policy(self) -> Policy:
        return Policy(np.array([[1.0 - self.epsilon, self.epsilon]]))

    @property
    def ratios(self) -> np.ndarray:
        """sigma[s, a] with sigma(1,1) = 1/(1-eps), sigma(2,1) = 0"""
        return np.array([[1.0 / (1.0 - self.epsilon), 0.0]])

    @property
    def coefficient(self) -> float:
        """Slope of the action-1 recursion"""
        return 1.0 - self.alpha + self.alpha * self.gamma / (1.0 - self.epsilon)

    @property
    def intercept(self) -> float:
        return self.alpha / (1.0 - self.epsilon)


@dataclass
class DemoResult:
    spec: OffPolicySpec
    max_abs: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    streak_freqs: Dict[int, float]
    streak_expected: Dict[int, float]
    streak_se: Dict[int, float]
    replay_gap: float

    def streak_frame(self) -> pd.DataFrame:
        rows = [{"N": n, "frequency": self.streak_freqs[n], "expected": self.streak_expected[n],
                 "se": self.streak_se[n]} for n in sorted(self.streak_freqs)]
        return pd.DataFrame(rows, columns=["N", "frequency", "expected", "se"])

    def runs_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"run": np.arange(self.max_abs.size), "max_abs_v": self.max_abs})


def closed_form_step(spec: OffPolicySpec, v: float, action: int) -> float:
    if action == 1:
        return spec.coefficient * v + spec.intercept
    if action == 2:
        return (1.0 - spec.alpha) * v
    raise ValueError(f"action must be 1 or 2, got {action}")


def forced_sequence(spec: OffPolicySpec, n_steps: int) -> Tuple[List[float], float]:
    """V_0 = 0 followed by n_steps action-1 updates, and the probability (1-eps)^N of that streak"""
    if n_steps < 1:
        raise ValueError(f"streak length must be >= 1, got {n_steps}")
    values = [0.0]
    for _ in range(n_steps):
        values.append(closed_form_step(spec, values[-1], 1))
    return values, (1.0 - spec.epsilon) ** n_steps


def replay(spec: OffPolicySpec, actions: Sequence[int], v0: float = 0.0) -> List[float]:
    """Closed-form recursion along a given action sequence (actions in {1, 2})"""
    values = [float(v0)]
    for action in actions:
        values.append(closed_form_step(spec, values[-1], int(action)))
    return values


def sampled_demo(spec: OffPolicySpec, n_runs: int, horizon: int, seed: int,
                 streak_lengths: Iterable[int] = (1, 2, 3), bins: int = 20,
                 replay_runs: int = 100) -> DemoResult:
    """
    Sample behavior-policy trajectories from V_0 = 0. A run counts toward the
    streak of length N when its first N actions are all action 1.
    """
    streak_lengths = sorted(int(n) for n in streak_lengths)
    if streak_lengths and (streak_lengths[0] < 1 or streak_lengths[-1] > horizon):
        raise ValueError(f"streak lengths {streak_lengths} must lie in [1, {horizon}]")

    mdp = spec.mdp
    behavior = spec.behavior_policy
    chain = induce_chain(mdp, behavior)
    trajectories, actions = record_trajectories(mdp, behavior, chain, spec.alpha, horizon, n_runs, seed,
                                                v0=np.zeros(1), sigma=spec.ratios)
    values = trajectories[:, :, 0]
    labels = actions + 1
    max_abs = np.max(np.abs(values), axis=1)
    counts, edges = np.histogram(max_abs, bins=bins)

    freqs, expected, se = {}, {}, {}
    for n in streak_lengths:
        hits = np.all(labels[:, :n] == 1, axis=1)
        p = (1.0 - spec.epsilon) ** n
        freqs[n] = float(hits.mean())
        expected[n] = p
        se[n] = float(np.sqrt(p * (1.0 - p) / n_runs))

    gap = 0.0
    for run in range(min(replay_runs, n_runs)):
        closed = np.array(replay(spec, labels[run]))
        rel = np.abs(values[run] - closed) / np.maximum(1.0, np.abs(closed))
        gap = max(gap, float(rel.max()))

    logger.info(f"Off-policy demo eps={spec.epsilon}: max |V| over runs {max_abs.max():.6g}, "
                f"replay gap {gap:.3g}")
    return DemoResult(spec=spec, max_abs=max_abs, hist_counts=counts, hist_edges=edges,
                      streak_freqs=freqs, streak_expected=expected, streak_se=se, replay_gap=gap)


def threshold_table(eps_grid: Iterable[float]) -> pd.DataFrame:
    """Slope of the action-1 recursion per epsilon; the fixed point is reported while the slope is below 1"""
    rows = []
    for eps in eps_grid:
        spec = OffPolicySpec(epsilon=float(eps))
        coef = spec.coefficient
        diverges = coef > 1.0
        rows.append({
            "epsilon": float(eps),
            "coefficient": coef,
            "diverges": bool(diverges),
            "fixed_point": float("nan") if diverges else spec.intercept / (1.0 - coef),
        })
    return pd.DataFrame(rows, columns=["epsilon", "coefficient", "diverges", "fixed_point"])


def on_policy_contrast(horizon: int, n_runs: int, seed: int) -> Dict[str, float]:
    """Same MDP sampled under the target policy (sigma = 1); iterates stay within 1/(1-gamma)"""
    mdp = OffPolicySpec(epsilon=0.5).mdp
    target = Policy(np.array([[1.0, 0.0]]))
    chain = induce_chain(mdp, target)
    config = RunConfig(alpha=ALPHA, horizon=horizon, n_runs=n_runs, seed=seed,
                       v0=np.zeros(1), record_ks=[horizon])
    stats = run_td(mdp, target, chain, config)
    bound = 1.0 / (1.0 - mdp.gamma)
    return {"max_sup_norm": stats.max_sup_norm, "bound": bound, "within": stats.max_sup_norm <= bound}
