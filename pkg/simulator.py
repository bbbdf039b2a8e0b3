"""
Seeded Monte Carlo ensembles of tabular TD-learning under i.i.d. sampling.

Runs are grouped in fixed-size blocks; block b draws from
PCG64(SeedSequence((seed, b))), so results depend only on (seed, config) and
not on how many workers execute the blocks. Only probe-step sums and running
averages are kept, never full trajectories.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from bound_suite import chebyshev_threshold
from linear_model import build_system
from mdp_core import AssumptionError, InducedChain, Policy, TabularMdp, iterate_sup_bound, sample_transitions

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 10_000


class BoundednessViolation(RuntimeError):
    """A simulated iterate left the deterministic sup-norm envelope"""


@dataclass
class RunConfig:
    alpha: float
    horizon: int
    n_runs: int
    seed: int
    v0: np.ndarray
    record_ks: List[int]
    epsilons: List[float] = field(default_factory=list)
    block_size: int = DEFAULT_BLOCK_SIZE
    n_workers: int = 1
    progress: bool = False

    def __post_init__(self):
        self.v0 = np.array(self.v0, dtype=float)
        self.record_ks = sorted(int(k) for k in self.record_ks)
        if not 0.0 < self.alpha < 1.0:
            raise AssumptionError(f"step-size alpha must lie in (0, 1), got {self.alpha}")
        if self.v0.size and np.max(np.abs(self.v0)) > 1.0:
            raise AssumptionError(f"initial iterate must satisfy |V_0|_inf <= 1, got {np.max(np.abs(self.v0))}")
        if self.horizon < 0 or self.n_runs < 1 or self.block_size < 1:
            raise ValueError(f"invalid ensemble sizes: horizon={self.horizon}, n_runs={self.n_runs}, "
                             f"block_size={self.block_size}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if any(k < 0 or k > self.horizon for k in self.record_ks):
            raise ValueError(f"probe steps {self.record_ks} must lie in [0, {self.horizon}]")
        if any(eps <= 0 for eps in self.epsilons):
            raise ValueError(f"epsilons must be positive, got {self.epsilons}")


@dataclass
class ProbeStats:
    k: int
    n_runs: int
    emp_mean: np.ndarray
    emp_mean_se: np.ndarray
    emp_corr: np.ndarray
    emp_corr_se: np.ndarray
    emp_mse: float
    emp_mse_se: float
    emp_err: float
    emp_err_se: float
    emp_avg_iterate_err: Optional[float]
    emp_avg_iterate_err_se: Optional[float]
    emp_noise_cov: np.ndarray
    emp_noise_cov_se: np.ndarray
    emp_cross: np.ndarray
    emp_cross_se: np.ndarray
    threshold_coverage: Dict[float, float] = field(default_factory=dict)
    plain_coverage: Dict[float, float] = field(default_factory=dict)
    avg_plain_coverage: Dict[float, float] = field(default_factory=dict)


@dataclass
class EnsembleStats:
    n_runs: int
    probes: Dict[int, ProbeStats]
    max_sup_norm: float
    sup_bound: float


def _mean_se(total: np.ndarray, total_sq: np.ndarray, count: int) -> Tuple[np.ndarray, np.ndarray]:
    mean = total / count
    if count < 2:
        return mean, np.full_like(np.asarray(mean, dtype=float), np.inf)
    var = np.maximum(total_sq - count * mean ** 2, 0.0) / (count - 1)
    return mean, np.sqrt(var / count)


class _ProbeAccumulator:
    """Running sums for one probe step within one block"""

    FIELDS = ("x", "xx", "sq", "norm", "avg_norm", "ww", "xw")

    def __init__(self, n: int, n_eps: int):
        self.count = 0
        self.sums = {
            "x": np.zeros(n), "xx": np.zeros((n, n)), "sq": 0.0, "norm": 0.0,
            "avg_norm": 0.0, "ww": np.zeros((n, n)), "xw": np.zeros((n, n)),
        }
        self.sums_sq = {name: np.zeros_like(np.asarray(value, dtype=float)) for name, value in self.sums.items()}
        self.threshold_hits = np.zeros(n_eps)
        self.plain_hits = np.zeros(n_eps)
        self.avg_plain_hits = np.zeros(n_eps)

    def add(self, name: str, values: np.ndarray) -> None:
        self.sums[name] = self.sums[name] + values.sum(axis=0)
        self.sums_sq[name] = self.sums_sq[name] + (values ** 2).sum(axis=0)

    def merge(self, other: "_ProbeAccumulator") -> None:
        self.count += other.count
        for name in self.FIELDS:
            self.sums[name] = self.sums[name] + other.sums[name]
            self.sums_sq[name] = self.sums_sq[name] + other.sums_sq[name]
        self.threshold_hits += other.threshold_hits
        self.plain_hits += other.plain_hits
        self.avg_plain_hits += other.avg_plain_hits


def td_step(v: np.ndarray, s: np.ndarray, s_next: np.ndarray, r: np.ndarray,
            alpha: float, gamma: float) -> np.ndarray:
    """V(s) <- V(s) + alpha (r + gamma V(s') - V(s)) for every run in the batch"""
    rows = np.arange(v.shape[0])
    delta = r + gamma * v[rows, s_next] - v[rows, s]
    v = v.copy()
    v[rows, s] += alpha * delta
    return v


def _noise_samples(x: np.ndarray, s: np.ndarray, delta: np.ndarray, b_matrix: np.ndarray) -> np.ndarray:
    """w = e_s delta - B x"""
    w = -x @ b_matrix.T
    w[np.arange(x.shape[0]), s] += delta
    return w


class _BlockRunner:
    def __init__(self, mdp: TabularMdp, policy: Policy, chain: InducedChain, config: RunConfig):
        self.mdp = mdp
        self.policy = policy
        self.chain = chain
        self.config = config
        self.model = build_system(chain, config.alpha)
        d_mat = chain.d_matrix
        self.b_matrix = chain.gamma * d_mat @ chain.p_pi - d_mat
        self.sup_bound = iterate_sup_bound(chain, config.v0)
        x0 = self.model.to_error(config.v0)
        self.thresholds = {
            k: np.array([chebyshev_threshold(self.model, x0, k, eps) for eps in config.epsilons])
            for k in config.record_ks
        }

    def block_sizes(self) -> List[int]:
        full, rest = divmod(self.config.n_runs, self.config.block_size)
        return [self.config.block_size] * full + ([rest] if rest else [])

    def run_block(self, job: Tuple[int, int]) -> Tuple[Dict[int, _ProbeAccumulator], float]:
        block_index, size = job
        config = self.config
        chain = self.chain
        gamma = chain.gamma
        n = chain.n_states
        eps = np.asarray(config.epsilons, dtype=float)
        probes = set(config.record_ks)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((config.seed, block_index))))

        v = np.tile(config.v0, (size, 1))
        running_sum = np.zeros((size, n))
        accumulators = {k: _ProbeAccumulator(n, len(eps)) for k in config.record_ks}
        max_sup = float(np.max(np.abs(config.v0)))
        rows = np.arange(size)
        last_probe = config.record_ks[-1] if config.record_ks else -1

        for step in range(max(config.horizon, last_probe) + 1):
            s, _, s_next, r = sample_transitions(self.mdp, self.policy, chain, rng, size)
            if step in probes:
                x = v - chain.v_pi
                delta = r + gamma * v[rows, s_next] - v[rows, s]
                w = _noise_samples(x, s, delta, self.b_matrix)
                norms = np.linalg.norm(x, axis=1)
                acc = accumulators[step]
                acc.count = size
                acc.add("x", x)
                acc.add("xx", x[:, :, None] * x[:, None, :])
                acc.add("sq", norms ** 2)
                acc.add("norm", norms)
                acc.add("ww", w[:, :, None] * w[:, None, :])
                acc.add("xw", x[:, :, None] * w[:, None, :])
                if eps.size:
                    acc.threshold_hits += (norms[:, None] < self.thresholds[step][None, :]).sum(axis=0)
                    acc.plain_hits += (norms[:, None] < eps[None, :]).sum(axis=0)
                if step >= 1:
                    avg_norms = np.linalg.norm(running_sum / step - chain.v_pi, axis=1)
                    acc.add("avg_norm", avg_norms)
                    if eps.size:
                        acc.avg_plain_hits += (avg_norms[:, None] < eps[None, :]).sum(axis=0)
            if step >= config.horizon:
                break
            running_sum += v
            v = td_step(v, s, s_next, r, config.alpha, gamma)
            sup = float(np.max(np.abs(v)))
            if sup > self.sup_bound:
                raise BoundednessViolation(
                    f"block {block_index}, step {step + 1}: |V|_inf = {sup!r} exceeds {self.sup_bound!r}")
            max_sup = max(max_sup, sup)
        return accumulators, max_sup


def _finalize(k: int, acc: _ProbeAccumulator, epsilons: Sequence[float]) -> ProbeStats:
    count = acc.count
    stats = {name: _mean_se(acc.sums[name], acc.sums_sq[name], count) for name in acc.FIELDS}
    avg_mean, avg_se = stats["avg_norm"]
    return ProbeStats(
        k=k,
        n_runs=count,
        emp_mean=stats["x"][0],
        emp_mean_se=stats["x"][1],
        emp_corr=stats["xx"][0],
        emp_corr_se=stats["xx"][1],
        emp_mse=float(stats["sq"][0]),
        emp_mse_se=float(stats["sq"][1]),
        emp_err=float(stats["norm"][0]),
        emp_err_se=float(stats["norm"][1]),
        emp_avg_iterate_err=float(avg_mean) if k >= 1 else None,
        emp_avg_iterate_err_se=float(avg_se) if k >= 1 else None,
        emp_noise_cov=stats["ww"][0],
        emp_noise_cov_se=stats["ww"][1],
        emp_cross=stats["xw"][0],
        emp_cross_se=stats["xw"][1],
        threshold_coverage={eps: float(h / count) for eps, h in zip(epsilons, acc.threshold_hits)},
        plain_coverage={eps: float(h / count) for eps, h in zip(epsilons, acc.plain_hits)},
        avg_plain_coverage={eps: float(h / count) for eps, h in zip(epsilons, acc.avg_plain_hits)} if k >= 1 else {},
    )


def run_td(mdp: TabularMdp, policy: Policy, chain: InducedChain, config: RunConfig) -> EnsembleStats:
    """
    Simulate config.n_runs independent TD trajectories and summarise them in
    error coordinates x = V - V^pi at every probe step.
    """
    runner = _BlockRunner(mdp, policy, chain, config)
    jobs = list(enumerate(runner.block_sizes()))
    logger.info(f"Simulating {config.n_runs} runs x {config.horizon} steps in {len(jobs)} blocks "
                f"(alpha={config.alpha}, seed={config.seed})")

    if config.n_workers > 1:
        with ThreadPoolExecutor(max_workers=config.n_workers) as pool:
            results = list(tqdm(pool.map(runner.run_block, jobs), total=len(jobs),
                                desc="TD ensemble", disable=not config.progress))
    else:
        results = [runner.run_block(job) for job in tqdm(jobs, desc="TD ensemble", disable=not config.progress)]

    n = chain.n_states
    merged = {k: _ProbeAccumulator(n, len(config.epsilons)) for k in config.record_ks}
    max_sup = 0.0
    for accumulators, block_sup in results:
        max_sup = max(max_sup, block_sup)
        for k, acc in accumulators.items():
            merged[k].merge(acc)

    probes = {k: _finalize(k, acc, config.epsilons) for k, acc in merged.items()}
    return EnsembleStats(n_runs=config.n_runs, probes=probes, max_sup_norm=max_sup, sup_bound=runner.sup_bound)


def record_trajectories(mdp: TabularMdp, policy: Policy, chain: InducedChain, alpha: float, horizon: int,
                        n_runs: int, seed: int, v0: np.ndarray, sigma: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Full trajectories V_0..V_horizon, shape (n_runs, horizon + 1, n), plus the
    sampled actions, shape (n_runs, horizon). With sigma[s, a] given, the
    importance-weighted update V(s) += alpha (sigma (r + gamma V(s')) - V(s)) is used.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0))))
    n = chain.n_states
    v = np.tile(np.asarray(v0, dtype=float), (n_runs, 1))
    rows = np.arange(n_runs)
    trajectories = np.empty((n_runs, horizon + 1, n))
    actions = np.empty((n_runs, horizon), dtype=int)
    trajectories[:, 0] = v
    for step in range(horizon):
        s, a, s_next, r = sample_transitions(mdp, policy, chain, rng, n_runs)
        actions[:, step] = a
        if sigma is None:
            v = td_step(v, s, s_next, r, alpha, chain.gamma)
        else:
            ratio = sigma[s, a]
            v = v.copy()
            v[rows, s] += alpha * (ratio * (r + chain.gamma * v[rows, s_next]) - v[rows, s])
        trajectories[:, step + 1] = v
    return trajectories, actions


def averaged_iterate_stats(trajectories: np.ndarray, v_pi: np.ndarray,
                           ks: Sequence[int]) -> Dict[int, Tuple[float, float]]:
    """
    Mean and standard error of |(1/k) sum_{i<k} V_i - V^pi|_2 over runs,
    from trajectories of shape (n_runs, K + 1, n).
    """
    if any(k < 1 for k in ks):
        raise ValueError(f"averaged iterate needs k >= 1, got {list(ks)}")
    n_runs, length, _ = trajectories.shape
    if max(ks) > length:
        raise ValueError(f"k = {max(ks)} exceeds recorded length {length}")
    running = np.cumsum(trajectories, axis=1)
    result = {}
    for k in ks:
        errors = np.linalg.norm(running[:, k - 1] / k - v_pi, axis=1)
        mean, se = _mean_se(errors.sum(), (errors ** 2).sum(), n_runs)
        result[k] = (float(mean), float(se))
    return result


def sample_td_noise_variance(mdp: TabularMdp, policy: Policy, chain: InducedChain, n_samples: int,
                             seed: int, stream: int = 0) -> Tuple[float, float]:
    """Monte Carlo estimate (mean, standard error) of E[delta_bar^2] at V = V^pi"""
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples, got {n_samples}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 2 ** 32 + stream))))
    s, _, s_next, r = sample_transitions(mdp, policy, chain, rng, n_samples)
    squared = (r + chain.gamma * chain.v_pi[s_next] - chain.v_pi[s]) ** 2
    mean, se = _mean_se(squared.sum(), (squared ** 2).sum(), n_samples)
    return float(mean), float(se)
