"""
Finite-time error bounds for constant step-size tabular TD-learning.

Every function evaluates a closed-form bound with the analytic constants;
tight variants are reported alongside where they exist.
SIGMA_MAX is the importance ratio bound appearing in several statements;
on-policy it is identically 1.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from linear_model import LinearSystemModel
from mdp_core import AssumptionError, InducedChain, td_error_moments
from moment_engine import MomentState, trace

logger = logging.getLogger(__name__)

SIGMA_MAX = 1.0
NOISE_CONSTANT = 36.0
TIGHT_CONSTANT = 9.0
SCHEDULE_ALPHA_CLAMP = 1.0 - 1e-9


@dataclass
class BoundReport:
    k: int
    bounds: Dict[str, float] = field(default_factory=dict)
    constants: Dict[str, float] = field(default_factory=dict)

    @property
    def informative(self) -> Dict[str, bool]:
        """Probability floors that carry information (floor > 0)"""
        return {name: value > 0 for name, value in self.bounds.items() if "floor" in name}

    def as_row(self) -> Dict[str, float]:
        row = {"k": self.k}
        row.update(self.bounds)
        return row


def _require_bounded_rewards(chain: InducedChain) -> None:
    if not chain.rewards_bounded:
        raise AssumptionError(f"bounds require |r| <= 1, MDP has R_max = {chain.r_max}")


def _norms(x0: np.ndarray) -> Tuple[float, float]:
    x0 = np.asarray(x0, dtype=float)
    return float(np.linalg.norm(x0)), float(np.max(np.abs(x0)))


def _noise_term(model: LinearSystemModel, constant: float = NOISE_CONSTANT) -> float:
    """constant * sigma_max^2 * n^2 * alpha / (d_min (1 - gamma)^3)"""
    n = model.n_states
    return (constant * SIGMA_MAX ** 2 * n ** 2 * model.alpha
            / (model.chain.d_min * (1.0 - model.gamma) ** 3))


def _require_positive(name: str, value: float) -> None:
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")


def mean_bound(model: LinearSystemModel, x0: np.ndarray, k: int) -> float:
    """rho^k |x0|_inf"""
    return model.rho ** k * _norms(x0)[1]


def trace_bound(model: LinearSystemModel, x0: np.ndarray, k: int) -> float:
    _require_bounded_rewards(model.chain)
    l2, _ = _norms(x0)
    n = model.n_states
    return _noise_term(model) + l2 ** 2 * n ** 2 * model.rho ** (2 * k)


def tight_trace_bound(model: LinearSystemModel, x0: np.ndarray, k: int) -> float:
    """Same shape as trace_bound with the constant 9 that the derivation actually yields"""
    _require_bounded_rewards(model.chain)
    l2, _ = _norms(x0)
    n = model.n_states
    return _noise_term(model, TIGHT_CONSTANT) + l2 ** 2 * n ** 2 * model.rho ** (2 * k)


def mse_bound(model: LinearSystemModel, x0: np.ndarray, k: int) -> Tuple[float, float]:
    """(bound on E|V_k - V^pi|_2, bound on E|V_k - V^pi|_2^2)"""
    _require_bounded_rewards(model.chain)
    l2, _ = _norms(x0)
    n = model.n_states
    gamma = model.gamma
    d_min = model.chain.d_min
    first = 6.0 * n * math.sqrt(model.alpha) / (d_min ** 0.5 * (1.0 - gamma) ** 1.5)
    l2_bound = first + l2 * n * model.rho ** k
    squared = 36.0 * n ** 2 * model.alpha / (d_min * (1.0 - gamma) ** 3) + l2 ** 2 * n ** 2 * model.rho ** (2 * k)
    return l2_bound, squared


def chebyshev_threshold(model: LinearSystemModel, x0: np.ndarray, k: int, epsilon: float) -> float:
    """eps + rho^k sqrt(n) |x0|_inf"""
    _require_positive("epsilon", epsilon)
    return epsilon + model.rho ** k * math.sqrt(model.n_states) * _norms(x0)[1]


def chebyshev_floor(model: LinearSystemModel, x0: np.ndarray, k: int, epsilon: float) -> Tuple[float, float]:
    """
    P[|V_k - V^pi|_2 < threshold] >= prob_floor.

    The threshold uses |x0|_inf while the floor uses |x0|_2.
    """
    _require_positive("epsilon", epsilon)
    _require_bounded_rewards(model.chain)
    l2, _ = _norms(x0)
    n = model.n_states
    threshold = chebyshev_threshold(model, x0, k, epsilon)
    prob_floor = 1.0 - _noise_term(model) / epsilon ** 2 - l2 ** 2 * n ** 2 * model.rho ** (2 * k) / epsilon ** 2
    return threshold, prob_floor


def exact_chebyshev_floor(state: MomentState, epsilon: float) -> Tuple[float, float]:
    """Chebyshev step with exact moments: P[|x_k|_2 < eps + |E x_k|_2] >= 1 - tr(X_k)/eps^2"""
    _require_positive("epsilon", epsilon)
    threshold = epsilon + float(np.linalg.norm(state.mean))
    return threshold, 1.0 - trace(state) / epsilon ** 2


def markov_floor(model: LinearSystemModel, x0: np.ndarray, k: int, epsilon: float) -> float:
    """P[|V_k - V^pi|_2 < eps] >= 1 - (final-iterate bound)/eps"""
    _require_positive("epsilon", epsilon)
    l2_bound, _ = mse_bound(model, x0, k)
    return 1.0 - l2_bound / epsilon


def averaged_bound(model: LinearSystemModel, x0: np.ndarray, k: int) -> float:
    """Bound on E|(1/k) sum_{i<k} V_i - V^pi|_2"""
    if k < 1:
        raise ValueError(f"averaged iterate needs k >= 1, got {k}")
    _require_bounded_rewards(model.chain)
    l2, _ = _norms(x0)
    n = model.n_states
    d_min = model.chain.d_min
    gamma = model.gamma
    transient = math.sqrt(n / (k * model.alpha * d_min * (1.0 - gamma))) * l2
    return transient + math.sqrt(_noise_term(model))


def averaged_markov_floor(model: LinearSystemModel, x0: np.ndarray, k: int, epsilon: float) -> float:
    _require_positive("epsilon", epsilon)
    return 1.0 - averaged_bound(model, x0, k) / epsilon


def schedule_alpha(horizon: int) -> float:
    if horizon < 1:
        raise ValueError(f"final iteration number must be >= 1, got {horizon}")
    alpha = 1.0 / math.sqrt(horizon)
    if alpha >= 1.0:
        logger.warning(f"alpha = 1/sqrt({horizon}) = {alpha} leaves (0, 1); clamping to {SCHEDULE_ALPHA_CLAMP}")
        alpha = SCHEDULE_ALPHA_CLAMP
    return alpha


def schedule_bound(chain: InducedChain, x0: np.ndarray, horizon: int) -> Tuple[float, float]:
    """Averaged-iterate bound at T = horizon with the prescribed step-size alpha = 1/sqrt(T)"""
    alpha = schedule_alpha(horizon)
    _require_bounded_rewards(chain)
    l2, _ = _norms(x0)
    n = chain.n_states
    d_min = chain.d_min
    gamma = chain.gamma
    transient = math.sqrt(n / (d_min * (1.0 - gamma))) * l2
    noise = math.sqrt(NOISE_CONSTANT * alpha * SIGMA_MAX ** 2 * n ** 2 / (d_min * (1.0 - gamma) ** 3))
    return alpha, horizon ** -0.25 * (transient + noise)


def td_noise_variance(chain: InducedChain) -> float:
    """sigma^2 = E[delta_bar^2] under s ~ d, a ~ pi, s' ~ P"""
    _, e2 = td_error_moments(chain)
    return float(chain.d @ e2.sum(axis=1))


def comparison_step_limit(chain: InducedChain) -> float:
    return chain.d_min * (1.0 - chain.gamma) / 8.0


def comparison_bound(chain: InducedChain, model: LinearSystemModel, x0: np.ndarray, k: int) -> float:
    """
    Projected-SGD style averaged-iterate bound specialised to the tabular case;
    valid only for alpha <= d_min (1 - gamma) / 8.
    """
    limit = comparison_step_limit(chain)
    if model.alpha > limit:
        raise ValueError(f"comparison bound needs alpha <= d_min (1 - gamma) / 8 = {limit!r}, got {model.alpha}")
    _require_bounded_rewards(chain)
    l2, _ = _norms(x0)
    gamma = chain.gamma
    d_min = chain.d_min
    sigma2 = td_noise_variance(chain)
    decay = math.sqrt(math.exp(-model.alpha * (1.0 - gamma) * d_min * k) / d_min) * l2
    return decay + math.sqrt(2.0 * model.alpha * sigma2 / ((1.0 - gamma) * d_min ** 2))


def x_norm_bound(model: LinearSystemModel, x0: np.ndarray) -> float:
    """Uniform bound on |X_k|_2: alpha^2 W_max / (1 - rho^2) + n |X_0|_2"""
    l2, _ = _norms(x0)
    return model.alpha ** 2 * model.w_max / (1.0 - model.rho ** 2) + model.n_states * l2 ** 2


def evaluate_bounds(chain: InducedChain, model: LinearSystemModel, x0: np.ndarray, k: int,
                    epsilons: Iterable[float] = (), state: Optional[MomentState] = None,
                    schedule_horizons: Iterable[int] = ()) -> BoundReport:
    """
    All bounds at step k; epsilon-indexed entries are keyed as name@eps.
    The schedule bound (step-size 1/sqrt(k)) is reported only when k is one of schedule_horizons.
    """
    l2_bound, squared = mse_bound(model, x0, k)
    report = BoundReport(k=k)
    bounds = report.bounds
    bounds["mean_inf"] = mean_bound(model, x0, k)
    bounds["trace"] = trace_bound(model, x0, k)
    bounds["trace_tight"] = tight_trace_bound(model, x0, k)
    bounds["mse_l2"] = l2_bound
    bounds["mse_sq"] = squared
    bounds["x_norm"] = x_norm_bound(model, x0)
    if k >= 1:
        bounds["avg_l2"] = averaged_bound(model, x0, k)
        if k in set(schedule_horizons):
            bounds["schedule"] = schedule_bound(chain, x0, k)[1]
    if model.alpha <= comparison_step_limit(chain):
        bounds["comparison_avg"] = comparison_bound(chain, model, x0, k)
    else:
        logger.debug(f"alpha = {model.alpha} above comparison step limit; comparison_avg omitted")

    for eps in epsilons:
        threshold, floor = chebyshev_floor(model, x0, k, eps)
        bounds[f"chebyshev_threshold@{eps:g}"] = threshold
        bounds[f"chebyshev_floor@{eps:g}"] = floor
        bounds[f"markov_floor@{eps:g}"] = markov_floor(model, x0, k, eps)
        if k >= 1:
            bounds[f"avg_markov_floor@{eps:g}"] = averaged_markov_floor(model, x0, k, eps)
        if state is not None:
            exact_threshold, exact_floor = exact_chebyshev_floor(state, eps)
            bounds[f"exact_chebyshev_threshold@{eps:g}"] = exact_threshold
            bounds[f"exact_chebyshev_floor@{eps:g}"] = exact_floor

    report.constants.update({
        "rho": model.rho,
        "w_max": model.w_max,
        "v_max": model.v_max,
        "sigma_max_used": SIGMA_MAX,
        "d_min": chain.d_min,
        "alpha": model.alpha,
        "sigma2": td_noise_variance(chain),
    })
    return report
