"""
Discrete-time linear system representation of tabular TD-learning.

In error coordinates x_k = V_k - V^pi the TD iteration reads
x_{k+1} = A x_k + alpha w_k with A = I + alpha (gamma D P^pi - D).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from scipy import linalg

from mdp_core import AssumptionError, InducedChain

logger = logging.getLogger(__name__)

NORM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class LinearSystemModel:
    a_matrix: np.ndarray
    b_vector: np.ndarray
    alpha: float
    rho: float
    w_max: float
    v_max: float
    chain: InducedChain = field(repr=False)

    @property
    def n_states(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def gamma(self) -> float:
        return self.chain.gamma

    def to_error(self, v: np.ndarray) -> np.ndarray:
        """x = V - V^pi"""
        return np.asarray(v, dtype=float) - self.chain.v_pi

    def from_error(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) + self.chain.v_pi

    def to_dict(self) -> Dict:
        return {
            "a_matrix": self.a_matrix.tolist(),
            "b_vector": self.b_vector.tolist(),
            "alpha": self.alpha,
            "rho": self.rho,
            "spectral_radius": spectral_radius(self),
            "w_max": self.w_max,
            "v_max": self.v_max,
            "gamma": self.gamma,
            "d_min": self.chain.d_min,
            "d_max": self.chain.d_max,
            "d": self.chain.d.tolist(),
            "v_pi": self.chain.v_pi.tolist(),
        }


def build_system(chain: InducedChain, alpha: float) -> LinearSystemModel:
    if not 0.0 < alpha < 1.0:
        raise AssumptionError(f"step-size alpha must lie in (0, 1), got {alpha}")

    n = chain.n_states
    gamma = chain.gamma
    d_mat = chain.d_matrix
    a_matrix = np.eye(n) + alpha * (gamma * d_mat @ chain.p_pi - d_mat)
    b_vector = alpha * d_mat @ chain.r_pi
    rho = 1.0 - alpha * chain.d_min * (1.0 - gamma)

    if np.any(a_matrix < 0):
        raise RuntimeError(f"system matrix has negative entries (min {a_matrix.min()})")

    a_matrix.setflags(write=False)
    b_vector.setflags(write=False)
    model = LinearSystemModel(
        a_matrix=a_matrix,
        b_vector=b_vector,
        alpha=float(alpha),
        rho=rho,
        w_max=9.0 / (1.0 - gamma) ** 2,
        v_max=1.0 / (1.0 - gamma),
        chain=chain,
    )
    logger.debug(f"Built system: n={n}, alpha={alpha}, rho={rho:.12g}")
    return model


def infinity_norm(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(matrix).sum(axis=1)))


def infinity_norm_certificate(model: LinearSystemModel) -> tuple:
    """Max absolute row sum of A, which equals rho for every valid model"""
    norm = infinity_norm(model.a_matrix)
    if norm > model.rho + NORM_TOL or abs(norm - model.rho) > NORM_TOL:
        raise RuntimeError(f"|A|_inf = {norm!r} does not match rho = {model.rho!r}")
    return norm, model.rho


def spectral_radius(model: LinearSystemModel) -> float:
    return float(np.max(np.abs(linalg.eigvals(model.a_matrix))))


def propagate_mean(model: LinearSystemModel, x0: np.ndarray, k: int) -> List[np.ndarray]:
    """m_0 = x0, m_{j+1} = A m_j for j < k"""
    if k < 0:
        raise ValueError(f"step count must be nonnegative, got {k}")
    means = [np.array(x0, dtype=float)]
    for _ in range(k):
        means.append(model.a_matrix @ means[-1])
    return means


def matrix_power_norms(model: LinearSystemModel, k_max: int) -> np.ndarray:
    """|A^k|_inf for k = 0..k_max by repeated multiplication"""
    norms = np.empty(k_max + 1)
    power = np.eye(model.n_states)
    for k in range(k_max + 1):
        norms[k] = infinity_norm(power)
        power = power @ model.a_matrix
    return norms


def fixed_point_residual(model: LinearSystemModel) -> float:
    """|V^pi - (A V^pi + b)|_inf; zero up to rounding by the Bellman equation"""
    v_pi = model.chain.v_pi
    return float(np.max(np.abs(v_pi - (model.a_matrix @ v_pi + model.b_vector))))
