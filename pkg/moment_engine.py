"""
Exact first and second moment propagation for the TD error system.

The noise covariance W_k = E[w_k w_k^T] is affine in (E[x_k], E[x_k x_k^T]):

    W_k = Diag_s( d(s) q_s ) - B X_k B^T,      B = gamma D P^pi - D

where q_s = E[delta_k^2 | s_k = s] expanded around the Bellman-consistent TD
error delta_bar(s,a,s') = r + gamma V^pi(s') - V^pi(s).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy import linalg

from linear_model import LinearSystemModel
from mdp_core import InducedChain, td_error_moments

logger = logging.getLogger(__name__)

PSD_TOL = 1e-10
SYM_TOL = 1e-12


class MomentPropagationError(RuntimeError):
    """Numerical loss of symmetry or positive semidefiniteness during propagation"""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


def _min_eig(matrix: np.ndarray) -> float:
    return float(linalg.eigvalsh(matrix)[0])


def _psd_tolerance(matrix: np.ndarray) -> float:
    return PSD_TOL * max(1.0, float(np.max(np.abs(matrix))))


@dataclass(frozen=True, eq=False)
class MomentState:
    k: int
    mean: np.ndarray
    corr: np.ndarray

    def validate(self) -> None:
        if np.max(np.abs(self.corr - self.corr.T)) > SYM_TOL * max(1.0, float(np.max(np.abs(self.corr)))):
            raise MomentPropagationError("correlation is not symmetric", self.k)
        tol = _psd_tolerance(self.corr)
        if _min_eig(self.corr) < -tol:
            raise MomentPropagationError("correlation is not positive semidefinite", self.k)
        cov = self.corr - np.outer(self.mean, self.mean)
        if _min_eig((cov + cov.T) / 2.0) < -tol:
            raise MomentPropagationError("covariance corr - mean mean^T is not positive semidefinite", self.k)

    @classmethod
    def initial(cls, x0: np.ndarray) -> "MomentState":
        """Deterministic start: X_0 = x0 x0^T"""
        x0 = np.array(x0, dtype=float)
        return cls(k=0, mean=x0, corr=np.outer(x0, x0))


@dataclass(frozen=True, eq=False)
class NoiseCovariance:
    w_matrix: np.ndarray
    lambda_max: float

    @property
    def trace(self) -> float:
        return float(np.trace(self.w_matrix))


def _b_matrix(chain: InducedChain) -> np.ndarray:
    d_mat = chain.d_matrix
    return chain.gamma * d_mat @ chain.p_pi - d_mat


def noise_covariance(chain: InducedChain, model: LinearSystemModel, state: MomentState) -> NoiseCovariance:
    state.validate()
    gamma = chain.gamma
    m = state.mean
    x = state.corr
    p_pi = chain.p_pi
    e1, e2 = td_error_moments(chain)

    # q_s = E[delta^2 | s] with x-dependent terms replaced by their moments
    diag_x = np.diag(x)
    q = (
        e2.sum(axis=1)
        + 2.0 * (gamma * e1 @ m - e1.sum(axis=1) * m)
        + gamma ** 2 * p_pi @ diag_x
        - 2.0 * gamma * np.einsum("st,ts->s", p_pi, x)
        + diag_x
    )
    b = _b_matrix(chain)
    w_matrix = np.diag(chain.d * q) - b @ x @ b.T
    w_matrix = (w_matrix + w_matrix.T) / 2.0

    eigs = linalg.eigvalsh(w_matrix)
    if eigs[0] < -_psd_tolerance(w_matrix):
        raise MomentPropagationError(f"noise covariance has negative eigenvalue {eigs[0]!r}", state.k)
    return NoiseCovariance(w_matrix=w_matrix, lambda_max=float(eigs[-1]))


def noise_bounds(chain: InducedChain, model: LinearSystemModel, state: MomentState) -> Dict[str, float]:
    """Noise magnitude statistics next to their worst-case constant W_max"""
    cov = noise_covariance(chain, model, state)
    second_moment = cov.trace
    return {
        "mean_norm": 0.0,
        "second_moment": second_moment,
        "l2_norm_upper": float(np.sqrt(max(second_moment, 0.0))),
        "lambda_max": cov.lambda_max,
        "w_max": model.w_max,
        "sqrt_w_max": float(np.sqrt(model.w_max)),
    }


def trace(state: MomentState) -> float:
    """tr(X_k), the exact mean-squared error E|V_k - V^pi|_2^2"""
    return float(np.trace(state.corr))


def propagate_correlation(chain: InducedChain, model: LinearSystemModel, init: MomentState,
                          horizon: int) -> List[MomentState]:
    """
    m_{k+1} = A m_k
    X_{k+1} = A X_k A^T + alpha^2 W_k
    """
    if horizon < 0:
        raise ValueError(f"horizon must be nonnegative, got {horizon}")
    init.validate()
    a = model.a_matrix
    alpha2 = model.alpha ** 2
    states = [init]
    for k in range(horizon):
        current = states[-1]
        w_k = noise_covariance(chain, model, current).w_matrix
        corr = a @ current.corr @ a.T + alpha2 * w_k
        corr = (corr + corr.T) / 2.0
        nxt = MomentState(k=k + 1, mean=a @ current.mean, corr=corr)
        try:
            nxt.validate()
        except MomentPropagationError:
            logger.error(f"Correlation propagation lost positive semidefiniteness at step {k + 1}")
            raise
        states.append(nxt)
    return states


def moments_frame(chain: InducedChain, model: LinearSystemModel, states: List[MomentState]) -> pd.DataFrame:
    """One row per step: k, tr(X_k), |m_k|_inf, lambda_max(W_k), |X_k|_2"""
    rows = []
    for state in states:
        cov = noise_covariance(chain, model, state)
        rows.append({
            "k": state.k,
            "trace_x": trace(state),
            "mean_inf": float(np.max(np.abs(state.mean))),
            "lambda_max_w": cov.lambda_max,
            "trace_w": cov.trace,
            "x_norm_2": float(linalg.eigvalsh(state.corr)[-1]),
        })
    return pd.DataFrame(rows, columns=["k", "trace_x", "mean_inf", "lambda_max_w", "trace_w", "x_norm_2"])
