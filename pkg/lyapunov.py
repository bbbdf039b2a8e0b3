"""
Stein (discrete Lyapunov) certificate for the noiseless error dynamics.

M = sum_k (A^k)^T A^k solves A^T M A = M - I. It is computed twice, by a
certified truncation of the series and by a dense solve of the vectorized
equation (I - A^T kron A^T) vec(M) = vec(I).
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy import linalg

from linear_model import LinearSystemModel, infinity_norm

logger = logging.getLogger(__name__)

TAIL_TOL = 1e-12
AGREEMENT_TOL = 1e-8
RESIDUAL_TOL = 1e-8
EIG_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SteinCertificate:
    m_matrix: np.ndarray
    residual_inf: float
    lambda_min: float
    lambda_max: float
    terms: int
    series_gap: float
    rho: float

    def lyapunov(self, x: np.ndarray) -> float:
        """v(x) = x^T M x"""
        x = np.asarray(x, dtype=float)
        return float(x @ self.m_matrix @ x)

    def to_dict(self) -> Dict:
        n = self.m_matrix.shape[0]
        return {
            "m_matrix": self.m_matrix.tolist(),
            "residual_inf": self.residual_inf,
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "lambda_max_bound_tight": n / (1.0 - self.rho ** 2),
            "lambda_max_bound": n / (1.0 - self.rho),
            "terms": self.terms,
            "series_gap": self.series_gap,
        }


@dataclass
class DecrementReport:
    trials: int
    max_violation: float
    passed: bool


def required_terms(n: int, rho: float) -> int:
    """Smallest K with n rho^{2K} / (1 - rho^2) < TAIL_TOL"""
    if rho == 0.0:
        return 1
    target = TAIL_TOL * (1.0 - rho ** 2) / n
    return max(1, math.floor(math.log(target) / (2.0 * math.log(rho))) + 1)


def stein_series(a: np.ndarray, terms: int) -> tuple:
    """
    Truncated sum over k < K of (A^k)^T A^k by doubling,
    S_{2m} = S_m + (A^m)^T S_m A^m, with K the first power of two >= terms.
    """
    n = a.shape[0]
    partial = np.eye(n)
    power = a.copy()
    count = 1
    while count < terms:
        partial = partial + power.T @ partial @ power
        power = power @ power
        count *= 2
    return partial, count


def stein_direct(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    system = np.eye(n * n) - np.kron(a.T, a.T)
    vec_m = linalg.solve(system, np.eye(n).reshape(-1))
    return vec_m.reshape(n, n)


def stein_solve_matrix(a: np.ndarray, rho: Optional[float] = None) -> SteinCertificate:
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if rho is None:
        rho = infinity_norm(a)
    if rho >= 1.0:
        raise ValueError(f"Stein series diverges: rho = {rho} >= 1")

    terms = required_terms(n, rho)
    series, used = stein_series(a, terms)
    direct = stein_direct(a)
    series_gap = float(np.max(np.abs(series - direct)))
    if series_gap > AGREEMENT_TOL:
        raise RuntimeError(f"series and direct Stein solutions differ by {series_gap!r}")

    m_matrix = (direct + direct.T) / 2.0
    residual = a.T @ m_matrix @ a - m_matrix + np.eye(n)
    eigs = linalg.eigvalsh(m_matrix)
    cert = SteinCertificate(
        m_matrix=m_matrix,
        residual_inf=infinity_norm(residual),
        lambda_min=float(eigs[0]),
        lambda_max=float(eigs[-1]),
        terms=used,
        series_gap=series_gap,
        rho=float(rho),
    )
    logger.debug(f"Stein certificate: K={used}, residual={cert.residual_inf:.3g}, "
                 f"lambda in [{cert.lambda_min:.6g}, {cert.lambda_max:.6g}]")
    return cert


def stein_solve(model: LinearSystemModel) -> SteinCertificate:
    return stein_solve_matrix(model.a_matrix, model.rho)


def certificate_checks(cert: SteinCertificate) -> Dict[str, bool]:
    n = cert.m_matrix.shape[0]
    return {
        "residual": bool(cert.residual_inf <= RESIDUAL_TOL),
        "lambda_min": bool(cert.lambda_min >= 1.0 - EIG_TOL),
        "lambda_max_tight": bool(cert.lambda_max <= n / (1.0 - cert.rho ** 2) + EIG_TOL),
        "lambda_max": bool(cert.lambda_max <= n / (1.0 - cert.rho) + EIG_TOL),
        "agreement": bool(cert.series_gap <= AGREEMENT_TOL),
    }


def lyapunov_decrement_check(model: LinearSystemModel, cert: SteinCertificate, trials: int,
                             rng: np.random.Generator, tol: float = 1e-8, scale: float = 1.0) -> DecrementReport:
    """
    Check v(Ax) = v(x) - x^T x on the origin and `trials` random vectors of norm `scale`.
    The gap must stay within tol * |x|^2; at the origin it must be at most tol.
    """
    a = model.a_matrix
    n = a.shape[0]
    samples = rng.standard_normal((trials, n))
    samples *= scale / np.linalg.norm(samples, axis=1, keepdims=True)
    samples = np.vstack([np.zeros((1, n)), samples])

    worst = 0.0
    for x in samples:
        sq_norm = float(x @ x)
        gap = abs(cert.lyapunov(a @ x) - (cert.lyapunov(x) - sq_norm))
        worst = max(worst, gap / sq_norm if sq_norm > 0.0 else gap)
    passed = bool(worst <= tol)
    if not passed:
        logger.warning(f"Lyapunov decrement identity violated by {worst:.3g} relative to |x|^2 (tolerance {tol:g})")
    return DecrementReport(trials=len(samples), max_violation=worst, passed=passed)
