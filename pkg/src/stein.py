"""
First- and second-order residual Stein moments and their leading directions.

Workflow:
1. Whitened first-order vector nu = Omega (1/n) sum_i t_i z'_i
2. Whitened second-order matrix K = Omega^(1/2) [(1/n) sum_i t_i (z'_i z'_i^T - Sigma)] Omega^(1/2)
3. Leading (largest |lambda|) eigenpair of K by power iteration on K^2
4. Candidate strengths ||nu||_2 and |lambda|
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from src.errors import EigenConvergenceError, SteinEncoderError
from src.nuisance import NuisanceFit
from src.probes import Probe

logger = logging.getLogger(__name__)

EIGEN_MAX_ITER = 10_000
EIGEN_TOL = 1e-8
DENSE_START_SEED = 0


@dataclass(eq=False)
class SteinCandidate:
    """One (order, probe) direction candidate with its signal strength."""

    order: int
    probe: Probe
    u: np.ndarray
    strength: float
    eigenvalue: Optional[float] = None
    eigen_iterations: int = 0
    whitened_matrix: Optional[np.ndarray] = None
    eigen_fallback: bool = False


def _check_shapes(tvals: np.ndarray, zres: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    tvals = np.asarray(tvals, dtype=float).reshape(-1)
    zres = np.asarray(zres, dtype=float)
    if zres.ndim != 2 or zres.shape[0] != tvals.shape[0]:
        raise SteinEncoderError(f"Shape mismatch: tvals {tvals.shape}, zres {zres.shape}")
    return tvals, zres


def first_order_vector(tvals: np.ndarray, zres: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """nu = omega @ (1/n) sum_i t_i z'_i."""
    tvals, zres = _check_shapes(tvals, zres)
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (zres.shape[1], zres.shape[1]):
        raise SteinEncoderError(f"omega shape {omega.shape} does not match q={zres.shape[1]}")
    return omega @ (zres.T @ tvals / tvals.shape[0])


def second_order_matrix(tvals: np.ndarray, zres: np.ndarray, sigma: np.ndarray,
                        omega_sqrt: np.ndarray) -> np.ndarray:
    """K = omega_sqrt [(1/n) sum_i t_i (z'_i z'_i^T - sigma)] omega_sqrt, symmetrized."""
    tvals, zres = _check_shapes(tvals, zres)
    q = zres.shape[1]
    sigma = np.asarray(sigma, dtype=float)
    omega_sqrt = np.asarray(omega_sqrt, dtype=float)
    if sigma.shape != (q, q) or omega_sqrt.shape != (q, q):
        raise SteinEncoderError("sigma and omega_sqrt must be q x q")
    n = tvals.shape[0]
    moment = (zres.T * tvals) @ zres / n - tvals.mean() * sigma
    k = omega_sqrt @ moment @ omega_sqrt
    return (k + k.T) / 2.0


def _sign_convention(v: np.ndarray) -> np.ndarray:
    pivot = int(np.argmax(np.abs(v)))
    return -v if v[pivot] < 0 else v


def _power_run(k: np.ndarray, k2: np.ndarray, v: np.ndarray, max_iter: int,
               tol: float) -> Optional[Tuple[float, np.ndarray, int]]:
    lam = 0.0
    for iteration in range(1, max_iter + 1):
        w = k2 @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v, iteration
        v = w / norm
        kv = k @ v
        lam = float(v @ kv)
        residual = np.linalg.norm(kv - lam * v)
        if residual <= tol * max(1.0, abs(lam)):
            return lam, v, iteration
    return None


def leading_eigenpair(k: np.ndarray, max_iter: int = EIGEN_MAX_ITER,
                      tol: float = EIGEN_TOL) -> Tuple[float, np.ndarray, int]:
    """
    Eigenpair of largest |lambda| for a symmetric matrix.

    Power iteration runs on K^2 so that a dominant negative eigenvalue is found;
    the sign of lambda is then read off the Rayleigh quotient v^T K v.
    Two runs are made, one from the largest-diagonal coordinate of K^2 and one
    from a fixed dense start; the larger |lambda| wins.

    Returns:
        (lambda, unit vector v, iterations over both runs); the largest-magnitude entry of v is positive.
    """
    k = np.asarray(k, dtype=float)
    k = (k + k.T) / 2.0
    q = k.shape[0]
    k2 = k @ k
    coordinate = np.zeros(q)
    coordinate[int(np.argmax(np.diag(k2)))] = 1.0
    dense = np.random.default_rng(DENSE_START_SEED).standard_normal(q)
    dense /= np.linalg.norm(dense)

    runs = []
    for start in (coordinate, dense):
        run = _power_run(k, k2, start, max_iter, tol)
        if run is None:
            magnitudes = np.sort(np.abs(np.linalg.eigvalsh(k)))[::-1]
            gap = float(magnitudes[0] - magnitudes[1]) if q > 1 else float(magnitudes[0])
            raise EigenConvergenceError(
                f"Power iteration did not converge in {max_iter} steps (|lambda| gap {gap:.3g})",
                gap=gap, iterations=max_iter,
            )
        runs.append(run)

    lam, v, _ = max(runs, key=lambda run: abs(run[0]))
    return lam, _sign_convention(v), sum(run[2] for run in runs)


def dense_leading_eigenpair(k: np.ndarray) -> Tuple[float, np.ndarray]:
    """Largest-|lambda| eigenpair from a full symmetric eigendecomposition."""
    eigenvalues, eigenvectors = np.linalg.eigh((k + k.T) / 2.0)
    index = int(np.argmax(np.abs(eigenvalues)))
    return float(eigenvalues[index]), _sign_convention(eigenvectors[:, index])


def candidate_strength(c: SteinCandidate) -> float:
    """||nu||_2 for order 1, |lambda| for order 2."""
    if c.order == 1:
        return float(np.linalg.norm(c.u))
    if c.order == 2:
        if c.eigenvalue is None:
            raise SteinEncoderError("Order-2 candidate is missing its eigenvalue")
        return abs(float(c.eigenvalue))
    raise SteinEncoderError(f"Unsupported Stein order {c.order}")


def stein_candidates(probe: Probe, tvals: np.ndarray, zres: np.ndarray,
                     nuisance: NuisanceFit) -> Tuple[SteinCandidate, SteinCandidate]:
    """
    Order-1 and order-2 candidates for one probe.

    The order-2 direction is u = Omega^(1/2) v; the whitened matrix K is kept
    on the candidate for sparse recovery.
    """
    nu = first_order_vector(tvals, zres, nuisance.omega_hat)
    first = SteinCandidate(order=1, probe=probe, u=nu, strength=0.0)
    first.strength = candidate_strength(first)

    k = second_order_matrix(tvals, zres, nuisance.sigma_hat, nuisance.omega_sqrt)
    fallback = False
    try:
        lam, v, iterations = leading_eigenpair(k)
    except EigenConvergenceError as e:
        logger.warning(f"{probe.label}: {e}; using dense eigensolver")
        lam, v = dense_leading_eigenpair(k)
        iterations, fallback = e.iterations, True
    second = SteinCandidate(
        order=2, probe=probe, u=nuisance.omega_sqrt @ v, strength=0.0,
        eigenvalue=lam, eigen_iterations=iterations, whitened_matrix=k,
        eigen_fallback=fallback,
    )
    second.strength = candidate_strength(second)
    return first, second
