"""
Nuisance removal for the conditional working model Z | X ~ N(AX, Sigma).

Workflow:
1. Estimate the mean matrix A (OLS, or row-wise lasso in high dimensions)
2. Residualize Z against X
3. Estimate the residual covariance and its precision matrix
   (direct inverse, or graphical lasso in high dimensions)
4. Take the symmetric square root of the precision matrix
"""
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Any

import numpy as np
from scipy import linalg
from sklearn.covariance import graphical_lasso as sklearn_graphical_lasso
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import Lasso

from src.errors import ConfigError, NuisanceError

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12
EIGEN_FLOOR = 1e-8
INVERSE_JITTER = 1e-8
LASSO_TOL = 1e-7
LASSO_MAX_SWEEPS = 10_000
GLASSO_TOL = 1e-5
GLASSO_MAX_SWEEPS = 200


@dataclass(eq=False)
class NuisanceFit:
    """Estimated A, Sigma, Omega = Sigma^-1 and Omega^(1/2)."""

    a_hat: np.ndarray
    sigma_hat: np.ndarray
    omega_hat: np.ndarray
    omega_sqrt: np.ndarray
    regime: str
    lambdas: Dict[str, float] = field(default_factory=dict)
    converged: bool = True

    def summary(self) -> Dict[str, Any]:
        omega_eigs = np.linalg.eigvalsh(self.omega_hat)
        return {
            'regime': self.regime,
            'lambdas': dict(self.lambdas),
            'converged': self.converged,
            'a_nonzero': int(np.count_nonzero(self.a_hat)),
            'a_shape': list(self.a_hat.shape),
            'omega_offdiag_nonzero': int(np.count_nonzero(self.omega_hat) - self.omega_hat.shape[0]),
            'omega_min_eigenvalue': float(omega_eigs[0]),
            'omega_max_eigenvalue': float(omega_eigs[-1]),
        }


def fit_mean_ols(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """
    Least-squares coefficient matrix A (q x p) with row j regressing z_j on x.

    Args:
        x: Nuisance matrix, n x p with n > p.
        z: Feature matrix, n x q.

    Returns:
        A such that z is approximated by x @ A.T.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    n, p = x.shape
    if p == 0:
        return np.zeros((z.shape[1], 0))
    if n <= p:
        raise NuisanceError(f"OLS needs n > p (n={n}, p={p})")
    gram = x.T @ x
    gram = gram + 1e-12 * np.trace(gram) / p * np.eye(p)
    condition = np.linalg.cond(gram)
    if not np.isfinite(condition) or condition >= MAX_CONDITION:
        raise NuisanceError(f"Nuisance design is singular (condition number {condition:.3g})")
    coef = linalg.solve(gram, x.T @ z, assume_a='pos')
    return coef.T


def fit_mean_lasso(x: np.ndarray, z: np.ndarray, lam: float) -> Dict[str, Any]:
    """
    Row-wise lasso estimate of A by cyclic coordinate descent.

    Each row minimizes 0.5 * ||z_j - x a||^2 / n + lam * ||a||_1; this is
    exactly scikit-learn's Lasso objective without intercept.

    Returns:
        Dict with 'a_hat' (q x p), 'converged' flag and 'n_iter' per row.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if lam < 0:
        raise ConfigError("Lasso penalty must be non-negative")
    q, p = z.shape[1], x.shape[1]
    if p == 0:
        return {'a_hat': np.zeros((q, 0)), 'converged': True, 'n_iter': [0] * q}
    if lam == 0:
        return {'a_hat': fit_mean_ols(x, z), 'converged': True, 'n_iter': [0] * q}

    model = Lasso(alpha=lam, fit_intercept=False, tol=LASSO_TOL,
                  max_iter=LASSO_MAX_SWEEPS, selection='cyclic')
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always', ConvergenceWarning)
        model.fit(x, z)
    converged = not any(issubclass(w.category, ConvergenceWarning) for w in caught)
    if not converged:
        logger.warning(f"Lasso for A did not converge within {LASSO_MAX_SWEEPS} sweeps (lambda={lam:.4g})")
    a_hat = np.asarray(model.coef_, dtype=float).reshape(q, p)
    n_iter = np.atleast_1d(model.n_iter_).tolist()
    return {'a_hat': a_hat, 'converged': converged, 'n_iter': n_iter}


def sample_covariance(resid: np.ndarray) -> np.ndarray:
    """(1/n) R^T R after centering R by its column means."""
    resid = np.asarray(resid, dtype=float)
    n = resid.shape[0]
    if n < 2:
        raise NuisanceError("Sample covariance needs at least two rows")
    centered = resid - resid.mean(axis=0)
    cov = centered.T @ centered / n
    return (cov + cov.T) / 2.0


def _check_psd(s: np.ndarray, label: str) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise NuisanceError(f"{label} must be a square matrix")
    if not np.allclose(s, s.T, atol=1e-10):
        raise NuisanceError(f"{label} must be symmetric")
    return (s + s.T) / 2.0


def direct_precision(s: np.ndarray) -> np.ndarray:
    """Inverse of s after ridge jitter 1e-8 * trace(s) / q."""
    s = _check_psd(s, "Covariance")
    q = s.shape[0]
    jitter = INVERSE_JITTER * max(np.trace(s), 0.0) / q
    ridged = s + jitter * np.eye(q)
    try:
        omega = linalg.inv(ridged)
    except linalg.LinAlgError as e:
        raise NuisanceError(f"Residual covariance is singular: {e}") from e
    omega = (omega + omega.T) / 2.0
    if np.linalg.eigvalsh(omega)[0] <= 0:
        raise NuisanceError("Residual covariance is not positive definite")
    return omega


def graphical_lasso(s: np.ndarray, rho: float) -> Dict[str, Any]:
    """
    Sparse precision estimate maximizing log det(Omega) - tr(S Omega) - rho ||Omega||_1,off.

    Block coordinate descent over columns (one lasso per column); the
    penalty-free case short-circuits to the direct inverse.

    Returns:
        Dict with 'omega', 'sigma' (the fitted covariance), 'converged', 'n_iter'.
    """
    s = _check_psd(s, "Covariance")
    if rho < 0:
        raise ConfigError("Graphical lasso penalty must be non-negative")
    eigenvalues = np.linalg.eigvalsh(s)
    if eigenvalues[0] <= 0:
        raise NuisanceError(f"Graphical lasso needs a positive definite input (min eigenvalue {eigenvalues[0]:.3g})")
    if rho == 0:
        omega = direct_precision(s)
        return {'omega': omega, 'sigma': s, 'converged': True, 'n_iter': 0}

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always', ConvergenceWarning)
        try:
            sigma, omega, n_iter = sklearn_graphical_lasso(
                s, alpha=rho, mode='cd', tol=GLASSO_TOL, enet_tol=1e-7,
                max_iter=GLASSO_MAX_SWEEPS, return_n_iter=True,
            )
        except FloatingPointError as e:
            raise NuisanceError(f"Graphical lasso failed: {e}") from e
    converged = not any(issubclass(w.category, ConvergenceWarning) for w in caught)
    if not converged:
        logger.warning(f"Graphical lasso did not converge within {GLASSO_MAX_SWEEPS} sweeps (rho={rho:.4g})")
    omega = (omega + omega.T) / 2.0
    min_eig = np.linalg.eigvalsh(omega)[0]
    if min_eig < EIGEN_FLOOR:
        omega = omega + (EIGEN_FLOOR - min_eig) * np.eye(omega.shape[0])
    return {'omega': omega, 'sigma': (sigma + sigma.T) / 2.0, 'converged': converged, 'n_iter': int(n_iter)}


def residualize(z: np.ndarray, x: np.ndarray, a_hat: np.ndarray) -> np.ndarray:
    """Rows z_i - a_hat @ x_i."""
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    a_hat = np.asarray(a_hat, dtype=float)
    if x.shape[0] != z.shape[0] or a_hat.shape != (z.shape[1], x.shape[1]):
        raise NuisanceError(
            f"Shape mismatch: z {z.shape}, x {x.shape}, a_hat {a_hat.shape}"
        )
    if x.shape[1] == 0:
        return z.copy()
    return z - x @ a_hat.T


def psd_sqrt(omega: np.ndarray) -> np.ndarray:
    """Symmetric square root with eigenvalues clipped to 1e-8."""
    omega = _check_psd(omega, "Precision matrix")
    eigenvalues, eigenvectors = np.linalg.eigh(omega)
    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    if eigenvalues[0] < -1e-10 * scale:
        raise NuisanceError(f"Matrix is indefinite (min eigenvalue {eigenvalues[0]:.3g})")
    clipped = np.maximum(eigenvalues, EIGEN_FLOOR)
    root = (eigenvectors * np.sqrt(clipped)) @ eigenvectors.T
    return (root + root.T) / 2.0


def resolve_regime(n: int, p: int, q: int, requested: str = 'auto') -> str:
    """High-dimensional when p + q >= n / 4 unless the caller forces a regime."""
    if requested in ('low', 'high'):
        return requested
    if requested != 'auto':
        raise ConfigError(f"Unknown regime '{requested}'")
    return 'high' if (p + q) >= n / 4.0 else 'low'


def penalty_levels(n: int, p: int, q: int, c_a: float, c_omega: float) -> Dict[str, float]:
    """Rate-based penalties lambda_A = c_A sqrt(log max(p,q) / n), rho = c_Omega sqrt(log q / n)."""
    lam_a = c_a * math.sqrt(math.log(max(p, q, 2)) / n)
    rho = c_omega * math.sqrt(math.log(max(q, 2)) / n)
    return {'lambda_a': lam_a, 'rho_omega': rho}


def fit_nuisance(x: np.ndarray, z: np.ndarray, regime: str = 'auto',
                 c_a: float = 0.5, c_omega: float = 0.5) -> NuisanceFit:
    """
    Step 1 of the encoder: estimate A, Sigma, Omega and Omega^(1/2).

    Args:
        x: Centered, unit-variance nuisance matrix (n x p, p may be 0).
        z: Centered feature matrix (n x q).
        regime: 'auto', 'low' or 'high'.
        c_a: Constant in the lasso penalty rate.
        c_omega: Constant in the graphical-lasso penalty rate.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    n, p = x.shape
    q = z.shape[1]
    regime = resolve_regime(n, p, q, regime)

    if regime == 'low':
        a_hat = fit_mean_ols(x, z)
        resid = residualize(z, x, a_hat)
        sigma = sample_covariance(resid)
        omega = direct_precision(sigma)
        lambdas: Dict[str, float] = {'lambda_a': 0.0, 'rho_omega': 0.0}
        converged = True
    else:
        lambdas = penalty_levels(n, p, q, c_a, c_omega)
        mean_fit = fit_mean_lasso(x, z, lambdas['lambda_a'])
        a_hat = mean_fit['a_hat']
        resid = residualize(z, x, a_hat)
        sample = sample_covariance(resid)
        precision_fit = graphical_lasso(sample, lambdas['rho_omega'])
        sigma = precision_fit['sigma']
        omega = precision_fit['omega']
        converged = bool(mean_fit['converged'] and precision_fit['converged'])

    logger.info(f"Nuisance fit ({regime} regime): n={n}, p={p}, q={q}, lambdas={lambdas}")
    return NuisanceFit(
        a_hat=a_hat,
        sigma_hat=sigma,
        omega_hat=omega,
        omega_sqrt=psd_sqrt(omega),
        regime=regime,
        lambdas=lambdas,
        converged=converged,
    )
