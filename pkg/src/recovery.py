"""
Recovery of the final encoder direction from a raw Stein direction.

Low-dimensional fits normalize the raw direction. High-dimensional fits hard
threshold it (order 1) or run the truncated power method on the whitened
Stein matrix (order 2).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from src.errors import ConfigError, DegenerateDirectionError
from src.probes import Probe
from src.stein import dense_leading_eigenpair

logger = logging.getLogger(__name__)

TPM_MAX_ITER = 500
TPM_TOL = 1e-7
MAX_BACKTRACKS = 20
TRUNC_BASES = ('whitened', 'original')


@dataclass(eq=False)
class EncoderFit:
    """Unit-norm encoder direction gamma and how it was selected."""

    gamma: np.ndarray
    order: int
    probe: Probe
    support: Tuple[int, ...]
    strength: float
    regime: str
    fallback_used: bool = False
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def q(self) -> int:
        return int(self.gamma.shape[0])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'gamma': [float(g) for g in self.gamma],
            'order': int(self.order),
            'probe': self.probe.label,
            'support': [int(i) for i in self.support],
            'strength': float(self.strength),
            'regime': self.regime,
            'fallback_used': bool(self.fallback_used),
            'diagnostics': self.diagnostics,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> 'EncoderFit':
        return cls(
            gamma=np.asarray(raw['gamma'], dtype=float),
            order=int(raw['order']),
            probe=Probe.from_label(raw['probe']),
            support=tuple(int(i) for i in raw['support']),
            strength=float(raw['strength']),
            regime=str(raw['regime']),
            fallback_used=bool(raw.get('fallback_used', False)),
            diagnostics=dict(raw.get('diagnostics', {})),
        )


def default_sparsity(q: int) -> int:
    """min(q, max(20, ceil(sqrt(q))))."""
    return min(q, max(20, math.ceil(math.sqrt(q))))


def _top_indices(values: np.ndarray, s: int) -> np.ndarray:
    # stable sort keeps the lower index first among equal magnitudes
    return np.argsort(-np.abs(values), kind='stable')[:s]


def hard_threshold(u: np.ndarray, s: int) -> np.ndarray:
    """Keep the s largest-|entry| coordinates of u (ties to the lower index), zero the rest."""
    u = np.asarray(u, dtype=float)
    q = u.shape[0]
    if not 1 <= s <= q:
        raise ConfigError(f"Sparsity s={s} must lie in [1, {q}]")
    out = np.zeros_like(u)
    keep = _top_indices(u, s)
    out[keep] = u[keep]
    return out


def _normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def _rayleigh(k: np.ndarray, v: np.ndarray) -> float:
    return abs(float(v @ k @ v))


@dataclass(eq=False)
class TruncatedPowerResult:
    vector: np.ndarray
    iterations: int
    converged: bool
    rayleigh: float


def _tpm_run(k: np.ndarray, s: int, init: np.ndarray, max_iter: int, tol: float) -> TruncatedPowerResult:
    q = k.shape[0]
    v = _normalize(hard_threshold(init, s))
    if not np.any(v):
        v = np.zeros(q)
        v[0] = 1.0
    best = _rayleigh(k, v)

    for iteration in range(1, max_iter + 1):
        step = k @ v
        if not np.any(step):
            return TruncatedPowerResult(v, iteration, True, best)
        candidate = _normalize(hard_threshold(step, s))
        if candidate @ v < 0:
            candidate = -candidate
        value = _rayleigh(k, candidate)

        backtracks = 0
        while value < best and backtracks < MAX_BACKTRACKS:
            backtracks += 1
            candidate = _normalize(hard_threshold(v + 0.5 ** backtracks * (candidate - v), s))
            value = _rayleigh(k, candidate)
        if value < best:
            # no ascent direction left within the backtracking budget
            return TruncatedPowerResult(v, iteration, True, best)

        change = np.linalg.norm(candidate - v)
        v, best = candidate, value
        if change < tol:
            return TruncatedPowerResult(v, iteration, True, best)

    logger.warning(f"Truncated power method did not converge in {max_iter} iterations")
    return TruncatedPowerResult(v, max_iter, False, best)


def truncated_power_method(k: np.ndarray, s: int, max_iter: int = TPM_MAX_ITER,
                           tol: float = TPM_TOL, init: Optional[np.ndarray] = None) -> TruncatedPowerResult:
    """
    Sparse leading eigenvector: v <- normalize(hard_threshold(K v, s)).

    Without init, two runs are made: one from the thresholded row of K with the
    largest norm and one from the thresholded dense leading eigenvector. The run
    with the larger |v^T K v| is returned. Accepted iterates never decrease
    |v^T K v|: a step that would is pulled halfway back toward the previous
    iterate, at most 20 times.
    """
    k = np.asarray(k, dtype=float)
    k = (k + k.T) / 2.0
    q = k.shape[0]
    if not 1 <= s <= q:
        raise ConfigError(f"Sparsity s={s} must lie in [1, {q}]")

    if init is not None:
        return _tpm_run(k, s, np.asarray(init, dtype=float), max_iter, tol)
    starts = (k[int(np.argmax(np.linalg.norm(k, axis=1)))], dense_leading_eigenpair(k)[1])
    runs = [_tpm_run(k, s, start, max_iter, tol) for start in starts]
    return max(runs, key=lambda run: run.rayleigh)


def _sign_convention(v: np.ndarray) -> np.ndarray:
    pivot = int(np.argmax(np.abs(v)))
    return -v if v[pivot] < 0 else v


def finalize(u: np.ndarray, regime: str, s: int, order: int, probe: Probe,
             strength: float = 0.0, k_matrix: Optional[np.ndarray] = None,
             omega_sqrt: Optional[np.ndarray] = None, trunc_basis: str = 'whitened',
             max_iter: int = TPM_MAX_ITER, tol: float = TPM_TOL,
             fallback_used: bool = False) -> EncoderFit:
    """
    Turn a raw Stein direction into a unit-norm EncoderFit.

    Args:
        u: Raw direction (nu for order 1, Omega^(1/2) v for order 2).
        regime: 'low' keeps u dense; 'high' truncates to s entries.
        s: Sparsity level for the high-dimensional regime.
        order: Stein order of u.
        probe: Probe that produced u.
        k_matrix: Whitened order-2 Stein matrix (high regime, order 2).
        omega_sqrt: Omega^(1/2) (high regime, order 2).
        trunc_basis: Where order-2 truncation happens, 'whitened' or 'original'.
    """
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)) or np.linalg.norm(u) == 0.0:
        raise DegenerateDirectionError("degenerate direction: raw Stein direction has zero norm")
    if regime not in ('low', 'high'):
        raise ConfigError(f"Unknown regime '{regime}'")
    if trunc_basis not in TRUNC_BASES:
        raise ConfigError(f"trunc_basis must be one of {TRUNC_BASES}")

    diagnostics: Dict[str, Any] = {}
    if regime == 'low':
        gamma0 = u
    elif order == 1 or k_matrix is None or omega_sqrt is None:
        gamma0 = hard_threshold(u, s)
    else:
        if trunc_basis == 'whitened':
            result = truncated_power_method(k_matrix, s, max_iter=max_iter, tol=tol)
            gamma0 = hard_threshold(omega_sqrt @ result.vector, s)
        else:
            unwhitened = omega_sqrt @ k_matrix @ omega_sqrt
            result = truncated_power_method(unwhitened, s, max_iter=max_iter, tol=tol)
            gamma0 = result.vector
        diagnostics.update({
            'trunc_basis': trunc_basis,
            'tpm_iterations': result.iterations,
            'tpm_converged': result.converged,
        })
        if np.linalg.norm(gamma0) == 0.0:
            raise DegenerateDirectionError("degenerate direction after truncation")

    gamma = _sign_convention(gamma0 / np.linalg.norm(gamma0))
    support = tuple(int(i) for i in np.flatnonzero(gamma))
    return EncoderFit(
        gamma=gamma, order=int(order), probe=probe, support=support,
        strength=float(strength), regime=regime, fallback_used=fallback_used,
        diagnostics=diagnostics,
    )
