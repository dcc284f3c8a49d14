"""
Stein-Encoder pipeline.

Workflow:
1. Standardize the nuisance block, center the features, standardize the response
2. Step 1: estimate the working model Z | X and residualize Z
3. Step 2: scan probes in order; accept order 1 if ||nu|| > tau1, else
   order 2 if |lambda| > tau2; otherwise fall back to the strongest candidate
4. Step 3: recover the (sparse) unit-norm direction gamma
5. Return a FitReport with the encoder, per-probe strengths and thresholds
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from prometheus_client import Counter, Histogram

from src.data import Dataset
from src.errors import ConfigError, DegenerateDirectionError
from src.nuisance import NuisanceFit, fit_nuisance, residualize
from src.probes import DEFAULT_SCALES, probe_values, scan_order
from src.recovery import TPM_MAX_ITER, TPM_TOL, TRUNC_BASES, EncoderFit, default_sparsity, finalize
from src.stein import SteinCandidate, stein_candidates
from src.utils import config_section, to_json

logger = logging.getLogger(__name__)

# Prometheus metrics
FITS_RUN = Counter('stein_encoder_fits', 'Number of Stein-Encoder fits')
FALLBACKS = Counter('stein_encoder_fallbacks', 'Fits where no candidate passed its threshold')
FIT_DURATION = Histogram('stein_encoder_fit_seconds', 'Stein-Encoder fit time in seconds')

TAU_MODES = ('permutation', 'fixed')
MIN_PERMUTATIONS = 20


@dataclass
class PipelineConfig:
    """Settings for one Stein-Encoder fit."""

    regime: str = 'auto'
    sparsity: Optional[int] = None
    probe_scales: Tuple[float, ...] = DEFAULT_SCALES
    scale_probes: bool = True
    standardize_response: bool = True
    tau_mode: str = 'permutation'
    tau1: Optional[float] = None
    tau2: Optional[float] = None
    permutations: int = 50
    tau_quantile: float = 0.95
    c_a: float = 0.5
    c_omega: float = 0.5
    trunc_basis: str = 'whitened'
    tpm_max_iter: int = TPM_MAX_ITER
    tpm_tol: float = TPM_TOL
    seed: int = 0

    def __post_init__(self):
        self.probe_scales = tuple(float(a) for a in self.probe_scales)
        if self.regime not in ('auto', 'low', 'high'):
            raise ConfigError(f"regime must be auto, low or high, got '{self.regime}'")
        if self.tau_mode not in TAU_MODES:
            raise ConfigError(f"tau_mode must be one of {TAU_MODES}, got '{self.tau_mode}'")
        if self.tau_mode == 'permutation' and int(self.permutations) < MIN_PERMUTATIONS:
            raise ConfigError(f"Permutation calibration needs at least {MIN_PERMUTATIONS} permutations")
        if self.tau_mode == 'fixed':
            if self.tau1 is None or self.tau2 is None or not (self.tau1 > 0 and self.tau2 > 0):
                raise ConfigError("Fixed thresholds tau1 and tau2 must both be positive")
        if not 0.0 < self.tau_quantile < 1.0:
            raise ConfigError("tau_quantile must lie in (0, 1)")
        if self.sparsity is not None and int(self.sparsity) < 1:
            raise ConfigError("sparsity must be a positive integer")
        if self.c_a < 0 or self.c_omega < 0:
            raise ConfigError("Penalty constants must be non-negative")
        if self.trunc_basis not in TRUNC_BASES:
            raise ConfigError(f"trunc_basis must be one of {TRUNC_BASES}")
        scan_order(self.probe_scales)

    @classmethod
    def from_config(cls, config: Dict[str, Any], **overrides: Any) -> 'PipelineConfig':
        """Build from the nuisance/probes/pipeline/recovery sections of a config file."""
        nuisance = config_section(config, 'nuisance')
        probes = config_section(config, 'probes')
        pipeline = config_section(config, 'pipeline')
        recovery = config_section(config, 'recovery')
        values: Dict[str, Any] = {
            'regime': nuisance.get('regime', 'auto'),
            'c_a': float(nuisance.get('c_a', 0.5)),
            'c_omega': float(nuisance.get('c_omega', 0.5)),
            'probe_scales': tuple(probes.get('scales', DEFAULT_SCALES)),
            'scale_probes': bool(probes.get('standardize', True)),
            'standardize_response': bool(pipeline.get('standardize_response', True)),
            'tau_mode': pipeline.get('tau_mode', 'permutation'),
            'tau1': pipeline.get('tau1'),
            'tau2': pipeline.get('tau2'),
            'permutations': int(pipeline.get('permutations', 50)),
            'tau_quantile': float(pipeline.get('tau_quantile', 0.95)),
            'seed': int(pipeline.get('seed', 0)),
            'sparsity': recovery.get('sparsity'),
            'trunc_basis': recovery.get('trunc_basis', 'whitened'),
            'tpm_max_iter': int(recovery.get('max_iter', TPM_MAX_ITER)),
            'tpm_tol': float(recovery.get('tol', TPM_TOL)),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values['probe_scales'] = list(self.probe_scales)
        return values


@dataclass(eq=False)
class FitReport:
    """Everything a fit produced, serializable to JSON and back."""

    encoder: EncoderFit
    nuisance: Dict[str, Any]
    strengths: List[Dict[str, Any]]
    thresholds: Dict[str, Any]
    seed: int
    config: Dict[str, Any]
    names_x: Tuple[str, ...] = ()
    names_z: Tuple[str, ...] = ()
    top_features: List[Dict[str, Any]] = field(default_factory=list)
    shape: Dict[str, int] = field(default_factory=dict)
    timing: Dict[str, float] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'encoder': self.encoder.to_dict(),
            'nuisance': self.nuisance,
            'strengths': self.strengths,
            'thresholds': self.thresholds,
            'seed': int(self.seed),
            'config': self.config,
            'names_x': list(self.names_x),
            'names_z': list(self.names_z),
            'top_features': list(self.top_features),
            'shape': self.shape,
            'timing': self.timing,
            'notes': list(self.notes),
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> 'FitReport':
        return cls(
            encoder=EncoderFit.from_dict(raw['encoder']),
            nuisance=dict(raw['nuisance']),
            strengths=list(raw['strengths']),
            thresholds=dict(raw['thresholds']),
            seed=int(raw['seed']),
            config=dict(raw['config']),
            names_x=tuple(raw.get('names_x', ())),
            names_z=tuple(raw.get('names_z', ())),
            top_features=list(raw.get('top_features', [])),
            shape=dict(raw.get('shape', {})),
            timing=dict(raw.get('timing', {})),
            notes=list(raw.get('notes', [])),
        )

    def to_json(self) -> str:
        return to_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> 'FitReport':
        return cls.from_dict(json.loads(text))


class AlignmentResult(NamedTuple):
    sign: int
    error: float
    angle_deg: float
    proj_loss: float


def _order_two_strength(tvals: np.ndarray, zres: np.ndarray, sigma: np.ndarray,
                        omega_sqrt: np.ndarray) -> float:
    n = tvals.shape[0]
    moment = (zres.T * tvals) @ zres / n - tvals.mean() * sigma
    k = omega_sqrt @ moment @ omega_sqrt
    return float(np.max(np.abs(np.linalg.eigvalsh((k + k.T) / 2.0))))


def calibrate_thresholds(tvals_by_probe: np.ndarray, zres: np.ndarray, nuisance: NuisanceFit,
                         permutations: int, seed: int, quantile: float = 0.95) -> Tuple[float, float]:
    """
    Permutation-null thresholds (tau1, tau2).

    Each permutation shuffles the rows of the probe values jointly, breaking
    the Y-Z link while keeping both marginals. For each order the statistic is
    the largest strength over the probe list, and tau is its quantile over the
    permutations.
    """
    if permutations < MIN_PERMUTATIONS:
        raise ConfigError(f"Permutation calibration needs at least {MIN_PERMUTATIONS} permutations")
    tvals_by_probe = np.asarray(tvals_by_probe, dtype=float)
    if tvals_by_probe.ndim == 1:
        tvals_by_probe = tvals_by_probe[:, None]
    n, n_probes = tvals_by_probe.shape
    rng = np.random.default_rng(seed)
    null_first = np.empty(permutations)
    null_second = np.empty(permutations)
    for b in range(permutations):
        shuffled = tvals_by_probe[rng.permutation(n)]
        nu = nuisance.omega_hat @ (zres.T @ shuffled / n)
        null_first[b] = float(np.max(np.linalg.norm(nu, axis=0)))
        null_second[b] = max(
            _order_two_strength(shuffled[:, j], zres, nuisance.sigma_hat, nuisance.omega_sqrt)
            for j in range(n_probes)
        )
    return float(np.quantile(null_first, quantile)), float(np.quantile(null_second, quantile))


def standardize_nuisance(x: np.ndarray) -> np.ndarray:
    """Center each nuisance column and scale it to unit variance; constant columns are only centered."""
    x = np.asarray(x, dtype=float)
    centered = x - x.mean(axis=0)
    scale = centered.std(axis=0)
    return centered / np.where(scale > 0, scale, 1.0)


def _ratio(strength: float, tau: float) -> float:
    if tau > 0:
        return strength / tau
    return float('inf') if strength > 0 else 0.0


def _select(pairs: Sequence[Tuple[SteinCandidate, SteinCandidate]], tau1: float,
            tau2: float) -> Tuple[SteinCandidate, bool]:
    for first, second in pairs:
        if first.strength > tau1:
            return first, False
        if second.strength > tau2:
            return second, False

    # fallback: strengths of different orders are compared through strength / tau
    best, best_ratio = None, -1.0
    for first, second in pairs:
        for candidate, tau in ((first, tau1), (second, tau2)):
            ratio = _ratio(candidate.strength, tau)
            if ratio > best_ratio:
                best, best_ratio = candidate, ratio
    if best is None or best.strength == 0.0:
        raise DegenerateDirectionError("degenerate direction: every Stein candidate has zero strength")
    return best, True


def fit(d: Dataset, cfg: PipelineConfig) -> FitReport:
    """
    Fit the Stein-Encoder on a Dataset.

    Args:
        d: Dataset with q >= 2 features.
        cfg: Pipeline configuration; the fit is a pure function of (d, cfg).

    Returns:
        FitReport holding the EncoderFit and diagnostics.
    """
    if d.q < 2:
        raise ConfigError(f"The encoder needs at least two feature columns (q={d.q})")
    started = time.perf_counter()
    FITS_RUN.inc()

    x = standardize_nuisance(d.x) if d.p else np.zeros((d.n, 0))
    z = d.z - d.z.mean(axis=0)
    y = d.y - d.y.mean()
    if cfg.standardize_response:
        y_scale = y.std()
        if y_scale > 0:
            y = y / y_scale

    nuisance = fit_nuisance(x, z, cfg.regime, cfg.c_a, cfg.c_omega)
    zres = residualize(z, x, nuisance.a_hat)

    probes = scan_order(cfg.probe_scales)
    tvals = np.column_stack([probe_values(p, y, cfg.scale_probes) for p in probes])
    pairs = [stein_candidates(p, tvals[:, j], zres, nuisance) for j, p in enumerate(probes)]

    if cfg.tau_mode == 'permutation':
        tau1, tau2 = calibrate_thresholds(tvals, zres, nuisance, cfg.permutations, cfg.seed, cfg.tau_quantile)
    else:
        tau1, tau2 = float(cfg.tau1), float(cfg.tau2)

    selected, fallback_used = _select(pairs, tau1, tau2)
    if fallback_used:
        FALLBACKS.inc()
        logger.warning(f"No candidate passed its threshold; falling back to {selected.probe.label} order {selected.order}")
    else:
        logger.info(f"Selected {selected.probe.label} order {selected.order} (strength {selected.strength:.4g})")

    s = min(d.q, int(cfg.sparsity) if cfg.sparsity is not None else default_sparsity(d.q))
    encoder = finalize(
        selected.u, nuisance.regime, s, selected.order, selected.probe,
        strength=selected.strength, k_matrix=selected.whitened_matrix,
        omega_sqrt=nuisance.omega_sqrt, trunc_basis=cfg.trunc_basis,
        max_iter=cfg.tpm_max_iter, tol=cfg.tpm_tol, fallback_used=fallback_used,
    )

    strengths = []
    for first, second in pairs:
        for candidate, tau in ((first, tau1), (second, tau2)):
            strengths.append({
                'probe': candidate.probe.label,
                'order': candidate.order,
                'strength': float(candidate.strength),
                'tau': tau,
                'ratio': _ratio(candidate.strength, tau),
                'passed': bool(candidate.strength > tau),
                'selected': candidate is selected,
                'eigen_iterations': int(candidate.eigen_iterations),
                'eigen_fallback': bool(candidate.eigen_fallback),
            })
    encoder.diagnostics.update({
        'sparsity': s,
        'probe_values': 'centered and scaled to unit variance' if cfg.scale_probes else 'centered',
    })

    notes = []
    if nuisance.regime == 'high':
        notes.append('Nuisance penalties use rate-based defaults c*sqrt(log(dim)/n), not cross-validation.')
    if cfg.tau_mode == 'permutation':
        notes.append(f'Thresholds are the {cfg.tau_quantile:.0%} quantile of the permutation null of the max strength over probes.')
    elapsed = time.perf_counter() - started
    FIT_DURATION.observe(elapsed)

    return FitReport(
        encoder=encoder,
        nuisance=nuisance.summary(),
        strengths=strengths,
        thresholds={'tau1': tau1, 'tau2': tau2, 'mode': cfg.tau_mode,
                    'permutations': cfg.permutations, 'quantile': cfg.tau_quantile},
        seed=cfg.seed,
        config=cfg.to_dict(),
        names_x=d.names_x,
        names_z=d.names_z,
        top_features=top_features(encoder, d.names_z),
        shape={'n': d.n, 'p': d.p, 'q': d.q},
        timing={'fit_seconds': elapsed},
        notes=notes,
    )


def encode(fit: EncoderFit, z: np.ndarray) -> np.ndarray:
    """Index values t_i = gamma^T z_i."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[1] != fit.q:
        raise ConfigError(f"Feature matrix has {z.shape[-1] if z.ndim else 0} columns, encoder expects {fit.q}")
    return z @ fit.gamma


def align_sign(gamma_hat: np.ndarray, gamma_true: np.ndarray, atol: float = 1e-6) -> AlignmentResult:
    """
    Sign-aligned recovery error between two unit vectors.

    Returns:
        (sign l, ||gamma_hat - l gamma_true||, angle in degrees, 1 - |<gamma_hat, gamma_true>|).
    """
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    gamma_true = np.asarray(gamma_true, dtype=float)
    for label, vector in (('gamma_hat', gamma_hat), ('gamma_true', gamma_true)):
        if abs(np.linalg.norm(vector) - 1.0) > atol:
            raise ConfigError(f"{label} must have unit norm")
    inner = float(gamma_hat @ gamma_true)
    sign = -1 if inner < 0 else 1
    cosine = min(1.0, abs(inner))
    return AlignmentResult(
        sign=sign,
        error=float(np.linalg.norm(gamma_hat - sign * gamma_true)),
        angle_deg=float(np.degrees(np.arccos(cosine))),
        proj_loss=1.0 - cosine,
    )


def top_features(encoder: EncoderFit, names: Sequence[str], k: int = 20) -> List[Dict[str, Any]]:
    """The k features with the largest |gamma| (nonzero coefficients only)."""
    if len(names) != encoder.q:
        raise ConfigError("Feature names do not match the encoder dimension")
    order = np.argsort(-np.abs(encoder.gamma), kind='stable')[:k]
    return [
        {'rank': rank + 1, 'index': int(i), 'name': names[i], 'coefficient': float(encoder.gamma[i])}
        for rank, i in enumerate(order) if encoder.gamma[i] != 0.0
    ]


class SteinEncoder:
    """Fit-then-encode wrapper around the pipeline functions."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.report: Optional[FitReport] = None

    @classmethod
    def from_config(cls, config: Dict[str, Any], **overrides: Any) -> 'SteinEncoder':
        return cls(PipelineConfig.from_config(config, **overrides))

    def fit(self, d: Dataset) -> 'SteinEncoder':
        self.report = fit(d, self.config)
        return self

    @property
    def encoder(self) -> EncoderFit:
        if self.report is None:
            raise ConfigError("SteinEncoder has not been fitted")
        return self.report.encoder

    def encode(self, z: np.ndarray) -> np.ndarray:
        return encode(self.encoder, z)
