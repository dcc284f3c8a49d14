"""
Simulation scenarios and method comparisons.

Workflow:
1. Generate a scenario: AR(1) Gaussian X, Z independent of X or Z = AX + E,
   a sparse true direction gamma, response Y = f(X, gamma^T Z) + noise at SNR 5
2. Fit the encoder on the training rows and measure direction recovery
3. Train method A on [X, Z], method B on [X, t_hat] with the residual safeguard,
   method C on [X, PC1(Z)]; score each on the test rows
4. Repeat over replications in parallel and collect one row per replication
"""
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from prometheus_client import Counter
from scipy import linalg
from sklearn.decomposition import PCA

from src.analyze import summarize_replications
from src.data import ColumnManifest, Dataset, apply_scaling, kfold_split, standardize
from src.errors import ConfigError, DataError
from src.nuisance import resolve_regime
from src.pipeline import PipelineConfig, align_sign, encode, fit
from src.regressor import MlpSpec, fit_with_safeguard, train
from src.utils import config_section, derive_seed

logger = logging.getLogger(__name__)

# Prometheus metrics
REPLICATIONS_DONE = Counter('stein_encoder_replications', 'Replications completed')
REPLICATIONS_FAILED = Counter('stein_encoder_replication_failures', 'Replications that raised an error')

MODELS = ('I', 'II', 'III')
SETTINGS = ('independent', 'correlated')
SETTING_ALIASES = {'indep': 'independent', 'independent': 'independent',
                   'corr': 'correlated', 'correlated': 'correlated'}
A_DESIGNS = ('auto', 'dense', 'sparse')
METHODS = ('A', 'B', 'C')
GRID_DIMS = ((20, 20), (400, 100))
POSITIVE_ENTRIES = (1, 3, 7)
NEGATIVE_ENTRIES = (5, 9)


@dataclass(frozen=True)
class SimConfig:
    """One simulated configuration; dimensions and seeds fully determine the data."""

    model: str = 'I'
    feature_setting: str = 'independent'
    p: int = 20
    q: int = 20
    n_train: int = 2000
    n_test: int = 2000
    rho_x: float = 0.5
    rho_z: float = 0.3
    snr: float = 5.0
    s_a: int = 10
    a_design: str = 'auto'
    replications: int = 20
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'model', str(self.model).upper())
        setting = SETTING_ALIASES.get(str(self.feature_setting).lower())
        if setting is None:
            raise ConfigError(f"feature_setting must be one of {SETTINGS}, got '{self.feature_setting}'")
        object.__setattr__(self, 'feature_setting', setting)
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got '{self.model}'")
        if self.p < 4:
            raise ConfigError("The link functions use X_1..X_4, so p must be at least 4")
        if self.q < 9:
            raise ConfigError("The true direction has entries up to coordinate 9, so q must be at least 9")
        if self.n_train < 2 or self.n_test < 2 or self.replications < 1:
            raise ConfigError("n_train and n_test must be >= 2 and replications >= 1")
        if not self.snr > 0:
            raise ConfigError("snr must be positive")
        for label, rho in (('rho_x', self.rho_x), ('rho_z', self.rho_z)):
            if not -1.0 < rho < 1.0:
                raise ConfigError(f"{label} must lie in (-1, 1)")
        if self.s_a < 1:
            raise ConfigError("s_a must be positive")
        if self.a_design not in A_DESIGNS:
            raise ConfigError(f"a_design must be one of {A_DESIGNS}")

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], **overrides: Any) -> 'SimConfig':
        values = {k: v for k, v in (raw or {}).items() if k in cls.__dataclass_fields__}
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(f"Invalid simulation settings: {e}") from e

    @property
    def label(self) -> str:
        return f"Model {self.model} / {self.feature_setting} / ({self.p},{self.q})"

    def resolved_a_design(self) -> str:
        if self.a_design != 'auto':
            return self.a_design
        return 'sparse' if resolve_regime(self.n_train, self.p, self.q) == 'high' else 'dense'

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(eq=False)
class ScenarioData:
    train: Dataset
    test: Dataset
    gamma: np.ndarray
    t_train: np.ndarray
    t_test: np.ndarray
    sigma_eps: float
    var_f: float
    a_matrix: Optional[np.ndarray] = None

    @property
    def empirical_snr(self) -> float:
        return self.var_f / self.sigma_eps ** 2


class Metrics(NamedTuple):
    mse: float
    mae: float
    r2: float


def ar1_covariance(d: int, rho: float) -> np.ndarray:
    """Matrix with entries rho^|i-j|."""
    if d < 1:
        raise ConfigError("Dimension must be at least 1")
    if not -1.0 < rho < 1.0:
        raise ConfigError(f"AR(1) correlation must satisfy |rho| < 1, got {rho}")
    lags = np.abs(np.subtract.outer(np.arange(d), np.arange(d)))
    return np.power(float(rho), lags)


def sample_gaussian(rng: np.random.Generator, cov: np.ndarray, n: int) -> np.ndarray:
    """n draws from N(0, cov) through the lower Cholesky factor."""
    factor = linalg.cholesky(cov, lower=True)
    return rng.standard_normal((n, cov.shape[0])) @ factor.T


def true_direction(q: int) -> np.ndarray:
    """Unit vector with +1 at coordinates 1, 3, 7 and -1 at 5, 9 (1-based), normalized."""
    if q < 9:
        raise ConfigError(f"true_direction needs q >= 9, got {q}")
    beta = np.zeros(q)
    beta[[j - 1 for j in POSITIVE_ENTRIES]] = 1.0
    beta[[j - 1 for j in NEGATIVE_ENTRIES]] = -1.0
    return beta / np.linalg.norm(beta)


def coefficient_matrix(rng: np.random.Generator, q: int, p: int, design: str, s_a: int = 10) -> np.ndarray:
    """
    Mean matrix A (q x p) of Z given X.

    dense: every entry Unif(-0.5, 0.5) / sqrt(p).
    sparse: each row has min(s_a, p) nonzeros at random columns, Unif(-0.5, 0.5) / sqrt(s_a).
    """
    if design == 'dense':
        return rng.uniform(-0.5, 0.5, size=(q, p)) / math.sqrt(p)
    if design != 'sparse':
        raise ConfigError(f"Unknown A design '{design}'")
    a = np.zeros((q, p))
    width = min(s_a, p)
    for j in range(q):
        columns = rng.choice(p, size=width, replace=False)
        a[j, columns] = rng.uniform(-0.5, 0.5, size=width) / math.sqrt(s_a)
    return a


def link_values(model: str, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Vectorized f(X, t) for Models I-III; X columns are 1-based in the formulas."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.asarray(t, dtype=float).reshape(-1)
    if x.shape[1] < 4:
        raise ConfigError("Link functions need at least four nuisance coordinates")
    x1, x2, x3, x4 = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    if model == 'I':
        return 2.0 * np.sin(t) + 0.3 * t ** 2 + 1.3 * x1 - 1.1 * x2 + t * x4
    if model == 'II':
        return t ** 2 * np.exp(x1 / 2.0) + 0.5 * (x2 ** 2 - 1.0) + np.sin(x3)
    if model == 'III':
        return (2.0 * t / (1.0 + np.exp(-x1)) + np.sqrt(np.abs(x2)) * np.abs(t + 2.0)
                + t ** 3 / 2.0 + x3 / 2.0)
    raise ConfigError(f"Unknown model '{model}'")


def link_eval(model: str, x_row: np.ndarray, t: float) -> float:
    return float(link_values(model, np.asarray(x_row, dtype=float)[None, :], np.array([t]))[0])


def generate(cfg: SimConfig, rep: int) -> ScenarioData:
    """
    Draw one replication of a scenario.

    The noise variance is Var(f) / snr with Var(f) the sample variance of f
    over the training rows.
    """
    rng = np.random.default_rng(derive_seed(cfg.seed, rep))
    n = cfg.n_train + cfg.n_test
    x = sample_gaussian(rng, ar1_covariance(cfg.p, cfg.rho_x), n)
    noise_z = sample_gaussian(rng, ar1_covariance(cfg.q, cfg.rho_z), n)
    a_matrix = None
    if cfg.feature_setting == 'correlated':
        a_matrix = coefficient_matrix(rng, cfg.q, cfg.p, cfg.resolved_a_design(), cfg.s_a)
        z = x @ a_matrix.T + noise_z
    else:
        z = noise_z

    gamma = true_direction(cfg.q)
    t = z @ gamma
    f = link_values(cfg.model, x, t)
    var_f = float(np.var(f[:cfg.n_train], ddof=1))
    sigma_eps = math.sqrt(var_f / cfg.snr)
    y = f + sigma_eps * rng.standard_normal(n)

    train_rows, test_rows = slice(0, cfg.n_train), slice(cfg.n_train, n)
    return ScenarioData(
        train=Dataset(y[train_rows], x[train_rows], z[train_rows]),
        test=Dataset(y[test_rows], x[test_rows], z[test_rows]),
        gamma=gamma,
        t_train=t[train_rows],
        t_test=t[test_rows],
        sigma_eps=sigma_eps,
        var_f=var_f,
        a_matrix=a_matrix,
    )


def metrics(y_true: np.ndarray, y_pred: np.ndarray) -> Metrics:
    """MSE, MAE and R^2 = 1 - SSE/SST with SST about the mean of y_true."""
    y_true = np.asarray(y_true, dtype=float).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=float).reshape(-1)
    if y_true.shape != y_pred.shape or y_true.shape[0] < 2:
        raise DataError("metrics needs two equal-length vectors with at least two entries")
    residual = y_true - y_pred
    sst = float(np.sum((y_true - y_true.mean()) ** 2))
    if sst == 0.0:
        raise DataError("R^2 is undefined for a constant target (zero total sum of squares)")
    return Metrics(
        mse=float(np.mean(residual ** 2)),
        mae=float(np.mean(np.abs(residual))),
        r2=1.0 - float(np.sum(residual ** 2)) / sst,
    )


def _record(row: Dict[str, Any], method: str, scores: Metrics) -> None:
    row[f'mse_{method}'] = scores.mse
    row[f'mae_{method}'] = scores.mae
    row[f'r2_{method}'] = scores.r2


def fit_principal_components(z_train: np.ndarray, k: int = 1) -> PCA:
    """Principal components of the training features only; apply with .transform to any split."""
    if not 1 <= k <= min(z_train.shape):
        raise ConfigError(f"Cannot fit {k} principal components to a {z_train.shape} matrix")
    return PCA(n_components=k, svd_solver='full').fit(z_train)


def evaluate_methods(train_d: Dataset, test_d: Dataset, t_train: np.ndarray, t_test: np.ndarray,
                     spec: MlpSpec, methods: Sequence[str] = METHODS, pca_components: int = 1,
                     seed: int = 0) -> Dict[str, Any]:
    """
    Train and score the downstream predictors on one train/test split.

    All methods share spec apart from input_dim. Method C's principal
    components are fit on the training features only.
    """
    row: Dict[str, Any] = {}
    if 'A' in methods:
        features = np.column_stack([train_d.x, train_d.z])
        model = train(features, train_d.y, spec.with_input_dim(features.shape[1], derive_seed(seed, 0)))
        _record(row, 'A', metrics(test_d.y, model.predict(np.column_stack([test_d.x, test_d.z]))))
    if 'B' in methods:
        stein_spec = spec.with_input_dim(train_d.p + 1, derive_seed(seed, 1))
        combined = fit_with_safeguard(train_d.x, train_d.z, t_train, train_d.y, stein_spec, stein_spec,
                                      seed=derive_seed(seed, 2))
        _record(row, 'B', metrics(test_d.y, combined.predict(test_d.x, test_d.z, t_test)))
        row['alpha_B'] = combined.alpha
    if 'C' in methods:
        pca = fit_principal_components(train_d.z, pca_components)
        features = np.column_stack([train_d.x, pca.transform(train_d.z)])
        model = train(features, train_d.y, spec.with_input_dim(features.shape[1], derive_seed(seed, 3)))
        test_features = np.column_stack([test_d.x, pca.transform(test_d.z)])
        _record(row, 'C', metrics(test_d.y, model.predict(test_features)))
    return row


def run_replication(sim: SimConfig, pipe_cfg: PipelineConfig, mlp_spec: MlpSpec, rep: int,
                    methods: Sequence[str] = METHODS) -> Dict[str, Any]:
    """One replication row; any failure is recorded in the 'error' column instead of raised."""
    seed = derive_seed(sim.seed, rep)
    row: Dict[str, Any] = {'replication': rep, 'seed': seed, 'error': ''}
    try:
        data = generate(sim, rep)
        report = fit(data.train, replace(pipe_cfg, seed=derive_seed(seed, 1)))
        encoder = report.encoder
        alignment = align_sign(encoder.gamma, data.gamma)
        row.update({
            'angle_deg': alignment.angle_deg,
            'proj_loss': alignment.proj_loss,
            'aligned_error': alignment.error,
            'order': encoder.order,
            'probe': encoder.probe.label,
            'fallback_used': encoder.fallback_used,
            'support_size': len(encoder.support),
            'empirical_snr': data.empirical_snr,
        })
        if methods:
            row.update(evaluate_methods(
                data.train, data.test, encode(encoder, data.train.z), encode(encoder, data.test.z),
                mlp_spec, methods, seed=derive_seed(seed, 2),
            ))
    except Exception as e:
        logger.error(f"{sim.label} replication {rep} failed: {e}")
        row['error'] = f"{type(e).__name__}: {e}"
    return row


def _collect(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    table = pd.DataFrame(rows).sort_values('replication', kind='stable').reset_index(drop=True)
    failed = int((table['error'] != '').sum())
    REPLICATIONS_DONE.inc(len(table) - failed)
    if failed:
        REPLICATIONS_FAILED.inc(failed)
    return table


def run_comparison(sim: SimConfig, pipe_cfg: PipelineConfig, mlp_spec: MlpSpec,
                   n_jobs: int = 1, methods: Sequence[str] = METHODS) -> pd.DataFrame:
    """
    Run every replication of one configuration.

    Returns:
        One row per replication (sorted by replication index) with recovery
        diagnostics, per-method test metrics and an 'error' column.
    """
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"Unknown methods {sorted(unknown)}")
    logger.info(f"Running {sim.replications} replications of {sim.label}")
    rows = Parallel(n_jobs=n_jobs)(
        delayed(run_replication)(sim, pipe_cfg, mlp_spec, rep, tuple(methods))
        for rep in range(sim.replications)
    )
    table = _collect(rows)
    logger.info(f"Finished {sim.label}: {int((table['error'] == '').sum())}/{len(table)} replications succeeded")
    return table


def grid_configs(base: SimConfig, models: Sequence[str] = MODELS, settings: Sequence[str] = SETTINGS,
                 dims: Sequence[Tuple[int, int]] = GRID_DIMS) -> List[SimConfig]:
    return [
        replace(base, model=model, feature_setting=setting, p=p, q=q)
        for model in models for setting in settings for p, q in dims
    ]


def run_grid(base: SimConfig, pipe_cfg: PipelineConfig, mlp_spec: MlpSpec, n_jobs: int = 1,
             models: Sequence[str] = MODELS, settings: Sequence[str] = SETTINGS,
             dims: Sequence[Tuple[int, int]] = GRID_DIMS,
             methods: Sequence[str] = METHODS) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    All model x setting x dimension configurations (twelve by default).

    Returns:
        (raw replication rows tagged with their configuration, one summary row per configuration)
    """
    raw, summaries = [], []
    for sim in grid_configs(base, models, settings, dims):
        table = run_comparison(sim, pipe_cfg, mlp_spec, n_jobs, methods)
        tags = {'model': sim.model, 'setting': sim.feature_setting, 'p': sim.p, 'q': sim.q}
        raw.append(table.assign(**tags))
        summaries.append({**tags, **summarize_replications(table)})
    return pd.concat(raw, ignore_index=True), pd.DataFrame(summaries)


class ConsistencyResult(NamedTuple):
    table: pd.DataFrame
    slope: float


def consistency_study(sim: SimConfig, pipe_cfg: PipelineConfig, sizes: Sequence[int] = (500, 1000, 2000, 4000),
                      n_jobs: int = 1) -> ConsistencyResult:
    """
    Median aligned direction error across training sizes and its log-log slope in n.

    Only the encoder is fitted; sim.replications replications per size.
    """
    if len(sizes) < 2:
        raise ConfigError("consistency_study needs at least two sample sizes")
    rows = []
    for n in sorted(int(s) for s in sizes):
        table = run_comparison(replace(sim, n_train=n, n_test=2), pipe_cfg, MlpSpec(input_dim=1), n_jobs, methods=())
        ok = table[table['error'] == '']
        if ok.empty:
            raise DataError(f"Every replication failed at n={n}")
        rows.append({
            'n': n,
            'median_error': float(ok['aligned_error'].median()),
            'mean_angle_deg': float(ok['angle_deg'].mean()),
            'replications': int(len(ok)),
        })
    frame = pd.DataFrame(rows)
    slope = float(np.polyfit(np.log(frame['n']), np.log(frame['median_error']), 1)[0])
    logger.info(f"Consistency study for {sim.label}: log-log slope {slope:.3f}")
    return ConsistencyResult(frame, slope)


def _cross_validate_fold(d: Dataset, pipe_cfg: PipelineConfig, spec: MlpSpec, fold: int,
                         train_rows: np.ndarray, test_rows: np.ndarray, pca_components: int,
                         methods: Sequence[str], seed: int) -> Dict[str, Any]:
    row: Dict[str, Any] = {'fold': fold, 'n_train': int(len(train_rows)), 'n_test': int(len(test_rows)), 'error': ''}
    try:
        train_d, params = standardize(d.subset_rows(train_rows))
        test_d = apply_scaling(d.subset_rows(test_rows), params)
        report = fit(train_d, replace(pipe_cfg, seed=derive_seed(seed, fold)))
        encoder = report.encoder
        row.update({'order': encoder.order, 'probe': encoder.probe.label,
                    'fallback_used': encoder.fallback_used, 'support_size': len(encoder.support)})
        row.update(evaluate_methods(
            train_d, test_d, encode(encoder, train_d.z), encode(encoder, test_d.z),
            spec, methods, pca_components, seed=derive_seed(seed, fold, 1),
        ))
    except Exception as e:
        logger.error(f"Fold {fold} failed: {e}")
        row['error'] = f"{type(e).__name__}: {e}"
    return row


def cross_validate(d: Dataset, pipe_cfg: PipelineConfig, mlp_spec: MlpSpec, folds: int = 5, seed: int = 0,
                   pca_components: int = 1, methods: Sequence[str] = METHODS, n_jobs: int = 1) -> pd.DataFrame:
    """
    k-fold comparison on a real (or cohort-shaped) dataset.

    Scaling is fit on each training fold and applied to its test fold.
    Method A uses [X, Z], B uses [X, t_hat], C uses [X, first pca_components PCs].
    """
    splits = kfold_split(d.n, folds, seed)
    rows = Parallel(n_jobs=n_jobs)(
        delayed(_cross_validate_fold)(d, pipe_cfg, mlp_spec, fold, train_rows, test_rows,
                                      pca_components, tuple(methods), seed)
        for fold, (train_rows, test_rows) in enumerate(splits)
    )
    return pd.DataFrame(rows).sort_values('fold', kind='stable').reset_index(drop=True)


class Cohort(NamedTuple):
    frame: pd.DataFrame
    manifest: ColumnManifest
    gamma: np.ndarray


def generate_cohort(n: int = 1900, p: int = 400, q: int = 400, seed: int = 0,
                    n_categorical: int = 8, missing_rate: float = 0.02) -> Cohort:
    """
    Synthetic cohort shaped like a clinical + expression study.

    Nuisance columns are mostly continuous, n_categorical are string-labelled
    categories, one column is 40% missing (dropped by the default missingness
    cap) and about 1% of responses are missing. Expression columns follow
    Z = AX + E with a sparse A; the response is Model I in gamma^T Z.
    """
    if p < 4 + n_categorical + 1 or q < 9 or n < 50:
        raise ConfigError("Cohort needs p >= n_categorical + 5, q >= 9 and n >= 50")
    rng = np.random.default_rng(derive_seed(seed, 0))
    n_cont = p - n_categorical - 1
    x = sample_gaussian(rng, ar1_covariance(n_cont, 0.5), n)
    a = coefficient_matrix(rng, q, n_cont, 'sparse')
    z = x @ a.T + sample_gaussian(rng, ar1_covariance(q, 0.3), n)
    gamma = true_direction(q)
    f = link_values('I', x, z @ gamma)
    y = f + math.sqrt(np.var(f, ddof=1) / 5.0) * rng.standard_normal(n)

    columns: Dict[str, Any] = {'patient_id': [f"P{i + 1:05d}" for i in range(n)], 'outcome': y}
    roles = {'patient_id': 'drop', 'outcome': 'response'}
    for j in range(n_cont):
        values = x[:, j].copy()
        values[rng.random(n) < missing_rate] = np.nan
        columns[f"clin_{j + 1:03d}"] = values
        roles[f"clin_{j + 1:03d}"] = 'nuisance'
    levels = np.array(['low', 'mid', 'high'])
    for j in range(n_categorical):
        codes = np.digitize(x[:, j % n_cont] + rng.standard_normal(n), [-0.5, 0.5])
        labels = levels[codes].astype(object)
        labels[rng.random(n) < missing_rate] = None
        columns[f"cat_{j + 1:02d}"] = labels
        roles[f"cat_{j + 1:02d}"] = 'nuisance'
    sparse_marker = rng.standard_normal(n)
    sparse_marker[rng.random(n) < 0.4] = np.nan
    columns['sparse_marker'] = sparse_marker
    roles['sparse_marker'] = 'nuisance'
    for j in range(q):
        columns[f"GENE{j + 1:04d}"] = z[:, j]
        roles[f"GENE{j + 1:04d}"] = 'feature'

    frame = pd.DataFrame(columns)
    frame.loc[rng.random(n) < 0.01, 'outcome'] = np.nan
    logger.info(f"Generated cohort with {n} rows, {p} nuisance and {q} feature columns")
    return Cohort(frame, ColumnManifest(roles=roles), gamma)


def sim_config_from(config: Dict[str, Any], **overrides: Any) -> SimConfig:
    return SimConfig.from_dict(config_section(config, 'simulation'), **overrides)
