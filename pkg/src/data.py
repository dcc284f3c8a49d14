"""
Multi-modal tabular data module.

Workflow:
1. Read a delimited file and resolve column roles from a manifest
2. Drop rows with a missing response and columns above the missing-rate cap
3. Integer-encode categorical nuisance columns, mean-impute remaining cells
4. Standardize nuisance and feature blocks, dropping zero-variance columns
5. Prescreen features by marginal variance
6. Produce deterministic k-fold splits for evaluation
"""
import os
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Any

import numpy as np
import pandas as pd
import yaml
from sklearn.model_selection import KFold
from prometheus_client import Counter, Gauge

from src.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

# Prometheus metrics
ROWS_LOADED = Gauge('stein_rows_loaded', 'Number of rows in the last loaded table')
ROWS_DROPPED = Counter('stein_rows_dropped', 'Rows dropped because the response was missing')
COLUMNS_DROPPED = Counter('stein_columns_dropped', 'Columns dropped for missingness or zero variance')

ROLES = ('response', 'nuisance', 'feature', 'drop')
ZERO_VARIANCE_TOL = 1e-12


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """Response y, nuisance block x (n x p) and feature block z (n x q)."""

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    names_x: Tuple[str, ...] = ()
    names_z: Tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        n = y.shape[0]
        x = np.asarray(self.x, dtype=float)
        if x.size == 0:
            x = np.zeros((n, 0))
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(n, -1) if n else z.reshape(0, -1)
        if x.ndim != 2 or z.ndim != 2:
            raise DataError("x and z must be two-dimensional")
        if x.shape[0] != n or z.shape[0] != n:
            raise DataError(f"Row counts differ: y={n}, x={x.shape[0]}, z={z.shape[0]}")
        if z.shape[1] < 1:
            raise DataError("Dataset needs at least one feature column")
        for label, block in (('y', y), ('x', x), ('z', z)):
            if not np.all(np.isfinite(block)):
                raise DataError(f"Non-finite values in {label}")
        names_x = tuple(self.names_x) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        names_z = tuple(self.names_z) or tuple(f"z{j + 1}" for j in range(z.shape[1]))
        if len(names_x) != x.shape[1] or len(names_z) != z.shape[1]:
            raise DataError("Column name lists do not match block widths")
        object.__setattr__(self, 'y', _readonly(y))
        object.__setattr__(self, 'x', _readonly(x))
        object.__setattr__(self, 'z', _readonly(z))
        object.__setattr__(self, 'names_x', names_x)
        object.__setattr__(self, 'names_z', names_z)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.z.shape[1]

    def subset_rows(self, rows: Sequence[int]) -> 'Dataset':
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.y[rows], self.x[rows], self.z[rows], self.names_x, self.names_z)

    def with_features(self, z: np.ndarray, names_z: Sequence[str]) -> 'Dataset':
        return Dataset(self.y, self.x, z, self.names_x, tuple(names_z))


@dataclass(frozen=True)
class ColumnManifest:
    """Column name -> role map plus load-time policies."""

    roles: Dict[str, str]
    missing_rate_cap: float = 0.30
    default_role: str = 'drop'
    delimiter: str = ','

    def __post_init__(self):
        for column, role in self.roles.items():
            if role not in ROLES:
                raise ConfigError(f"Unknown role '{role}' for column '{column}'")
        if self.default_role not in ('nuisance', 'feature', 'drop'):
            raise ConfigError(f"default_role must be nuisance, feature or drop, got '{self.default_role}'")
        if not 0.0 <= float(self.missing_rate_cap) <= 1.0:
            raise ConfigError("missing_rate_cap must lie in [0, 1]")
        responses = [c for c, r in self.roles.items() if r == 'response']
        if len(responses) != 1:
            raise ConfigError(f"Manifest needs exactly one response column, found {len(responses)}")
        has_feature = any(r == 'feature' for r in self.roles.values())
        if not has_feature and self.default_role != 'feature':
            raise ConfigError("Manifest needs at least one feature column")

    @property
    def response(self) -> str:
        return next(c for c, r in self.roles.items() if r == 'response')

    def role_of(self, column: str) -> str:
        return self.roles.get(column, self.default_role)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> 'ColumnManifest':
        if not isinstance(raw, dict) or 'columns' not in raw:
            raise ConfigError("Manifest must be a mapping with a 'columns' section")
        columns = raw['columns']
        roles: Dict[str, str] = {}
        if isinstance(columns, dict):
            roles = {str(k): str(v) for k, v in columns.items()}
        elif isinstance(columns, list):
            for entry in columns:
                roles[str(entry['name'])] = str(entry['role'])
        else:
            raise ConfigError("Manifest 'columns' must be a mapping or a list")
        return cls(
            roles=roles,
            missing_rate_cap=float(raw.get('missing_rate_cap', 0.30)),
            default_role=str(raw.get('default_role', 'drop')),
            delimiter=str(raw.get('delimiter', ',')),
        )

    @classmethod
    def from_yaml(cls, path: str) -> 'ColumnManifest':
        if not os.path.exists(path):
            raise ConfigError(f"Manifest not found: {path}")
        with open(path, 'r') as file:
            try:
                raw = yaml.safe_load(file)
            except yaml.YAMLError as e:
                raise ConfigError(f"Manifest {path} is not valid YAML: {e}") from e
        return cls.from_dict(raw or {})

    def to_dict(self) -> Dict[str, Any]:
        return {
            'columns': dict(self.roles),
            'missing_rate_cap': self.missing_rate_cap,
            'default_role': self.default_role,
            'delimiter': self.delimiter,
        }

    def save(self, path: str) -> None:
        with open(path, 'w') as file:
            yaml.safe_dump(self.to_dict(), file, sort_keys=False)


@dataclass(frozen=True, eq=False)
class ScalingParams:
    """Per-column means and standard deviations of the retained columns."""

    x_mean: np.ndarray
    x_std: np.ndarray
    z_mean: np.ndarray
    z_std: np.ndarray
    y_mean: Optional[float] = None
    y_std: Optional[float] = None
    kept_x: Tuple[int, ...] = ()
    kept_z: Tuple[int, ...] = ()
    dropped_x: Tuple[str, ...] = ()
    dropped_z: Tuple[str, ...] = ()


def _encode_categorical(column: pd.Series) -> pd.Series:
    # factorize numbers labels in order of first appearance; missing -> -1
    codes, _ = pd.factorize(column, sort=False)
    encoded = pd.Series(codes, index=column.index, dtype=float)
    return encoded.where(codes >= 0)


def load_table(path: str, manifest: ColumnManifest) -> Dataset:
    """
    Load a delimited table into a Dataset following the manifest.

    Args:
        path: Delimited text file with a header row (UTF-8).
        manifest: Column roles and missing-value policy.

    Returns:
        Dataset with rows lacking a response removed, high-missing columns
        dropped, categorical nuisance columns integer-encoded and remaining
        gaps mean-imputed.
    """
    try:
        df = pd.read_csv(path, sep=manifest.delimiter, encoding='utf-8')
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Unable to read {path}: {e}") from e

    header = [str(c) for c in df.columns]
    df.columns = header
    unknown = [c for c in manifest.roles if c not in header]
    if unknown:
        raise ConfigError(f"Manifest columns not found in {path}: {', '.join(unknown)}")

    response = manifest.response
    y = pd.to_numeric(df[response], errors='coerce')
    keep_rows = y.notna()
    dropped_rows = int((~keep_rows).sum())
    if dropped_rows:
        logger.info(f"Dropping {dropped_rows} rows with missing response '{response}'")
        ROWS_DROPPED.inc(dropped_rows)
    df = df.loc[keep_rows].reset_index(drop=True)
    y = y.loc[keep_rows].reset_index(drop=True)
    if df.empty:
        raise DataError(f"No rows left in {path} after removing missing responses")

    blocks: Dict[str, List[str]] = {'nuisance': [], 'feature': []}
    for column in header:
        if column == response:
            continue
        role = manifest.role_of(column)
        if role in blocks:
            blocks[role].append(column)

    frames: Dict[str, pd.DataFrame] = {}
    for role, columns in blocks.items():
        cleaned = {}
        for column in columns:
            values = df[column]
            missing_rate = float(values.isna().mean())
            if missing_rate > manifest.missing_rate_cap:
                logger.warning(f"Dropping column '{column}': {missing_rate:.1%} missing exceeds cap {manifest.missing_rate_cap:.0%}")
                COLUMNS_DROPPED.inc()
                continue
            numeric = pd.to_numeric(values, errors='coerce')
            if bool((numeric.isna() & values.notna()).any()):
                if role == 'feature':
                    raise DataError(f"Feature column '{column}' contains non-numeric values")
                numeric = _encode_categorical(values)
                logger.debug(f"Integer-encoded categorical nuisance column '{column}'")
            if numeric.isna().any():
                numeric = numeric.fillna(numeric.mean())
            cleaned[column] = numeric.astype(float)
        frames[role] = pd.DataFrame(cleaned, index=df.index)

    if frames['feature'].shape[1] == 0:
        raise DataError("No feature columns left after filtering")

    ROWS_LOADED.set(len(df))
    logger.info(f"Loaded {len(df)} rows, {frames['nuisance'].shape[1]} nuisance and {frames['feature'].shape[1]} feature columns from {path}")
    return Dataset(
        y=y.to_numpy(dtype=float),
        x=frames['nuisance'].to_numpy(dtype=float),
        z=frames['feature'].to_numpy(dtype=float),
        names_x=tuple(frames['nuisance'].columns),
        names_z=tuple(frames['feature'].columns),
    )


def _column_stats(block: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = block.mean(axis=0)
    std = block.std(axis=0, ddof=1)
    keep = std > ZERO_VARIANCE_TOL * np.maximum(1.0, np.abs(mean))
    return mean, std, keep


def standardize(d: Dataset, scale_y: bool = False) -> Tuple[Dataset, ScalingParams]:
    """
    Standardize x and z columns to mean 0 and sample std 1 (denominator n-1).

    Zero-variance columns are dropped and recorded in the returned params.
    """
    if d.n < 2:
        raise DataError("standardize needs at least two rows")

    x_mean, x_std, x_keep = _column_stats(d.x)
    z_mean, z_std, z_keep = _column_stats(d.z)
    dropped_x = tuple(name for name, keep in zip(d.names_x, x_keep) if not keep)
    dropped_z = tuple(name for name, keep in zip(d.names_z, z_keep) if not keep)
    for name in dropped_x + dropped_z:
        logger.warning(f"Dropping zero-variance column '{name}'")
    if dropped_x or dropped_z:
        COLUMNS_DROPPED.inc(len(dropped_x) + len(dropped_z))
    if not z_keep.any():
        raise DataError("Every feature column has zero variance")

    y_mean = y_std = None
    if scale_y:
        y_mean = float(d.y.mean())
        y_std = float(d.y.std(ddof=1))
        if y_std <= ZERO_VARIANCE_TOL * max(1.0, abs(y_mean)):
            raise DataError("Response has zero variance and cannot be scaled")

    params = ScalingParams(
        x_mean=x_mean[x_keep], x_std=x_std[x_keep],
        z_mean=z_mean[z_keep], z_std=z_std[z_keep],
        y_mean=y_mean, y_std=y_std,
        kept_x=tuple(int(i) for i in np.flatnonzero(x_keep)),
        kept_z=tuple(int(i) for i in np.flatnonzero(z_keep)),
        dropped_x=dropped_x, dropped_z=dropped_z,
    )
    return apply_scaling(d, params), params


def apply_scaling(d: Dataset, params: ScalingParams) -> Dataset:
    """Apply previously fitted scaling (e.g. from a training fold) to d."""
    kept_x = list(params.kept_x)
    kept_z = list(params.kept_z)
    if (kept_x and max(kept_x) >= d.p) or max(kept_z) >= d.q:
        raise DataError("Scaling parameters do not match the dataset columns")
    x = (d.x[:, kept_x] - params.x_mean) / params.x_std if kept_x else np.zeros((d.n, 0))
    z = (d.z[:, kept_z] - params.z_mean) / params.z_std
    y = d.y if params.y_mean is None else (d.y - params.y_mean) / params.y_std
    return Dataset(
        y=y, x=x, z=z,
        names_x=tuple(d.names_x[i] for i in kept_x),
        names_z=tuple(d.names_z[i] for i in kept_z),
    )


def variance_prescreen(z: np.ndarray, k: int) -> List[int]:
    """
    Indices of the k columns of z with the largest sample variance.

    Sorted by variance descending; ties go to the lower column index.
    """
    z = np.asarray(z, dtype=float)
    q = z.shape[1]
    if not 1 <= k <= q:
        raise ConfigError(f"Prescreen size k={k} must lie in [1, {q}]")
    variances = z.var(axis=0, ddof=1) if z.shape[0] > 1 else np.zeros(q)
    order = np.argsort(-variances, kind='stable')
    return [int(i) for i in order[:k]]


def select_features(d: Dataset, indices: Sequence[int]) -> Dataset:
    """Keep only the listed feature columns, in the given order."""
    indices = [int(i) for i in indices]
    return d.with_features(d.z[:, indices], [d.names_z[i] for i in indices])


def kfold_split(n: int, k: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Deterministic k-fold partition of range(n).

    Returns:
        List of (train indices, test indices); test sets partition [0, n)
        and their sizes differ by at most one.
    """
    if not 2 <= k <= n:
        raise ConfigError(f"Fold count k={k} must lie in [2, n={n}]")
    splitter = KFold(n_splits=k, shuffle=True, random_state=int(seed) % (2 ** 32))
    folds = []
    for train, test in splitter.split(np.arange(n)):
        folds.append((np.sort(train), np.sort(test)))
    return folds


def dataset_frame(d: Dataset, response_name: str = 'response') -> pd.DataFrame:
    """Flatten a Dataset into a DataFrame with response, nuisance and feature columns."""
    frame = pd.DataFrame({response_name: d.y})
    for j, name in enumerate(d.names_x):
        frame[name] = d.x[:, j]
    for j, name in enumerate(d.names_z):
        frame[name] = d.z[:, j]
    return frame


def manifest_for(d: Dataset, response_name: str = 'response', delimiter: str = ',') -> ColumnManifest:
    """Manifest describing the columns written by write_table."""
    roles = {response_name: 'response'}
    roles.update({name: 'nuisance' for name in d.names_x})
    roles.update({name: 'feature' for name in d.names_z})
    return ColumnManifest(roles=roles, delimiter=delimiter)


def write_table(d: Dataset, path: str, delimiter: str = ',', response_name: str = 'response') -> ColumnManifest:
    """
    Write a Dataset as a delimited file and return its manifest.

    Args:
        d: Dataset to write.
        path: Output file.
        delimiter: Field separator.
        response_name: Header used for y.
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    dataset_frame(d, response_name).to_csv(path, sep=delimiter, index=False)
    logger.info(f"Wrote {d.n} rows to {path}")
    return manifest_for(d, response_name, delimiter)


def drop_constant_columns(d: Dataset) -> Dataset:
    """Remove zero-variance nuisance and feature columns, keeping raw values."""
    if d.n < 2:
        return d
    x_keep = _column_stats(d.x)[2]
    z_keep = _column_stats(d.z)[2]
    if x_keep.all() and z_keep.all():
        return d
    if not z_keep.any():
        raise DataError("Every feature column has zero variance")
    dropped = [n for n, k in zip(d.names_x, x_keep) if not k] + [n for n, k in zip(d.names_z, z_keep) if not k]
    logger.warning(f"Dropping zero-variance columns: {', '.join(dropped)}")
    COLUMNS_DROPPED.inc(len(dropped))
    return Dataset(
        y=d.y, x=d.x[:, x_keep], z=d.z[:, z_keep],
        names_x=tuple(n for n, k in zip(d.names_x, x_keep) if k),
        names_z=tuple(n for n, k in zip(d.names_z, z_keep) if k),
    )


def load_columns(path: str, names_x: Sequence[str], names_z: Sequence[str],
                 delimiter: str = ',') -> Tuple[np.ndarray, np.ndarray]:
    """
    Read named nuisance and feature columns for scoring new rows.

    No response column is needed. Categorical nuisance columns are
    integer-encoded and gaps mean-imputed as in load_table; an input with a
    header and no rows gives empty blocks.
    """
    try:
        df = pd.read_csv(path, sep=delimiter, encoding='utf-8')
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Unable to read {path}: {e}") from e
    df.columns = [str(c) for c in df.columns]
    missing = [c for c in list(names_x) + list(names_z) if c not in df.columns]
    if missing:
        raise ConfigError(f"Columns expected by the encoder are missing from {path}: {', '.join(missing)}")

    blocks = []
    for role, names in (('nuisance', names_x), ('feature', names_z)):
        cleaned = []
        for column in names:
            values = df[column]
            numeric = pd.to_numeric(values, errors='coerce')
            if bool((numeric.isna() & values.notna()).any()):
                if role == 'feature':
                    raise DataError(f"Feature column '{column}' contains non-numeric values")
                numeric = _encode_categorical(values)
            if numeric.isna().any():
                if numeric.notna().any():
                    numeric = numeric.fillna(numeric.mean())
                elif len(numeric):
                    raise DataError(f"Column '{column}' has no values in {path}")
            cleaned.append(numeric.to_numpy(dtype=float))
        blocks.append(np.column_stack(cleaned) if cleaned else np.zeros((len(df), 0)))
    return blocks[0], blocks[1]
