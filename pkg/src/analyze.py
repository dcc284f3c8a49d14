"""
Analysis of encoder runs.

Workflow:
1. Summarize replication tables into one row per configuration
   (Angle(Proj), MSE / MAE / R^2 per method, selection rates)
2. Render summaries as human-readable tables
3. Measure how monotonically the response moves along an index (binned means, Spearman)
4. Draw scatter plots of the response against the Stein index and PC1, and
   the log-log consistency curve
"""
import logging
import os
from typing import Any, Dict, Mapping, Optional

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from prometheus_client import Counter
from scipy import stats

from src.errors import DataError

logger = logging.getLogger(__name__)

# Prometheus metrics
FIGURES_CREATED = Counter('stein_encoder_figures_created', 'Number of figures written')

METHOD_LABELS = {'A': 'raw [X, Z]', 'B': 'Stein [X, t]', 'C': 'PCA [X, PC]'}


def _successful(table: pd.DataFrame) -> pd.DataFrame:
    if 'error' not in table.columns:
        return table
    return table[table['error'].fillna('') == '']


def summarize_replications(table: pd.DataFrame) -> Dict[str, Any]:
    """
    Means over the successful replications of one configuration.

    Columns absent from the table (methods not run) are left out of the summary.
    """
    ok = _successful(table)
    summary: Dict[str, Any] = {'replications': int(len(ok)), 'failures': int(len(table) - len(ok))}
    if ok.empty:
        return summary
    if 'angle_deg' in ok.columns:
        summary['angle_deg'] = float(ok['angle_deg'].mean())
        summary['angle_sd'] = float(ok['angle_deg'].std(ddof=1)) if len(ok) > 1 else 0.0
        summary['proj_loss'] = float(ok['proj_loss'].mean())
        summary['order2_rate'] = float((ok['order'] == 2).mean())
        summary['fallback_rate'] = float(ok['fallback_used'].astype(bool).mean())
    for method in METHOD_LABELS:
        for metric in ('mse', 'mae', 'r2'):
            column = f'{metric}_{method}'
            if column in ok.columns:
                summary[column] = float(ok[column].mean())
    if 'alpha_B' in ok.columns:
        summary['alpha_rate'] = float(ok['alpha_B'].mean())
    return summary


def format_table(summaries: pd.DataFrame) -> str:
    """Fixed-width table with Angle(Proj) and MSE/R^2 columns per method."""
    if summaries.empty:
        return '(no results)'
    frame = pd.DataFrame(index=summaries.index)
    for column in ('model', 'setting', 'p', 'q', 'fold'):
        if column in summaries.columns:
            frame[column] = summaries[column]
    if 'angle_deg' in summaries.columns:
        frame['Angle(Proj)'] = [
            f"{angle:.3f}({proj:.3f})" for angle, proj in zip(summaries['angle_deg'], summaries['proj_loss'])
        ]
    for method in METHOD_LABELS:
        if f'mse_{method}' in summaries.columns:
            frame[f'MSE {method}'] = summaries[f'mse_{method}'].map(lambda v: f"{v:.3f}")
            frame[f'R2 {method}'] = summaries[f'r2_{method}'].map(lambda v: f"{v:.3f}")
    if 'failures' in summaries.columns:
        frame['failed'] = summaries['failures']
    return frame.to_string(index=False)


def index_gradient(t: np.ndarray, y: np.ndarray, bins: int = 5) -> Dict[str, Any]:
    """
    Mean response per quantile bin of an index, plus the Spearman correlation.

    Returns:
        Dict with per-bin rows, 'spearman' and 'monotone' (bin means strictly
        increasing or strictly decreasing).
    """
    t = np.asarray(t, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if t.shape != y.shape or t.shape[0] < max(bins, 3):
        raise DataError("index_gradient needs equal-length vectors with at least 'bins' rows")
    codes = pd.qcut(t, bins, labels=False, duplicates='drop')
    frame = pd.DataFrame({'bin': codes, 't': t, 'y': y})
    grouped = frame.groupby('bin').agg(t_low=('t', 'min'), t_high=('t', 'max'),
                                       mean_y=('y', 'mean'), count=('y', 'size'))
    steps = np.diff(grouped['mean_y'].to_numpy())
    rho = stats.spearmanr(t, y).statistic
    return {
        'bins': [
            {'bin': int(b), 't_low': float(row['t_low']), 't_high': float(row['t_high']),
             'mean_y': float(row['mean_y']), 'count': int(row['count'])}
            for b, row in grouped.iterrows()
        ],
        'spearman': float(rho),
        'monotone': bool(len(steps) > 0 and (np.all(steps > 0) or np.all(steps < 0))),
    }


def plot_data(y: np.ndarray, indices: Mapping[str, np.ndarray]) -> pd.DataFrame:
    """Columns y and one per index, ready to write as plot data."""
    frame = pd.DataFrame({'y': np.asarray(y, dtype=float)})
    for name, values in indices.items():
        frame[name] = np.asarray(values, dtype=float)
    return frame


def plot_index_scatter(y: np.ndarray, indices: Mapping[str, np.ndarray], filepath: str,
                       title: Optional[str] = None) -> bool:
    """Scatter of the response against each index (e.g. Stein t_hat and PC1), one panel each."""
    try:
        directory = os.path.dirname(filepath)
        if directory:
            os.makedirs(directory, exist_ok=True)
        fig, axes = plt.subplots(1, len(indices), figsize=(5 * len(indices), 4.5), squeeze=False)
        for ax, (name, values) in zip(axes[0], indices.items()):
            ax.scatter(values, y, s=6, alpha=0.4)
            ax.set_xlabel(name)
            ax.set_ylabel('response')
            ax.grid(True, alpha=0.3)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(filepath)
        plt.close(fig)

        logger.info(f"Saved index scatter plot to {filepath}")
        FIGURES_CREATED.inc()
        return True
    except Exception as e:
        logger.error(f"Error generating index scatter plot: {str(e)}")
        return False


def plot_consistency(table: pd.DataFrame, filepath: str) -> bool:
    """Median aligned error against n on log-log axes."""
    try:
        directory = os.path.dirname(filepath)
        if directory:
            os.makedirs(directory, exist_ok=True)
        fig, ax = plt.subplots(figsize=(6, 4.5))
        ax.loglog(table['n'], table['median_error'], marker='o')
        ax.set_xlabel('n')
        ax.set_ylabel('median aligned error')
        ax.grid(True, which='both', alpha=0.3)
        fig.tight_layout()
        fig.savefig(filepath)
        plt.close(fig)

        logger.info(f"Saved consistency plot to {filepath}")
        FIGURES_CREATED.inc()
        return True
    except Exception as e:
        logger.error(f"Error generating consistency plot: {str(e)}")
        return False
