"""
Tests for analysis and plotting helpers
"""
import pytest
import os
import sys
import tempfile

import numpy as np
import pandas as pd

# Add src to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from src.errors import DataError
from src.analyze import (
    summarize_replications, format_table, index_gradient, plot_data,
    plot_index_scatter, plot_consistency
)

def _replications():
    return pd.DataFrame({
        'replication': [0, 1, 2],
        'angle_deg': [8.0, 10.0, 90.0],
        'proj_loss': [0.01, 0.02, 1.0],
        'order': [1, 2, 1],
        'fallback_used': [False, True, False],
        'mse_A': [2.0, 4.0, 100.0],
        'mae_A': [1.0, 1.0, 9.0],
        'r2_A': [0.5, 0.3, -5.0],
        'alpha_B': [1, 0, 1],
        'error': ['', '', 'NuisanceError: singular'],
    })

def test_summarize_replications_skips_failures():
    summary = summarize_replications(_replications())
    assert summary['replications'] == 2
    assert summary['failures'] == 1
    assert summary['angle_deg'] == pytest.approx(9.0)
    assert summary['proj_loss'] == pytest.approx(0.015)
    assert summary['order2_rate'] == pytest.approx(0.5)
    assert summary['fallback_rate'] == pytest.approx(0.5)
    assert summary['mse_A'] == pytest.approx(3.0)
    assert summary['alpha_rate'] == pytest.approx(0.5)
    assert 'mse_B' not in summary

def test_summarize_replications_all_failed():
    table = _replications().assign(error='boom')
    assert summarize_replications(table) == {'replications': 0, 'failures': 3}

def test_format_table():
    summaries = pd.DataFrame([{
        'model': 'I', 'setting': 'independent', 'p': 20, 'q': 20,
        'angle_deg': 8.996, 'proj_loss': 0.0123, 'mse_B': 1.23456, 'r2_B': 0.9, 'failures': 0,
    }])
    text = format_table(summaries)
    assert '8.996(0.012)' in text
    assert 'MSE B' in text and '1.235' in text
    assert format_table(pd.DataFrame()) == '(no results)'

def test_index_gradient_monotone():
    t = np.linspace(-2.0, 2.0, 100)
    result = index_gradient(t, 3.0 * t + 1.0)
    assert result['monotone']
    assert result['spearman'] == pytest.approx(1.0)
    assert len(result['bins']) == 5
    assert sum(b['count'] for b in result['bins']) == 100

def test_index_gradient_non_monotone():
    t = np.linspace(-2.0, 2.0, 100)
    result = index_gradient(t, t ** 2)
    assert not result['monotone']
    with pytest.raises(DataError):
        index_gradient(t, t[:50])

def test_plot_data_columns():
    frame = plot_data(np.arange(3.0), {'stein_index': np.ones(3), 'pc1': np.zeros(3)})
    assert list(frame.columns) == ['y', 'stein_index', 'pc1']

def test_plots_are_written():
    rng = np.random.default_rng(0)
    with tempfile.TemporaryDirectory() as tmpdir:
        scatter = os.path.join(tmpdir, 'figures', 'scatter.png')
        assert plot_index_scatter(rng.normal(size=50), {'stein_index': rng.normal(size=50)}, scatter, title='t')
        assert os.path.exists(scatter)
        curve = os.path.join(tmpdir, 'consistency.png')
        table = pd.DataFrame({'n': [500, 1000, 2000], 'median_error': [0.3, 0.2, 0.14]})
        assert plot_consistency(table, curve)
        assert os.path.exists(curve)
