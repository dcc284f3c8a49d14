"""
Tests for simulation scenarios and method comparisons
"""
import pytest
import os
import sys
import tempfile
from dataclasses import replace

import numpy as np
import pandas as pd

# Add src to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
import src.experiments as experiments
from src.data import Dataset, load_table
from src.errors import ConfigError, DataError
from src.pipeline import PipelineConfig
from src.regressor import MlpSpec
from src.experiments import (
    SimConfig, ar1_covariance, sample_gaussian, true_direction, coefficient_matrix, link_eval,
    generate, metrics, fit_principal_components, evaluate_methods, run_comparison, run_grid,
    grid_configs, consistency_study, cross_validate, generate_cohort, sim_config_from
)

FAST_PIPELINE = PipelineConfig(tau_mode='fixed', tau1=0.3, tau2=0.6)

def test_ar1_covariance():
    np.testing.assert_allclose(ar1_covariance(2, 0.5), [[1.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(ar1_covariance(3, 0.0), np.eye(3))
    assert ar1_covariance(3, 0.3)[0, 2] == pytest.approx(0.09)
    with pytest.raises(ConfigError):
        ar1_covariance(3, 1.0)

def test_sample_gaussian_covariance():
    rng = np.random.default_rng(0)
    cov = ar1_covariance(5, 0.5)
    draws = sample_gaussian(rng, cov, 50000)
    np.testing.assert_allclose(np.cov(draws, rowvar=False), cov, atol=0.02)

def test_true_direction():
    gamma = true_direction(20)
    expected = np.zeros(20)
    expected[[0, 2, 6]] = 1.0 / np.sqrt(5)
    expected[[4, 8]] = -1.0 / np.sqrt(5)
    np.testing.assert_allclose(gamma, expected)
    with pytest.raises(ConfigError):
        true_direction(8)

def test_coefficient_matrix_designs():
    rng = np.random.default_rng(1)
    dense = coefficient_matrix(rng, q=5, p=4, design='dense')
    assert np.count_nonzero(dense) == 20
    assert np.all(np.abs(dense) <= 0.5 / np.sqrt(4))
    sparse = coefficient_matrix(rng, q=6, p=30, design='sparse', s_a=10)
    assert all(np.count_nonzero(row) == 10 for row in sparse)
    with pytest.raises(ConfigError):
        coefficient_matrix(rng, q=2, p=2, design='banded')

def test_link_functions():
    x = np.zeros(4)
    assert link_eval('I', x, 0.0) == pytest.approx(0.0)
    assert link_eval('I', np.array([1.0, 1.0, 0.0, 2.0]), 1.0) == pytest.approx(2 * np.sin(1) + 0.3 + 1.3 - 1.1 + 2.0)
    assert link_eval('II', x, 1.0) == pytest.approx(0.5)
    assert link_eval('III', x, 0.0) == pytest.approx(np.sqrt(0.0) * 2.0)
    assert link_eval('III', np.array([0.0, 1.0, 2.0, 0.0]), 2.0) == pytest.approx(2.0 + 4.0 + 4.0 + 1.0)

def test_sim_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(model='IV')
    with pytest.raises(ConfigError):
        SimConfig(p=3)
    with pytest.raises(ConfigError):
        SimConfig(q=8)
    with pytest.raises(ConfigError):
        SimConfig(feature_setting='mixed')
    cfg = SimConfig(model='ii', feature_setting='corr')
    assert cfg.model == 'II'
    assert cfg.feature_setting == 'correlated'
    assert SimConfig(p=400, q=100).resolved_a_design() == 'sparse'
    assert SimConfig(p=20, q=20).resolved_a_design() == 'dense'

def test_sim_config_from_config():
    cfg = sim_config_from({'simulation': {'model': 'III', 'snr': 2.0, 'not_a_field': 1}}, q=30)
    assert cfg.model == 'III'
    assert cfg.snr == 2.0
    assert cfg.q == 30

def test_generate_scenario():
    cfg = SimConfig(model='I', p=20, q=20, n_train=2000, n_test=500, seed=3)
    data = generate(cfg, 0)
    assert data.train.n == 2000 and data.test.n == 500
    assert data.empirical_snr == pytest.approx(5.0)
    np.testing.assert_allclose(data.t_train, data.train.z @ data.gamma)
    # independent setting: Z is uncorrelated with X
    corr = np.corrcoef(data.train.x.T, data.train.z.T)[:20, 20:]
    assert np.max(np.abs(corr)) < 0.1
    again = generate(cfg, 0)
    np.testing.assert_array_equal(again.train.y, data.train.y)
    assert not np.array_equal(generate(cfg, 1).train.y, data.train.y)

def test_generate_correlated_setting():
    cfg = SimConfig(model='II', feature_setting='correlated', p=20, q=20, n_train=400, n_test=100)
    data = generate(cfg, 0)
    assert data.a_matrix.shape == (20, 20)
    assert np.count_nonzero(data.a_matrix) == 400

def test_metrics():
    scores = metrics(np.array([0.0, 2.0]), np.array([1.0, 1.0]))
    assert scores == (1.0, 1.0, 0.0)
    perfect = metrics(np.array([1.0, 2.0, 4.0]), np.array([1.0, 2.0, 4.0]))
    assert perfect.mse == 0.0 and perfect.r2 == 1.0
    with pytest.raises(DataError):
        metrics(np.ones(3), np.zeros(3))

def test_principal_components_ignore_test_rows():
    rng = np.random.default_rng(4)
    z_train = rng.normal(size=(100, 6))
    z_test = rng.normal(size=(40, 6))
    pca = fit_principal_components(z_train)
    loadings = pca.components_.copy()
    before = pca.transform(z_test)
    z_test[:, 0] += 100.0
    np.testing.assert_array_equal(fit_principal_components(z_train).components_, loadings)
    assert pca.transform(z_test).shape == before.shape
    with pytest.raises(ConfigError):
        fit_principal_components(z_train, 7)

def test_principal_component_method_trains_on_training_rows_only(monkeypatch):
    seen = []

    class ConstantModel:
        def predict(self, features):
            return np.zeros(features.shape[0])

    def recording_train(features, y, spec):
        seen.append((features.copy(), y.copy()))
        return ConstantModel()

    monkeypatch.setattr(experiments, 'train', recording_train)
    rng = np.random.default_rng(5)
    train_d = Dataset(rng.normal(size=80), rng.normal(size=(80, 3)), rng.normal(size=(80, 6)))
    test_d = Dataset(rng.normal(size=30), rng.normal(size=(30, 3)), rng.normal(size=(30, 6)))
    shifted = Dataset(test_d.y, test_d.x, test_d.z + rng.normal(scale=50.0, size=(30, 6)))
    spec = MlpSpec(input_dim=1)
    t_train, t_test = train_d.z[:, 0], test_d.z[:, 0]
    evaluate_methods(train_d, test_d, t_train, t_test, spec, methods=('C',), seed=3)
    evaluate_methods(train_d, shifted, t_train, shifted.z[:, 0], spec, methods=('C',), seed=3)
    assert len(seen) == 2
    np.testing.assert_array_equal(seen[0][0], seen[1][0])
    np.testing.assert_array_equal(seen[0][1], train_d.y)
    assert seen[0][0].shape == (80, 4)

def test_run_comparison_encoder_only():
    sim = SimConfig(model='I', p=6, q=12, n_train=600, n_test=50, replications=3, seed=5)
    table = run_comparison(sim, FAST_PIPELINE, MlpSpec(input_dim=1), n_jobs=1, methods=())
    assert list(table['replication']) == [0, 1, 2]
    assert (table['error'] == '').all()
    assert (table['angle_deg'] < 30.0).all()
    again = run_comparison(sim, FAST_PIPELINE, MlpSpec(input_dim=1), n_jobs=1, methods=())
    pd.testing.assert_frame_equal(table, again)
    with pytest.raises(ConfigError):
        run_comparison(sim, FAST_PIPELINE, MlpSpec(input_dim=1), methods=('D',))

def test_run_comparison_records_failures(monkeypatch):
    def broken_fit(d, cfg):
        raise RuntimeError('solver exploded')
    monkeypatch.setattr(experiments, 'fit', broken_fit)
    sim = SimConfig(p=4, q=10, n_train=100, n_test=10, replications=2)
    table = run_comparison(sim, FAST_PIPELINE, MlpSpec(input_dim=1), n_jobs=1, methods=())
    assert len(table) == 2
    assert table['error'].str.contains('RuntimeError').all()

def test_run_comparison_with_methods():
    sim = SimConfig(model='I', p=5, q=10, n_train=400, n_test=100, replications=1, seed=6)
    spec = MlpSpec(input_dim=1, hidden=(8,), epochs=2, batch_size=32)
    table = run_comparison(sim, FAST_PIPELINE, spec, n_jobs=1)
    row = table.iloc[0]
    assert row['error'] == ''
    for method in ('A', 'B', 'C'):
        assert np.isfinite(row[f'mse_{method}'])
    assert row['alpha_B'] in (0, 1)

def test_grid_configs():
    configs = grid_configs(SimConfig())
    assert len(configs) == 12
    assert {(c.p, c.q) for c in configs} == {(20, 20), (400, 100)}

def test_generate_cohort_loads_through_manifest():
    cohort = generate_cohort(n=200, p=30, q=20, seed=1)
    assert cohort.frame.shape == (200, 2 + 30 + 20)
    assert cohort.manifest.response == 'outcome'
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'cohort.csv')
        cohort.frame.to_csv(path, index=False)
        d = load_table(path, cohort.manifest)
    assert d.n == int(cohort.frame['outcome'].notna().sum())
    assert 'sparse_marker' not in d.names_x
    assert 'cat_01' in d.names_x
    assert d.p == 29 and d.q == 20

def test_cross_validate_encoder_only():
    cohort = generate_cohort(n=300, p=20, q=15, seed=2, n_categorical=2)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'cohort.csv')
        cohort.frame.to_csv(path, index=False)
        d = load_table(path, cohort.manifest)
    table = cross_validate(d, FAST_PIPELINE, MlpSpec(input_dim=1), folds=3, seed=0, methods=())
    assert list(table['fold']) == [0, 1, 2]
    assert (table['error'] == '').all()
    assert table['n_test'].sum() == d.n

@pytest.mark.slow
def test_consistency_error_shrinks_with_n():
    sim = SimConfig(model='I', p=20, q=20, replications=5, seed=7)
    result = consistency_study(sim, PipelineConfig(permutations=20), sizes=(250, 2000))
    errors = result.table['median_error'].tolist()
    assert errors[1] < errors[0]
    assert result.slope < 0

@pytest.mark.slow
def test_model_one_low_dimensional_recovery_accuracy():
    sim = SimConfig(model='I', feature_setting='indep', p=20, q=20, n_train=2000, n_test=2000,
                    replications=20, seed=11)
    table = run_comparison(sim, PipelineConfig(permutations=50), MlpSpec(input_dim=1), n_jobs=1, methods=())
    assert (table['error'] == '').all()
    assert 4.5 <= table['angle_deg'].mean() <= 18.0
    assert table['proj_loss'].mean() < 0.05

@pytest.mark.slow
def test_stein_inputs_beat_raw_and_principal_components_across_grid():
    base = SimConfig(replications=20, seed=12)
    _, summaries = run_grid(base, PipelineConfig(permutations=20), MlpSpec(input_dim=1), n_jobs=4)
    assert len(summaries) == 12
    wins = ((summaries['mse_B'] < summaries['mse_A']) & (summaries['mse_B'] < summaries['mse_C'])).sum()
    assert wins >= 10

@pytest.mark.slow
@pytest.mark.parametrize('dims, regime', [((20, 20), 'auto'), ((400, 100), 'high')])
def test_consistency_across_four_sizes(dims, regime):
    p, q = dims
    sim = SimConfig(model='I', p=p, q=q, replications=20, seed=13)
    result = consistency_study(sim, PipelineConfig(permutations=20, regime=regime),
                               sizes=(500, 1000, 2000, 4000), n_jobs=4)
    errors = result.table['median_error'].tolist()
    assert all(later < earlier for earlier, later in zip(errors, errors[1:]))
    assert result.slope <= -0.25

@pytest.mark.slow
def test_cohort_benchmark_stein_beats_raw_inputs():
    cohort = generate_cohort(seed=14)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'cohort.csv')
        cohort.frame.to_csv(path, index=False)
        d = load_table(path, cohort.manifest)
    table = cross_validate(d, PipelineConfig(permutations=20), MlpSpec(input_dim=1), folds=5, seed=0,
                           methods=('A', 'B'), n_jobs=1)
    assert len(table) == 5
    assert (table['error'] == '').all()
    assert table['r2_B'].mean() > table['r2_A'].mean()
