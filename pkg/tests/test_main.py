"""
Tests for the command line interface
"""
import pytest
import os
import sys
import json

import pandas as pd

# Add src to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from main import main

TEST_CONFIG = """
pipeline:
  permutations: 20
regressor:
  hidden: [16]
  epochs: 2
  batch_size: 32
logging:
  level: "WARNING"
  file: null
"""

SMALL_SIM = ['--p', '5', '--q', '10', '--n-train', '300', '--n-test', '100', '--threads', '1']

@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / 'config.yaml'
    path.write_text(TEST_CONFIG)
    return str(path)

@pytest.fixture
def simulated(tmp_path, config_path):
    out = tmp_path / 'sim'
    status = main(['simulate', '--config', config_path, '--output-dir', str(out), '--reps', '1',
                   '--methods', '', '--emit-data', '--seed', '2'] + SMALL_SIM)
    assert status == 0
    return out / 'data'

def _read(path):
    with open(path) as f:
        return f.read()

def test_unknown_command_is_usage_error():
    assert main(['explode']) == 2

def test_simulate_invalid_model(tmp_path, config_path):
    status = main(['simulate', '--config', config_path, '--output-dir', str(tmp_path / 'out'),
                   '--model', 'IV'] + SMALL_SIM)
    assert status == 2
    assert (tmp_path / 'out' / 'metrics.prom').exists()

def test_missing_config_file(tmp_path):
    assert main(['simulate', '--config', str(tmp_path / 'nope.yaml')]) == 2

def test_simulate_is_reproducible(tmp_path, config_path):
    outputs = []
    for name in ('first', 'second'):
        out = tmp_path / name
        status = main(['simulate', '--config', config_path, '--output-dir', str(out), '--reps', '3',
                       '--methods', 'A', '--seed', '3'] + SMALL_SIM)
        assert status == 0
        outputs.append(out)
    for filename in ('replications.csv', 'summary.json', 'summary.txt'):
        assert _read(outputs[0] / filename) == _read(outputs[1] / filename)
    table = pd.read_csv(outputs[0] / 'replications.csv', keep_default_na=False)
    assert len(table) == 3
    assert (table['error'] == '').all()
    assert 'mse_A' in table.columns
    info = json.loads(_read(outputs[0] / 'run_info.json'))
    assert 'seconds' in info['timing']
    assert (outputs[0] / 'metrics.prom').exists()

def test_fit_encode_predict(tmp_path, config_path, simulated):
    fit_dir = tmp_path / 'fit'
    status = main(['fit', '--config', config_path, '--output-dir', str(fit_dir),
                   '--data', str(simulated / 'train.csv'), '--manifest', str(simulated / 'train_manifest.yaml'),
                   '--train-regressor', '--emit-plot-data', '--top-k', '5'])
    assert status == 0
    for filename in ('fit_report.json', 'top_features.csv', 'probe_strengths.csv', 'regressor.pt',
                     'plot_data.csv', 'index_gradient.json', 'run_info.json'):
        assert (fit_dir / filename).exists(), filename
    report = json.loads(_read(fit_dir / 'fit_report.json'))
    assert report['timing'] == {}
    assert report['shape'] == {'n': 300, 'p': 5, 'q': 10}
    assert len(pd.read_csv(fit_dir / 'top_features.csv')) <= 5
    assert len(pd.read_csv(fit_dir / 'probe_strengths.csv')) == 16

    encode_dir = tmp_path / 'encode'
    status = main(['encode', '--config', config_path, '--output-dir', str(encode_dir),
                   '--encoder', str(fit_dir / 'fit_report.json'), '--data', str(simulated / 'test.csv')])
    assert status == 0
    encoded = pd.read_csv(encode_dir / 'encoded.csv')
    assert len(encoded) == 100

    predict_dir = tmp_path / 'predict'
    status = main(['predict', '--config', config_path, '--output-dir', str(predict_dir),
                   '--encoder', str(fit_dir / 'fit_report.json'), '--regressor', str(fit_dir / 'regressor.pt'),
                   '--data', str(simulated / 'test.csv')])
    assert status == 0
    predictions = pd.read_csv(predict_dir / 'predictions.csv')
    assert len(predictions) == 100
    pd.testing.assert_series_equal(predictions['t_hat'], encoded['t_hat'])

def test_fit_top_genes_prescreen(tmp_path, config_path, simulated):
    out = tmp_path / 'fit'
    status = main(['fit', '--config', config_path, '--output-dir', str(out), '--top-genes', '6',
                   '--data', str(simulated / 'train.csv'), '--manifest', str(simulated / 'train_manifest.yaml')])
    assert status == 0
    report = json.loads(_read(out / 'fit_report.json'))
    assert report['shape']['q'] == 6
    assert len(report['encoder']['gamma']) == 6

def test_fit_requires_manifest(tmp_path, config_path, simulated):
    out = str(tmp_path / 'fit')
    assert main(['fit', '--config', config_path, '--output-dir', out,
                 '--data', str(simulated / 'train.csv')]) == 2
    assert main(['fit', '--config', config_path, '--output-dir', out,
                 '--data', str(simulated / 'train.csv'), '--manifest', str(tmp_path / 'missing.yaml')]) == 2

def test_encode_errors_and_empty_input(tmp_path, config_path, simulated):
    fit_dir = tmp_path / 'fit'
    assert main(['fit', '--config', config_path, '--output-dir', str(fit_dir), '--tau-mode', 'fixed',
                 '--tau1', '0.3', '--tau2', '0.6',
                 '--data', str(simulated / 'train.csv'), '--manifest', str(simulated / 'train_manifest.yaml')]) == 0
    encoder = str(fit_dir / 'fit_report.json')

    # missing encoder artifact
    assert main(['encode', '--config', config_path, '--output-dir', str(tmp_path / 'e1'),
                 '--encoder', str(tmp_path / 'none.json'), '--data', str(simulated / 'test.csv')]) == 2

    # a feature column the encoder needs is absent
    partial = tmp_path / 'partial.csv'
    pd.read_csv(simulated / 'test.csv').drop(columns=['z3']).to_csv(partial, index=False)
    assert main(['encode', '--config', config_path, '--output-dir', str(tmp_path / 'e2'),
                 '--encoder', encoder, '--data', str(partial)]) == 2

    # header without rows
    empty = tmp_path / 'empty.csv'
    empty.write_text(','.join(pd.read_csv(simulated / 'test.csv', nrows=0).columns) + '\n')
    assert main(['encode', '--config', config_path, '--output-dir', str(tmp_path / 'e3'),
                 '--encoder', encoder, '--data', str(empty)]) == 0
    assert len(pd.read_csv(tmp_path / 'e3' / 'encoded.csv')) == 0

def test_benchmark_encoder_only(tmp_path, config_path, simulated):
    out = tmp_path / 'bench'
    status = main(['benchmark', '--config', config_path, '--output-dir', str(out), '--folds', '3',
                   '--methods', '', '--data', str(simulated / 'train.csv'),
                   '--manifest', str(simulated / 'train_manifest.yaml'), '--threads', '1'])
    assert status == 0
    folds = pd.read_csv(out / 'folds.csv', keep_default_na=False)
    assert list(folds['fold']) == [0, 1, 2]
    assert (folds['error'] == '').all()

def test_benchmark_records_effective_seed(tmp_path, simulated):
    seeded_config = tmp_path / 'seeded.yaml'
    seeded_config.write_text(TEST_CONFIG.replace('  permutations: 20\n', '  permutations: 20\n  seed: 7\n'))
    data_args = ['--methods', '', '--folds', '3', '--threads', '1',
                 '--data', str(simulated / 'train.csv'), '--manifest', str(simulated / 'train_manifest.yaml')]
    for name, extra, expected in (('from_config', [], 7), ('from_flag', ['--seed', '4'], 4)):
        out = tmp_path / name
        status = main(['benchmark', '--config', str(seeded_config), '--output-dir', str(out)] + data_args + extra)
        assert status == 0
        info = json.loads(_read(out / 'run_info.json'))
        assert info['config']['seed'] == expected
        assert info['config']['pipeline']['seed'] == expected
        summary = json.loads(_read(out / 'summary.json'))
        assert summary['resolved_config']['seed'] == expected

def test_consistency_command(tmp_path, config_path):
    out = tmp_path / 'consistency'
    status = main(['consistency', '--config', config_path, '--output-dir', str(out), '--reps', '2',
                   '--sizes', '200,400', '--p', '5', '--q', '10', '--threads', '1'])
    assert status == 0
    result = json.loads(_read(out / 'consistency.json'))
    assert [row['n'] for row in result['rows']] == [200, 400]
    assert (out / 'consistency.csv').exists()
