"""
Tests for the tabular data module
"""
import pytest
import os
import sys
import tempfile

import numpy as np
import pandas as pd

# Add src to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from src.errors import ConfigError, DataError
from src.data import (
    Dataset, ColumnManifest, load_table, load_columns, standardize, apply_scaling,
    variance_prescreen, select_features, kfold_split, write_table, drop_constant_columns
)

def _write_cohort_csv(path):
    frame = pd.DataFrame({
        'id': ['a', 'b', 'c', 'd', 'e', 'f'],
        'y': [1.0, 2.0, None, 4.0, 5.0, 6.0],
        'age': [30.0, 40.0, 50.0, None, 60.0, 70.0],
        'grade': ['low', 'high', 'low', 'mid', None, 'high'],
        'mostly_missing': [1.0, None, None, None, None, 2.0],
        'g1': [0.5, 1.5, 2.5, 3.5, 4.5, 5.5],
        'g2': [1.0, None, 1.0, 3.0, 1.0, 1.0],
    })
    frame.to_csv(path, index=False)

def _manifest():
    return ColumnManifest(roles={
        'id': 'drop', 'y': 'response', 'age': 'nuisance', 'grade': 'nuisance',
        'mostly_missing': 'nuisance', 'g1': 'feature', 'g2': 'feature',
    })

def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros(3), np.zeros((2, 1)), np.zeros((3, 2)))
    with pytest.raises(DataError):
        Dataset(np.array([1.0, np.nan]), np.zeros((2, 0)), np.zeros((2, 2)))
    d = Dataset(np.zeros(4), np.zeros((4, 0)), np.ones((4, 3)))
    assert (d.n, d.p, d.q) == (4, 0, 3)
    assert d.names_z == ('z1', 'z2', 'z3')
    with pytest.raises(ValueError):
        d.z[0, 0] = 5.0

def test_manifest_requires_one_response():
    with pytest.raises(ConfigError):
        ColumnManifest(roles={'g1': 'feature'})
    with pytest.raises(ConfigError):
        ColumnManifest(roles={'y': 'response', 'g1': 'gene'})

def test_manifest_list_form_and_missing_file():
    manifest = ColumnManifest.from_dict({'columns': [
        {'name': 'y', 'role': 'response'}, {'name': 'g1', 'role': 'feature'},
    ], 'missing_rate_cap': 0.5})
    assert manifest.response == 'y'
    assert manifest.missing_rate_cap == 0.5
    assert manifest.role_of('unlisted') == 'drop'
    with pytest.raises(ConfigError):
        ColumnManifest.from_yaml('/nonexistent/manifest.yaml')

def test_load_table_applies_manifest_policies():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'cohort.csv')
        _write_cohort_csv(path)
        d = load_table(path, _manifest())

    # the row with a missing response is gone
    assert d.n == 5
    np.testing.assert_array_equal(d.y, [1.0, 2.0, 4.0, 5.0, 6.0])
    # 'mostly_missing' exceeds the 30% cap
    assert d.names_x == ('age', 'grade')
    assert d.names_z == ('g1', 'g2')
    # age imputed with the mean of the observed values in retained rows
    assert d.x[2, 0] == pytest.approx(np.mean([30.0, 40.0, 60.0, 70.0]))
    # grade codes follow first appearance: low=0, high=1, mid=2; missing imputed with the mean code
    np.testing.assert_allclose(d.x[[0, 1, 2, 4], 1], [0.0, 1.0, 2.0, 1.0])
    assert d.x[3, 1] == pytest.approx(1.0)
    assert d.z[1, 1] == pytest.approx(np.mean([1.0, 3.0, 1.0, 1.0]))

def test_load_table_unknown_manifest_column():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'cohort.csv')
        _write_cohort_csv(path)
        manifest = ColumnManifest(roles={'y': 'response', 'g1': 'feature', 'not_there': 'nuisance'})
        with pytest.raises(ConfigError):
            load_table(path, manifest)

def test_load_table_non_numeric_feature():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'bad.csv')
        pd.DataFrame({'y': [1.0, 2.0, 3.0], 'g1': ['1.0', 'oops', '2.0']}).to_csv(path, index=False)
        with pytest.raises(DataError):
            load_table(path, ColumnManifest(roles={'y': 'response', 'g1': 'feature'}))

def test_load_table_missing_file():
    with pytest.raises(DataError):
        load_table('/nonexistent/data.csv', ColumnManifest(roles={'y': 'response', 'g1': 'feature'}))

def test_standardize_and_apply_scaling():
    rng = np.random.default_rng(0)
    z = rng.normal(3.0, 2.0, size=(50, 4))
    z[:, 2] = 7.0
    x = rng.normal(size=(50, 2))
    d = Dataset(rng.normal(size=50), x, z)
    scaled, params = standardize(d)

    assert scaled.names_z == ('z1', 'z2', 'z4')
    assert params.dropped_z == ('z3',)
    np.testing.assert_allclose(scaled.z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(scaled.z.std(axis=0, ddof=1), 1.0)

    other = Dataset(np.zeros(5), rng.normal(size=(5, 2)), rng.normal(size=(5, 4)))
    applied = apply_scaling(other, params)
    np.testing.assert_allclose(applied.z[:, 0], (other.z[:, 0] - params.z_mean[0]) / params.z_std[0])

def test_standardize_all_constant_features():
    d = Dataset(np.arange(4.0), np.zeros((4, 0)), np.ones((4, 2)))
    with pytest.raises(DataError):
        standardize(d)

def test_variance_prescreen_order_and_ties():
    z = np.column_stack([
        [0.0, 1.0, 0.0, 1.0],
        [0.0, 2.0, 0.0, 2.0],
        [0.0, 1.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, 0.0],
    ])
    assert variance_prescreen(z, 3) == [1, 0, 2]
    assert variance_prescreen(z, 1) == [1]
    with pytest.raises(ConfigError):
        variance_prescreen(z, 5)

def test_select_features_keeps_names():
    d = Dataset(np.zeros(3), np.zeros((3, 0)), np.arange(9.0).reshape(3, 3), names_z=('a', 'b', 'c'))
    picked = select_features(d, [2, 0])
    assert picked.names_z == ('c', 'a')
    np.testing.assert_array_equal(picked.z[:, 0], d.z[:, 2])

def test_kfold_split_partitions_rows():
    folds = kfold_split(23, 5, seed=1)
    tests = np.concatenate([test for _, test in folds])
    np.testing.assert_array_equal(np.sort(tests), np.arange(23))
    sizes = [len(test) for _, test in folds]
    assert max(sizes) - min(sizes) <= 1
    for train, test in folds:
        assert not set(train) & set(test)
    again = kfold_split(23, 5, seed=1)
    for (_, a), (_, b) in zip(folds, again):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ConfigError):
        kfold_split(3, 5, seed=0)

def test_write_table_then_load():
    rng = np.random.default_rng(3)
    d = Dataset(rng.normal(size=10), rng.normal(size=(10, 2)), rng.normal(size=(10, 3)))
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'out', 'table.tsv')
        manifest = write_table(d, path, delimiter='\t')
        manifest_path = os.path.join(tmpdir, 'manifest.yaml')
        manifest.save(manifest_path)
        loaded = load_table(path, ColumnManifest.from_yaml(manifest_path))
    assert loaded.names_x == d.names_x
    assert loaded.names_z == d.names_z
    np.testing.assert_allclose(loaded.z, d.z)

def test_drop_constant_columns_keeps_raw_values():
    z = np.column_stack([np.arange(5.0), np.full(5, 2.0), np.arange(5.0) * 3])
    x = np.column_stack([np.ones(5), np.arange(5.0)])
    d = Dataset(np.arange(5.0), x, z)
    kept = drop_constant_columns(d)
    assert kept.names_z == ('z1', 'z3')
    assert kept.names_x == ('x2',)
    np.testing.assert_array_equal(kept.z[:, 1], z[:, 2])

def test_load_columns_reads_named_columns():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'new.csv')
        pd.DataFrame({'g2': [1.0, 2.0], 'g1': [3.0, None], 'age': [10.0, 20.0]}).to_csv(path, index=False)
        x, z = load_columns(path, ('age',), ('g1', 'g2'))
        np.testing.assert_allclose(z, [[3.0, 1.0], [3.0, 2.0]])
        np.testing.assert_allclose(x, [[10.0], [20.0]])
        with pytest.raises(ConfigError):
            load_columns(path, (), ('g1', 'g3'))

def test_load_columns_header_only():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'empty.csv')
        with open(path, 'w') as f:
            f.write('g1,g2\n')
        x, z = load_columns(path, (), ('g1', 'g2'))
    assert x.shape == (0, 0)
    assert z.shape == (0, 2)
