#!/usr/bin/env python3
"""
Tests for evaluation tables, report merging and plots
"""

import copy

import numpy as np
import pandas as pd
import pytest

from implicit_deform.evaluation import (EvalConfig, contact_summary, evaluate, format_cell, histogram_table,
                                        mean_std, merge_reports, plot_slice, split_table, variant_label,
                                        variant_table, write_report)
from implicit_deform.geometry import PointCloud
from implicit_deform.utils.artifacts import atomic_write_csv, atomic_write_json, read_csv
from implicit_deform.utils.error_handler import ConfigurationError, DataError


def metrics_frame(split='test', object_id='paddle-00', cd_est=(1.0, 3.0), offset=0.0):
    steps = len(cd_est)
    frame = pd.DataFrame({
        'split': split, 'object_id': object_id, 'step': range(steps),
        'cd_est': np.asarray(cd_est) + offset, 'cd_pred': [np.nan] + [2.0 + offset] * (steps - 1),
        'wrench_err': 0.5, 'contact_truth': True, 'contact_est_err': 0.01, 'contact_pred_err': 0.02,
    })
    for axis in ('fx', 'fy', 'fz', 'tx', 'ty', 'tz'):
        frame[f"wrench_err_{axis}"] = 0.1 + offset
    return frame


def fake_eval_dir(root, config, offset=0.0):
    """Directory laid out like an evaluate() run"""
    label = config['train']['ablation']
    atomic_write_json(root / 'run_config.json', config)
    atomic_write_csv(root / 'metrics.csv', metrics_frame(offset=offset))
    atomic_write_csv(root / 'variant_table.csv', pd.DataFrame({'group': ['seen'], 'metric': ['Geo. S.E.'],
                                                        label: [f"{2.0 + offset:.3f} (1.000)"]}))
    return root


@pytest.mark.unit
class TestStatistics:
    """Mean (std) cells"""

    def test_single_value_has_zero_std(self):
        assert mean_std([2.5]) == {'mean': 2.5, 'std': 0.0, 'count': 1}

    def test_population_std(self):
        stats = mean_std([1.0, 3.0, np.nan])
        assert stats['std'] == pytest.approx(1.0)
        assert stats['count'] == 2

    def test_format(self):
        assert format_cell({'mean': 1.23456, 'std': 0.1, 'count': 2}) == '1.235 (0.100)'
        assert format_cell(mean_std([])) == '-'

    def test_variant_labels(self, run_config):
        assert variant_label(run_config) == 'none'
        assert variant_label(run_config, 'beta') == 'beta=0.25'
        assert variant_label(run_config, 'particles') == 'n=4'

    def test_eval_config_rejects_unknown_split(self):
        with pytest.raises(ConfigurationError):
            EvalConfig(splits=['validation'])


@pytest.mark.unit
class TestTables:
    """Summary tables from per-step metrics"""

    def test_split_table_rows(self):
        metrics = pd.concat([metrics_frame('test'), metrics_frame('unseen', 'paddle-u00', (4.0, 4.0))],
                            ignore_index=True)
        table = split_table(metrics)
        assert list(table['split']) == ['Test', 'Unseen']
        assert table.loc[0, 'CD Est.'] == '2.000 (1.000)'
        assert table.loc[1, 'CD Est.'] == '4.000 (0.000)'
        assert table.loc[0, 'cd_pred_mean'] == pytest.approx(2.0)

    def test_variant_table_groups(self):
        metrics = pd.concat([metrics_frame('test'), metrics_frame('unseen', 'paddle-u00')], ignore_index=True)
        nominal = pd.DataFrame({'object_id': ['paddle-00', 'paddle-u00'], 'split': ['train', 'unseen'],
                                'nominal_cd': [0.5, 0.7]})
        table = variant_table(metrics, nominal, 'none')
        assert list(table['group'].unique()) == ['seen', 'paddle-u00']
        nominal_rows = table[table['metric'] == 'Geo. Nom.']
        assert list(nominal_rows['none_mean']) == pytest.approx([0.5, 0.7])

    def test_contact_summary_skips_first_prediction(self):
        metrics = metrics_frame(cd_est=(1.0, 1.0, 1.0))
        metrics.loc[2, 'contact_est_err'] = np.nan
        summary = contact_summary(metrics).set_index('metric')
        assert summary.loc['Contact Est.', 'count'] == 2
        assert summary.loc['Contact Est.', 'failures'] == 1
        assert summary.loc['Contact Pred.', 'count'] == 2
        assert summary.loc['Contact Pred.', 'mean'] == pytest.approx(0.02)

    def test_histograms_share_edges(self):
        frames = {'a': metrics_frame(cd_est=(0.0, 1.0)), 'b': metrics_frame(cd_est=(2.0, 3.0))}
        table = histogram_table(frames, bins=4)
        cd = table[table['metric'] == 'cd_est']
        edges_a = cd[cd['variant'] == 'a'][['bin_lo', 'bin_hi']].to_numpy()
        edges_b = cd[cd['variant'] == 'b'][['bin_lo', 'bin_hi']].to_numpy()
        np.testing.assert_array_equal(edges_a, edges_b)
        assert cd.groupby('variant')['count'].sum().to_dict() == {'a': 2, 'b': 2}
        assert cd['bin_lo'].min() == 0.0 and cd['bin_hi'].max() == 3.0

    def test_plot_slice_writes_svg(self, tmp_path, sphere_points):
        truth = PointCloud(sphere_points(500))
        recon = PointCloud(sphere_points(500, seed=1))
        path = plot_slice(recon, truth, tmp_path / 'plots' / 'slice.svg', title='slice')
        assert '<svg' in path.read_text()


@pytest.mark.unit
class TestMergeReports:
    """Merging evaluation directories"""

    def test_empty_input(self):
        with pytest.raises(DataError):
            merge_reports([])

    def test_side_by_side_ablations(self, run_config, tmp_path):
        rigid = copy.deepcopy(run_config)
        rigid['train']['ablation'] = 'rigid'
        dirs = [fake_eval_dir(tmp_path / 'none', run_config), fake_eval_dir(tmp_path / 'rigid', rigid, offset=1.0)]
        result = merge_reports(dirs)
        summary = result['summary'].set_index('metric')
        assert summary.loc['CD Est.', 'none'] == '2.000 (1.000)'
        assert summary.loc['CD Est.', 'rigid'] == '3.000 (1.000)'
        assert list(result['variant_table'].columns) == ['group', 'metric', 'none', 'rigid']
        assert set(result['histograms']['variant']) == {'none', 'rigid'}

        write_report(result, tmp_path / 'report', run_config)
        assert (read_csv(tmp_path / 'report' / 'summary.csv')['seed'] == 3).all()

    def test_beta_sweep(self, run_config, tmp_path):
        low, high = copy.deepcopy(run_config), copy.deepcopy(run_config)
        low['filter']['beta'], high['filter']['beta'] = 0.0, 0.5
        result = merge_reports([fake_eval_dir(tmp_path / 'high', high), fake_eval_dir(tmp_path / 'low', low)],
                               by='beta')
        assert list(result['beta_sweep'].columns) == ['metric', 'beta=0.0', 'beta=0.5']

    def test_different_experiments_refused(self, run_config, tmp_path):
        other = copy.deepcopy(run_config)
        other['train']['ablation'] = 'rigid'
        other['train']['lr'] = 0.01
        with pytest.raises(ConfigurationError, match='different experiments'):
            merge_reports([fake_eval_dir(tmp_path / 'a', run_config), fake_eval_dir(tmp_path / 'b', other)])

    def test_duplicate_variant_refused(self, run_config, tmp_path):
        with pytest.raises(ConfigurationError, match='share the variant'):
            merge_reports([fake_eval_dir(tmp_path / 'a', run_config), fake_eval_dir(tmp_path / 'b', run_config)])


@pytest.mark.integration
@pytest.mark.slow
class TestEvaluate:
    """End-to-end evaluation on a tiny dataset"""

    def test_tables_written(self, tiny_dataset, tiny_model, run_config, tmp_path):
        tables = evaluate(tiny_dataset, tiny_model, run_config, tmp_path, plot=True)
        for name in ('metrics', 'split_table', 'variant_table', 'contact', 'nominal_cd'):
            assert (tmp_path / f"{name}.csv").exists()
        assert list(tables['split_table']['split']) == ['Test', 'Unseen']
        assert set(tables['nominal_cd']['object_id']) == {'paddle-00', 'paddle-u00'}
        assert (tables['metrics']['ablation'] == 'none').all()
        assert len(list((tmp_path / 'traces').glob('*.metrics.csv'))) == 2
        assert len(list((tmp_path / 'plots').glob('*.svg'))) == 2
        assert (tmp_path / 'run_config.json').exists()

    def test_relative_contact_error_divides_by_object_length(self, tiny_dataset, tiny_model, run_config, tmp_path):
        """contact_est_rel is contact_est_err over the normalized object length, nothing more"""
        metrics = evaluate(tiny_dataset, tiny_model, run_config, tmp_path)['metrics']
        for object_id, rows in metrics.groupby('object_id'):
            length = tiny_dataset.objects[object_id].length
            np.testing.assert_allclose(rows['contact_est_rel'], rows['contact_est_err'] / length, equal_nan=True)
            np.testing.assert_allclose(rows['contact_pred_rel'], rows['contact_pred_err'] / length, equal_nan=True)

    def test_nothing_to_evaluate(self, tiny_dataset, tiny_model, run_config, tmp_path):
        config = copy.deepcopy(run_config)
        config['eval']['splits'] = ['train']
        config['eval']['max_trajectories'] = 0
        empty = type(tiny_dataset)(tiny_dataset.objects, tiny_dataset.trajectories_in('test'),
                                   tiny_dataset.config, tiny_dataset.seed)
        with pytest.raises(DataError):
            evaluate(empty, tiny_model, config, tmp_path)
