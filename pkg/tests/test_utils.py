#!/usr/bin/env python3
"""
Tests for configuration loading, artifacts, error reports and the performance monitor
"""

import copy
import json
import logging

import pandas as pd
import pytest

from implicit_deform.utils.artifacts import (atomic_directory, atomic_write_csv, atomic_write_json, config_hash,
                                             experiment_hash, read_csv, read_json)
from implicit_deform.utils.config_loader import deep_merge, load_config, parse_override, validate_config
from implicit_deform.utils.error_handler import (EXIT_CONFIG, ArtifactIOError, ConfigurationError, FormatError,
                                                 create_error_report, resolve_log_level, setup_logging)
from implicit_deform.utils.performance_monitor import PerformanceMonitor


@pytest.mark.unit
class TestConfigLoading:
    """Defaults, overrides and schema validation"""

    def test_defaults_validate(self):
        config = load_config()
        assert config['train']['ablation'] == 'none'
        assert config['filter']['particles'] == 40

    def test_deep_merge_keeps_siblings(self):
        base = {'train': {'lr': 1.0, 'epochs': 2}, 'seed': 0}
        merged = deep_merge(base, {'train': {'lr': 0.5}})
        assert merged == {'train': {'lr': 0.5, 'epochs': 2}, 'seed': 0}
        assert base['train']['lr'] == 1.0

    def test_parse_override(self):
        assert parse_override('train.lr=0.001') == {'train': {'lr': 0.001}}
        assert parse_override('model.object_hidden=[8, 8]') == {'model': {'object_hidden': [8, 8]}}
        assert parse_override('generator.object_type=chain') == {'generator': {'object_type': 'chain'}}

    def test_override_without_value_rejected(self):
        with pytest.raises(ConfigurationError):
            parse_override('train.lr')

    def test_flags_win_over_overrides(self):
        config = load_config(overrides=['filter.beta=0.9', 'train.epochs=3'], seed=7, beta=0.1, ablation='no-ct')
        assert config['seed'] == 7
        assert config['filter']['beta'] == 0.1
        assert config['train']['epochs'] == 3
        assert config['train']['ablation'] == 'no-ct'

    def test_user_file_overlay(self, tmp_path):
        path = tmp_path / 'run.json'
        path.write_text(json.dumps({'contact': {'eps': 0.02}}))
        assert load_config(path)['contact'] == {'grid_res': 128, 'eps': 0.02}

    def test_schema_violation(self):
        with pytest.raises(ConfigurationError, match='schema validation'):
            load_config(overrides=['filter.beta=1.5'])

    def test_unknown_key_rejected(self):
        config = load_config()
        config['model']['depth'] = 3
        with pytest.raises(ConfigurationError, match='model'):
            validate_config(config)

    def test_missing_user_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match='not found'):
            load_config(tmp_path / 'absent.json')


@pytest.mark.unit
class TestHashes:
    """Config fingerprints"""

    def test_key_order_does_not_matter(self):
        assert config_hash({'a': 1, 'b': {'c': 2}}) == config_hash({'b': {'c': 2}, 'a': 1})

    def test_experiment_hash_ignores_variant_fields(self, run_config):
        other = copy.deepcopy(run_config)
        other['train']['ablation'] = 'rigid'
        other['filter']['beta'] = 0.0
        other['filter']['particles'] = 8
        assert experiment_hash(other) == experiment_hash(run_config)
        assert config_hash(other) != config_hash(run_config)

    def test_experiment_hash_sees_other_fields(self, run_config):
        other = copy.deepcopy(run_config)
        other['filter']['gamma'] = 1.0
        assert experiment_hash(other) != experiment_hash(run_config)


@pytest.mark.unit
class TestArtifacts:
    """Atomic writers and readers"""

    def test_csv_rows_carry_hash_and_seed(self, tmp_path):
        path = atomic_write_csv(tmp_path / 'sub' / 'm.csv', pd.DataFrame({'x': [1, 2]}), 'deadbeef', 5)
        frame = read_csv(path)
        assert list(frame.columns) == ['x', 'config_hash', 'seed']
        assert (frame['seed'] == 5).all()
        assert not list((tmp_path / 'sub').glob('.*.tmp'))

    def test_missing_csv(self, tmp_path):
        with pytest.raises(ArtifactIOError):
            read_csv(tmp_path / 'absent.csv')

    def test_json_round_trip(self, tmp_path):
        path = atomic_write_json(tmp_path / 'c.json', {'b': 1, 'a': [1, 2]})
        assert read_json(path) == {'a': [1, 2], 'b': 1}

    def test_missing_json(self, tmp_path):
        with pytest.raises(ArtifactIOError):
            read_json(tmp_path / 'absent.json')

    def test_directory_appears_only_on_success(self, tmp_path):
        target = tmp_path / 'out'
        with pytest.raises(RuntimeError):
            with atomic_directory(target) as staging:
                (staging / 'partial.txt').write_text('x')
                raise RuntimeError('boom')
        assert not target.exists()
        assert list(tmp_path.iterdir()) == []

        with atomic_directory(target) as staging:
            (staging / 'done.txt').write_text('ok')
        assert (target / 'done.txt').read_text() == 'ok'


@pytest.mark.unit
class TestErrorsAndLogging:
    """Exit codes, error reports, logging setup"""

    def test_error_report(self):
        report = create_error_report(FormatError('bad magic', location='x.bin:0'))
        assert report['type'] == 'FormatError'
        assert report['location'] == 'x.bin:0'
        assert report['exit_code'] == 3
        assert create_error_report(ConfigurationError('x'))['exit_code'] == EXIT_CONFIG

    def test_plain_exception_report(self):
        assert create_error_report(ValueError('x'))['exit_code'] == 1

    def test_log_level_resolution(self, monkeypatch):
        monkeypatch.setenv('IMPLICIT_DEFORM_LOG_LEVEL', 'debug')
        assert resolve_log_level() == 'DEBUG'
        assert resolve_log_level('warning') == 'WARNING'
        assert resolve_log_level('chatty') == 'INFO'

    def test_setup_logging_writes_files(self, tmp_path):
        logger = setup_logging(tmp_path / 'logs', 'INFO')
        logging.getLogger('implicit_deform.test').error('disk full')
        for handler in logger.handlers:
            handler.flush()
        logs = sorted(p.name for p in (tmp_path / 'logs').iterdir())
        assert any(name.startswith('errors_') for name in logs)
        assert 'disk full' in next((tmp_path / 'logs').glob('run_*.log')).read_text()


@pytest.mark.unit
class TestPerformanceMonitor:
    """Stage timing"""

    def test_tracks_operations(self):
        monitor = PerformanceMonitor(show_progress=False)
        with monitor.track_operation('stage', total_items=3) as update:
            for _ in range(3):
                update(1, loss='0.1')
        frame = monitor.summary_frame()
        assert list(frame['operation']) == ['stage']
        assert frame.loc[0, 'items_processed'] == 3
        assert 'stage' in monitor.create_performance_summary()

    def test_records_failed_stage(self):
        monitor = PerformanceMonitor(show_progress=False)
        with pytest.raises(ValueError):
            with monitor.track_operation('broken'):
                raise ValueError('x')
        assert 'broken' in monitor.metrics

    def test_empty_summary(self):
        frame = PerformanceMonitor(show_progress=False).summary_frame()
        assert list(frame.columns) == ['operation', 'duration_seconds', 'memory_delta_mb']
