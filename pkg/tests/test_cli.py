#!/usr/bin/env python3
"""
Tests for the command-line interface and the timed workflow runner
"""

import json

import pytest

from conftest import tiny_overrides
from implicit_deform import cli
from implicit_deform.orchestration import run_complete_workflow
from implicit_deform.synthgen import write_dataset
from implicit_deform.utils.artifacts import read_csv
from implicit_deform.utils.error_handler import EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_NUMERIC, EXIT_OK, NumericError


def tiny_flags():
    flags = []
    for assignment in tiny_overrides():
        flags += ['--set', assignment]
    return flags


def run(argv, capsys):
    """Run the CLI at tiny scale; overrides in argv win over the tiny ones"""
    code = cli.main(argv[:1] + tiny_flags() + argv[1:] + ['--no-progress', '--log-level', 'WARNING'])
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if code == EXIT_OK and out else None)


@pytest.fixture
def checkpoint(tiny_model, tmp_path):
    return tiny_model.save(tmp_path / 'model.ckpt')


@pytest.mark.unit
class TestArguments:
    """Argument and configuration errors"""

    def test_seed_required_for_randomized_commands(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            cli.main(['gen-data', '--out', str(tmp_path)])
        assert info.value.code == 2

    def test_out_required(self):
        with pytest.raises(SystemExit) as info:
            cli.main(['report', '--inputs', 'a'])
        assert info.value.code == 2

    def test_unknown_ablation_rejected_by_parser(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(['gen-data', '--seed', '0', '--out', str(tmp_path), '--ablation', 'frozen'])

    def test_schema_violation_exit_code(self, tmp_path, capsys):
        code, _ = run(['gen-data', '--seed', '0', '--out', str(tmp_path / 'd'), '--set', 'train.lr="fast"'], capsys)
        assert code == EXIT_CONFIG

    def test_malformed_override_exit_code(self, tmp_path, capsys):
        code, _ = run(['gen-data', '--seed', '0', '--out', str(tmp_path / 'd'), '--set', 'train.lr'], capsys)
        assert code == EXIT_CONFIG

    def test_missing_data_dir_is_io_error(self, tmp_path, checkpoint, capsys):
        code, _ = run(['pretrain', '--seed', '0', '--data', str(tmp_path / 'absent'), '--out', str(tmp_path / 'o')],
                      capsys)
        assert code == EXIT_IO

    def test_unknown_trajectory(self, dataset_dir, checkpoint, tmp_path, capsys):
        code, _ = run(['filter', '--seed', '0', '--data', str(dataset_dir), '--checkpoint', str(checkpoint),
                       '--trajectory', 'paddle-07-test-00', '--out', str(tmp_path / 'f')], capsys)
        assert code == EXIT_CONFIG

    def test_corrupted_dataset_is_data_error(self, tiny_dataset, tmp_path, capsys):
        path = write_dataset(tiny_dataset, tmp_path / 'data')
        blob = next((path / 'objects').glob('*.bin'))
        blob.write_bytes(blob.read_bytes()[:-8])
        code, _ = run(['pretrain', '--seed', '0', '--data', str(path), '--out', str(tmp_path / 'o')], capsys)
        assert code == EXIT_DATA

    def test_eval_refuses_mismatched_ablation(self, dataset_dir, checkpoint, tmp_path, capsys):
        code, _ = run(['eval', '--seed', '0', '--data', str(dataset_dir), '--checkpoint', str(checkpoint),
                       '--ablation', 'rigid', '--out', str(tmp_path / 'e')], capsys)
        assert code == EXIT_CONFIG

    def test_missing_trace_is_io_error(self, dataset_dir, checkpoint, tmp_path, capsys):
        code, _ = run(['detect-contact', '--data', str(dataset_dir), '--checkpoint', str(checkpoint),
                       '--trajectory', 'paddle-00-test-01', '--trace', str(tmp_path / 'none'),
                       '--out', str(tmp_path / 'c')], capsys)
        assert code == EXIT_IO

    def test_failed_filter_leaves_no_output(self, dataset_dir, checkpoint, tmp_path, capsys, mocker):
        """A trajectory that fails mid-run leaves neither the output directory nor its staging copy"""
        mocker.patch('implicit_deform.cli.run_filter', side_effect=NumericError("Refinement diverged"))
        code, _ = run(['filter', '--seed', '0', '--data', str(dataset_dir), '--checkpoint', str(checkpoint),
                       '--split', 'test', '--out', str(tmp_path / 'f')], capsys)
        assert code == EXIT_NUMERIC
        assert not (tmp_path / 'f').exists()
        assert not list(tmp_path.glob('.f.*'))

    def test_stage_timings_written(self, tmp_path, capsys):
        code, _ = run(['gen-data', '--seed', '3', '--out', str(tmp_path / 'data')], capsys)
        assert code == EXIT_OK
        timings = read_csv(tmp_path / 'data' / 'performance.csv')
        assert 'gen-data' in set(timings['operation'])
        assert (timings['duration_seconds'] >= 0).all()
        assert (timings['seed'] == 3).all()
        assert timings['config_hash'].nunique() == 1


@pytest.mark.integration
@pytest.mark.slow
class TestPipeline:
    """Every subcommand in order on a tiny configuration"""

    def test_commands_chain(self, tmp_path, capsys):
        data, nominal, dynamics = tmp_path / 'data', tmp_path / 'nominal', tmp_path / 'dynamics'

        code, summary = run(['gen-data', '--seed', '3', '--out', str(data)], capsys)
        assert code == EXIT_OK
        assert summary['objects'] == ['paddle-00', 'paddle-u00']
        assert json.loads((data / 'run_config.json').read_text())['seed'] == 3

        code, summary = run(['pretrain', '--seed', '3', '--data', str(data), '--out', str(nominal)], capsys)
        assert code == EXIT_OK
        assert set(summary['nominal_cd']) == {'paddle-00'}

        code, summary = run(['train', '--seed', '3', '--data', str(data), '--checkpoint',
                             str(nominal / 'nominal.ckpt'), '--out', str(dynamics)], capsys)
        assert code == EXIT_OK
        checkpoint = dynamics / 'dynamics-none.ckpt'
        assert summary['checkpoint'] == str(checkpoint)

        code, summary = run(['infer-code', '--seed', '3', '--data', str(data), '--checkpoint', str(checkpoint),
                             '--out', str(tmp_path / 'codes')], capsys)
        assert code == EXIT_OK
        codes = tmp_path / 'codes' / 'codes.json'
        assert list(json.loads(codes.read_text())) == ['paddle-u00']

        code, summary = run(['filter', '--seed', '3', '--data', str(data), '--checkpoint', str(checkpoint),
                             '--split', 'unseen', '--codes', str(codes), '--out', str(tmp_path / 'filter')], capsys)
        assert code == EXIT_OK
        assert summary['steps'] == 4
        metrics = read_csv(tmp_path / 'filter' / 'filter_metrics.csv')
        assert (metrics['seed'] == 3).all()

        code, summary = run(['detect-contact', '--data', str(data), '--checkpoint', str(checkpoint),
                             '--trajectory', 'paddle-u00-unseen-00', '--trace', str(tmp_path / 'filter'),
                             '--codes', str(codes), '--out', str(tmp_path / 'contact')], capsys)
        assert code == EXIT_OK
        assert summary['steps'] == 4

        evals = []
        for beta in ('0.0', '0.5'):
            target = tmp_path / f"eval-{beta}"
            code, summary = run(['eval', '--seed', '3', '--data', str(data), '--checkpoint', str(checkpoint),
                                 '--beta', beta, '--out', str(target)], capsys)
            assert code == EXIT_OK
            assert set(summary['split_table']) == {'Test', 'Unseen'}
            evals.append(str(target))

        code, summary = run(['report', '--inputs', *evals, '--by', 'beta', '--out', str(tmp_path / 'report')],
                            capsys)
        assert code == EXIT_OK
        assert summary['variants'] == ['beta=0.0', 'beta=0.5']
        assert (tmp_path / 'report' / 'beta_sweep.csv').exists()

    def test_timed_workflow(self, tmp_path, capsys):
        argv = ['--seed', '1', '--out', str(tmp_path / 'wf')]
        for assignment in tiny_overrides():
            argv += ['--set', assignment]
        assert run_complete_workflow.main(argv) == EXIT_OK
        assert 'WORKFLOW COMPLETE' in capsys.readouterr().out
        assert (tmp_path / 'wf' / 'report' / 'summary.csv').exists()
