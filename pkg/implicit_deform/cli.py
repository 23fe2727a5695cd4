#!/usr/bin/env python3
"""
Command-line entry points.

    python -m implicit_deform.cli gen-data --seed 0 --out runs/data
    python -m implicit_deform.cli pretrain --seed 0 --data runs/data --out runs/nominal
    python -m implicit_deform.cli train --seed 0 --data runs/data --checkpoint runs/nominal/nominal.ckpt --out runs/dyn
    python -m implicit_deform.cli eval --seed 0 --data runs/data --checkpoint runs/dyn/dynamics-none.ckpt --out runs/eval
    python -m implicit_deform.cli report --inputs runs/eval runs/eval-noct --out runs/report

Every subcommand prints a JSON summary of what it wrote and exits with 0 on
success or with the exit code of the failure class.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from .contact import ContactConfig, ContactLine, contact_error, detect_contact_line
from .evaluation import evaluate, merge_reports, plot_slice, write_report
from .inference import FilterConfig, run_filter, write_trace
from .losses import LossWeights
from .model import ABLATIONS, ModelConfig, force_encode
from .synthgen import GeneratorConfig, generate_dataset, read_dataset, write_dataset
from .synthgen.dataset import decode_blob
from .trainer import TrainConfig, infer_object_code, load_checkpoint, pretrain_nominal, train_dynamics
from .utils.artifacts import atomic_directory, atomic_write_csv, atomic_write_json, config_hash, read_json
from .utils.config_loader import load_config
from .utils.error_handler import (ArtifactIOError, ConfigurationError, DataError, EXIT_OK, ImplicitDeformError,
                                  create_error_report, setup_logging)
from .utils.performance_monitor import PerformanceMonitor

logger = logging.getLogger(__name__)

SEEDED_COMMANDS = ('gen-data', 'pretrain', 'train', 'infer-code', 'filter', 'eval')


def _train_config(config: Dict[str, Any]) -> TrainConfig:
    return TrainConfig.from_dict({**config['train'], 'seed': int(config['seed'])})


def _filter_config(config: Dict[str, Any]) -> FilterConfig:
    return FilterConfig.from_dict({**config['filter'], 'seed': int(config['seed'])})


def _load_codes(path: Optional[str]) -> Dict[str, np.ndarray]:
    if path is None:
        return {}
    return {k: np.asarray(v, dtype=np.float64) for k, v in read_json(path).items()}


def _echo(out: Path, config: Dict[str, Any]):
    atomic_write_json(out / 'run_config.json', config)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, config, monitor) -> Dict[str, Any]:
    generator = GeneratorConfig.from_dict(config['generator'])
    dataset = generate_dataset(generator, int(config['seed']), monitor)
    out = write_dataset(dataset, args.out)
    _echo(out, config)
    return {'dataset': str(out), 'objects': sorted(dataset.objects), 'trajectories': len(dataset.trajectories)}


def cmd_pretrain(args, config, monitor) -> Dict[str, Any]:
    dataset = read_dataset(args.data)
    result = pretrain_nominal(dataset, _train_config(config), ModelConfig.from_dict(config['model']), args.out,
                              args.resume, monitor, run_config=config)
    _echo(Path(args.out), config)
    return {'checkpoint': str(Path(args.out) / 'nominal.ckpt'),
            'nominal_cd': result.object_cd.set_index('object_id')['nominal_cd'].to_dict()}


def cmd_train(args, config, monitor) -> Dict[str, Any]:
    dataset = read_dataset(args.data)
    pretrained = load_checkpoint(args.checkpoint)
    if pretrained.phase != 'nominal':
        raise ConfigurationError(f"{args.checkpoint} is a '{pretrained.phase}' checkpoint; train needs a nominal one")
    train_config = _train_config(config)
    result = train_dynamics(dataset, pretrained.model, train_config, args.out, args.resume, monitor, config)
    _echo(Path(args.out), config)
    final = float(result.history['total'].iloc[-1]) if len(result.history) else float('nan')
    return {'checkpoint': str(Path(args.out) / f"dynamics-{train_config.ablation}.ckpt"), 'final_loss': final}


def cmd_infer_code(args, config, monitor) -> Dict[str, Any]:
    dataset = read_dataset(args.data)
    model = load_checkpoint(args.checkpoint).model
    if args.object and args.object not in dataset.objects:
        raise ConfigurationError(f"Unknown object '{args.object}'")
    records = [dataset.objects[args.object]] if args.object else dataset.objects_in('unseen')
    if not records:
        raise DataError("No object to infer a code for")
    train_config = _train_config(config)
    codes, rows = {}, []
    with monitor.track_operation('infer_object_code', total_items=len(records)) as update:
        for record in records:
            inferred = infer_object_code(model, record.samples, train_config, record.nominal_cloud)
            codes[record.object_id] = [float(x) for x in inferred.code]
            rows.append({'object_id': record.object_id, 'nominal_cd': inferred.cd})
            update(1)
    out = Path(args.out)
    atomic_write_json(out / 'codes.json', codes)
    atomic_write_csv(out / 'inferred_codes.csv', pd.DataFrame(rows), config_hash(config), int(config['seed']))
    _echo(out, config)
    return {'codes': str(out / 'codes.json'), 'nominal_cd': {r['object_id']: r['nominal_cd'] for r in rows}}


def _selected_trajectories(dataset, args) -> List[Any]:
    if args.trajectory:
        return [dataset.trajectory(args.trajectory)]
    return sorted(dataset.trajectories_in(args.split), key=lambda t: t.trajectory_id)


def cmd_filter(args, config, monitor) -> Dict[str, Any]:
    """Filter the selected trajectories; the output directory appears only when every one succeeded"""
    dataset = read_dataset(args.data)
    model = load_checkpoint(args.checkpoint).model
    codes = _load_codes(args.codes)
    filter_config = _filter_config(config)
    contact = ContactConfig.from_dict(config['contact'])
    weights = LossWeights.from_dict(config['train'].get('weights', {}))
    trajectories = _selected_trajectories(dataset, args)
    if not trajectories:
        raise DataError("No trajectory selected for filtering")
    digest, seed = config_hash(config), int(config['seed'])
    frames = []
    with atomic_directory(args.out) as staging:
        for trajectory in trajectories:
            record = dataset.objects[trajectory.object_id]
            trace = run_filter(model, trajectory, filter_config, record.nominal_cloud,
                               codes.get(trajectory.object_id), contact, weights, monitor)
            write_trace(trace, staging, digest, seed)
            frames.append(trace.to_frame())
            if args.plot:
                for record_step in trace.records:
                    if record_step.reconstruction is not None:
                        plot_slice(record_step.reconstruction, trajectory.transitions[record_step.step].full_cloud,
                                   staging / 'plots' / f"{trajectory.trajectory_id}-{record_step.step:03d}.svg",
                                   title=f"{trajectory.trajectory_id} step {record_step.step}")
        metrics = pd.concat(frames, ignore_index=True)
        atomic_write_csv(staging / 'filter_metrics.csv', metrics, digest, seed)
        _echo(staging, config)
    return {'steps': int(len(metrics)), 'cd_est_mean': float(metrics['cd_est'].mean()),
            'cd_pred_mean': float(metrics['cd_pred'].mean())}


def cmd_detect_contact(args, config, monitor) -> Dict[str, Any]:
    """Contact lines from the per-step estimates stored in a filter trace"""
    dataset = read_dataset(args.data)
    model = load_checkpoint(args.checkpoint).model
    trajectory = dataset.trajectory(args.trajectory)
    alpha = _load_codes(args.codes).get(trajectory.object_id)
    if alpha is None:
        alpha = model.code(trajectory.object_id)
    trace_path = Path(args.trace) / f"{trajectory.trajectory_id}.trace.bin"
    try:
        arrays = decode_blob(trace_path.read_bytes(), source=str(trace_path))
    except OSError as exc:
        raise ArtifactIOError(f"Cannot read filter trace {trace_path}: {exc}") from exc
    contact = ContactConfig.from_dict(config['contact'])
    rows = []
    for step, tr in enumerate(trajectory.transitions):
        key = f"step{step:04d}.estimate"
        if key not in arrays:
            break
        z = force_encode(model, tr.wrench, arrays[key], tr.pose)
        line = detect_contact_line(model, alpha, z, tr.plane, contact)
        truth = ContactLine(tr.contact_line, tr.contact_line) if tr.contact_line is not None else None
        error = contact_error(line, truth)
        row = {'step': step, 'detected': line is not None, 'truth': truth is not None,
               'error': np.nan if error is None else error}
        if line is not None:
            row.update({f"l{i}_{axis}": float(line.endpoints[i, j]) for i in range(2) for j, axis in enumerate('xyz')})
        rows.append(row)
    out = Path(args.out)
    frame = pd.DataFrame(rows)
    atomic_write_csv(out / f"{trajectory.trajectory_id}.contact.csv", frame, config_hash(config),
                     int(config['seed']))
    _echo(out, config)
    return {'steps': len(rows), 'detected': int(frame['detected'].sum()) if len(frame) else 0}


def cmd_eval(args, config, monitor) -> Dict[str, Any]:
    dataset = read_dataset(args.data)
    model = load_checkpoint(args.checkpoint).model
    if model.config.ablation != config['train']['ablation']:
        raise ConfigurationError(f"Checkpoint was trained with ablation '{model.config.ablation}' but the run "
                                 f"config says '{config['train']['ablation']}'; pass --ablation")
    tables = evaluate(dataset, model, config, args.out, monitor, plot=args.plot or None)
    by_split = tables['split_table'].set_index('split')
    return {'split_table': by_split[['CD Est.', 'CD Pred.']].to_dict(orient='index')}


def cmd_report(args, config, monitor) -> Dict[str, Any]:
    result = merge_reports(args.inputs, by=args.by, bins=int(config.get('eval', {}).get('histogram_bins', 20)))
    first = read_json(Path(args.inputs[0]) / 'run_config.json')
    write_report(result, args.out, first)
    _echo(Path(args.out), first)
    return {'tables': sorted(result), 'variants': [c for c in result['summary'].columns if c not in ('split', 'metric')]}


COMMANDS: Dict[str, Callable] = {
    'gen-data': cmd_gen_data,
    'pretrain': cmd_pretrain,
    'train': cmd_train,
    'infer-code': cmd_infer_code,
    'filter': cmd_filter,
    'detect-contact': cmd_detect_contact,
    'eval': cmd_eval,
    'report': cmd_report,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser, seeded: bool):
    parser.add_argument('--config', help='JSON file overlaid on the default config.json')
    parser.add_argument('--seed', type=int, required=seeded, help='Master seed (required for randomized commands)')
    parser.add_argument('--out', required=True, help='Output directory')
    parser.add_argument('--ablation', choices=ABLATIONS, help='Model variant')
    parser.add_argument('--beta', type=float, help='Exploration fraction of the particle filter')
    parser.add_argument('--particles', type=int, help='Number of particles')
    parser.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='Override any config field (repeatable)')
    parser.add_argument('--log-level', help='DEBUG, INFO, WARNING or ERROR')
    parser.add_argument('--log-dir', help='Also write run and error logs to this directory')
    parser.add_argument('--no-progress', action='store_true', help='Disable progress bars')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='implicit_deform',
                                     description='Implicit deformable-object representation: data, training, '
                                                 'state estimation and evaluation')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='Generate a synthetic dataset')
    _common(p, seeded=True)

    p = sub.add_parser('pretrain', help='Nominal shape pretraining')
    _common(p, seeded=True)
    p.add_argument('--data', required=True)
    p.add_argument('--resume', help='Nominal checkpoint to resume from')

    p = sub.add_parser('train', help='Dynamics training on top of a nominal checkpoint')
    _common(p, seeded=True)
    p.add_argument('--data', required=True)
    p.add_argument('--checkpoint', required=True, help='Nominal checkpoint')
    p.add_argument('--resume', help='Dynamics checkpoint to resume from')

    p = sub.add_parser('infer-code', help='Infer object codes for unseen objects')
    _common(p, seeded=True)
    p.add_argument('--data', required=True)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--object', help='Single object id (default: every unseen object)')

    p = sub.add_parser('filter', help='Run the particle filter over trajectories')
    _common(p, seeded=True)
    p.add_argument('--data', required=True)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--trajectory', help='Single trajectory id')
    p.add_argument('--split', default='test', choices=('train', 'test', 'unseen'))
    p.add_argument('--codes', help='codes.json written by infer-code')
    p.add_argument('--plot', action='store_true', help='Write SVG reconstruction slices')

    p = sub.add_parser('detect-contact', help='Contact lines from a filter trace')
    _common(p, seeded=False)
    p.add_argument('--data', required=True)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--trajectory', required=True)
    p.add_argument('--trace', required=True, help='Directory holding <trajectory>.trace.bin')
    p.add_argument('--codes', help='codes.json written by infer-code')

    p = sub.add_parser('eval', help='Filter held-out trajectories and write summary tables')
    _common(p, seeded=True)
    p.add_argument('--data', required=True)
    p.add_argument('--checkpoint', required=True, help='Dynamics checkpoint')
    p.add_argument('--plot', action='store_true')

    p = sub.add_parser('report', help='Merge evaluation directories side by side')
    _common(p, seeded=False)
    p.add_argument('--inputs', nargs='+', required=True, help='Evaluation directories')
    p.add_argument('--by', default='ablation', choices=('ablation', 'beta', 'particles'))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_dir, args.log_level)
    monitor = PerformanceMonitor(show_progress=not args.no_progress)
    try:
        config = load_config(args.config, args.set, args.seed, args.ablation, args.beta, args.particles)
        if args.seed is None and args.command in SEEDED_COMMANDS:
            raise ConfigurationError(f"'{args.command}' needs an explicit --seed")
        logger.info(f"Running {args.command} (config hash {config_hash(config)[:12]}, seed {config['seed']})")
        with monitor.track_operation(args.command):
            summary = COMMANDS[args.command](args, config, monitor)
        atomic_write_csv(Path(args.out) / 'performance.csv', monitor.summary_frame(), config_hash(config),
                         int(config['seed']))
        logger.info(monitor.create_performance_summary())
    except ImplicitDeformError as e:
        report = create_error_report(e)
        logger.error(f"{report['type']}: {report['message']}")
        logger.debug("Failure details", exc_info=True)
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 130
    print(json.dumps(summary, default=str))
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
