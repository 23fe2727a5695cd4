"""
Evaluation runs and metric reports.

`evaluate` filters the held-out trajectories and writes:
- metrics.csv         one row per filter step
- split_table.csv     CD(×10³) estimation / prediction per split, mean (std)
- variant_table.csv   nominal / estimated / predicted geometry and wrench error for one variant
- contact.csv         contact-line error of estimate and prediction, with failure counts
- nominal_cd.csv

`merge_reports` lines several evaluation directories up side by side
(ablations or exploration fractions) and builds histogram tables.
"""

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .contact import ContactConfig, summarize_contact_errors
from .geometry import PointCloud
from .inference import FilterConfig, run_filter, write_trace
from .losses import LossWeights
from .model import ImplicitDeformModel
from .trainer import TrainConfig, infer_object_code, nominal_cd_table
from .utils.artifacts import (atomic_write_bytes, atomic_write_csv, atomic_write_json, config_hash,
                              experiment_hash, read_csv, read_json)
from .utils.error_handler import ConfigurationError, DataError
from .utils.performance_monitor import PerformanceMonitor

logger = logging.getLogger(__name__)

SPLIT_LABELS = {'train': 'Train', 'test': 'Test', 'unseen': 'Unseen'}
TABLE4_ROWS = ('Geo. Nom.', 'Geo. S.E.', 'Geo. Pred.', 'Wr. Pred.')
HISTOGRAM_METRICS = ('cd_est', 'cd_pred', 'wrench_err_fx', 'wrench_err_fy', 'wrench_err_fz',
                     'wrench_err_tx', 'wrench_err_ty', 'wrench_err_tz')


@dataclass(frozen=True)
class EvalConfig:
    splits: tuple = ('test', 'unseen')
    max_trajectories: int = 0
    histogram_bins: int = 20
    plot: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'splits', tuple(self.splits))
        unknown = set(self.splits) - set(SPLIT_LABELS)
        if unknown:
            raise ConfigurationError(f"Unknown evaluation splits {sorted(unknown)}")
        if self.histogram_bins < 1:
            raise ConfigurationError(f"histogram_bins must be at least 1, got {self.histogram_bins}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvalConfig':
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


def mean_std(values: Sequence[float]) -> Dict[str, float]:
    series = pd.Series(values, dtype=np.float64).dropna()
    if series.empty:
        return {'mean': float('nan'), 'std': float('nan'), 'count': 0}
    return {'mean': float(series.mean()), 'std': float(series.std(ddof=0)), 'count': int(len(series))}


def format_cell(stats: Dict[str, float], digits: int = 3) -> str:
    if not stats['count']:
        return '-'
    return f"{stats['mean']:.{digits}f} ({stats['std']:.{digits}f})"


def variant_label(config: Dict[str, Any], by: str = 'ablation') -> str:
    if by == 'beta':
        return f"beta={config['filter']['beta']}"
    if by == 'particles':
        return f"n={config['filter']['particles']}"
    return config['train']['ablation']


# ---------------------------------------------------------------------------
# Summary tables
# ---------------------------------------------------------------------------

def split_table(metrics: pd.DataFrame) -> pd.DataFrame:
    """Split × (CD Est., CD Pred.)"""
    rows = []
    for split in SPLIT_LABELS:
        part = metrics[metrics['split'] == split]
        if part.empty:
            continue
        est, pred = mean_std(part['cd_est']), mean_std(part['cd_pred'])
        rows.append({'split': SPLIT_LABELS[split], 'CD Est.': format_cell(est), 'CD Pred.': format_cell(pred),
                     'cd_est_mean': est['mean'], 'cd_est_std': est['std'],
                     'cd_pred_mean': pred['mean'], 'cd_pred_std': pred['std'], 'steps': est['count']})
    return pd.DataFrame(rows, columns=['split', 'CD Est.', 'CD Pred.', 'cd_est_mean', 'cd_est_std',
                                       'cd_pred_mean', 'cd_pred_std', 'steps'])


def variant_table(metrics: pd.DataFrame, nominal_cd: pd.DataFrame, variant: str) -> pd.DataFrame:
    """Geometry / wrench rows for seen objects and each unseen object; one column per variant"""
    groups = [('seen', metrics[metrics['split'] != 'unseen'], nominal_cd[nominal_cd['split'] == 'train'])]
    for object_id in sorted(metrics.loc[metrics['split'] == 'unseen', 'object_id'].unique()):
        groups.append((object_id, metrics[(metrics['split'] == 'unseen') & (metrics['object_id'] == object_id)],
                       nominal_cd[nominal_cd['object_id'] == object_id]))
    rows = []
    for group, part, nominal in groups:
        values = {
            'Geo. Nom.': mean_std(nominal['nominal_cd']),
            'Geo. S.E.': mean_std(part['cd_est']),
            'Geo. Pred.': mean_std(part['cd_pred']),
            'Wr. Pred.': mean_std(part['wrench_err']),
        }
        for row in TABLE4_ROWS:
            rows.append({'group': group, 'metric': row, variant: format_cell(values[row]),
                         f"{variant}_mean": values[row]['mean'], f"{variant}_std": values[row]['std']})
    return pd.DataFrame(rows)


def contact_summary(metrics: pd.DataFrame) -> pd.DataFrame:
    """Endpoint error over steps with a ground-truth line; missing detections count as failures"""
    in_contact = metrics[metrics['contact_truth'].astype(bool)]
    rows = []
    for label, column in (('Contact Est.', 'contact_est_err'), ('Contact Pred.', 'contact_pred_err')):
        values = in_contact[column]
        if label == 'Contact Pred.':
            values = values[in_contact['step'] > 0]
        summary = summarize_contact_errors(None if pd.isna(v) else float(v) for v in values)
        rel_column = column.replace('_err', '_rel')
        relative = mean_std(in_contact.loc[values.index, rel_column]) if rel_column in in_contact.columns \
            else {'mean': float('nan')}
        rows.append({'metric': label, 'value': format_cell(summary) if summary['count'] else '-',
                     'mean': summary['mean'], 'std': summary['std'], 'count': summary['count'],
                     'failures': summary['failures'], 'relative_mean': relative['mean']})
    return pd.DataFrame(rows, columns=['metric', 'value', 'mean', 'std', 'count', 'failures', 'relative_mean'])


def histogram_table(frames: Dict[str, pd.DataFrame], bins: int = 20) -> pd.DataFrame:
    """Long-format histograms with bin edges shared across variants"""
    rows = []
    for metric in HISTOGRAM_METRICS:
        columns = [f[metric] for f in frames.values() if metric in f]
        pooled = pd.concat(columns, ignore_index=True).dropna() if columns else pd.Series(dtype=np.float64)
        if pooled.empty:
            continue
        edges = np.histogram_bin_edges(pooled.to_numpy(), bins=bins)
        for variant, frame in frames.items():
            if metric not in frame:
                continue
            counts, _ = np.histogram(frame[metric].dropna().to_numpy(), bins=edges)
            for lo, hi, count in zip(edges[:-1], edges[1:], counts):
                rows.append({'variant': variant, 'metric': metric, 'bin_lo': lo, 'bin_hi': hi, 'count': int(count)})
    return pd.DataFrame(rows, columns=['variant', 'metric', 'bin_lo', 'bin_hi', 'count'])


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def plot_slice(reconstruction: PointCloud, truth: PointCloud, path: Union[str, Path], axis: int = 1,
               half_width: float = 0.05, title: str = '') -> Path:
    """SVG of the points within a slab around the plane x[axis] = 0"""
    keep = [i for i in range(3) if i != axis]
    figure, ax = plt.subplots(figsize=(5, 5))
    for cloud, color, label in ((truth, '#999999', 'ground truth'), (reconstruction, '#d62728', 'reconstruction')):
        slab = cloud.points[np.abs(cloud.points[:, axis]) < half_width]
        ax.scatter(slab[:, keep[0]], slab[:, keep[1]], s=2, c=color, label=label)
    ax.set_xlim(-1, 1)
    ax.set_ylim(-1, 1)
    ax.set_aspect('equal')
    ax.legend(loc='upper right', fontsize=8)
    if title:
        ax.set_title(title, fontsize=9)
    buffer = io.BytesIO()
    figure.savefig(buffer, format='svg')
    plt.close(figure)
    return atomic_write_bytes(path, buffer.getvalue())


# ---------------------------------------------------------------------------
# Evaluation run
# ---------------------------------------------------------------------------

def _stamp(frame: pd.DataFrame, config: Dict[str, Any]) -> pd.DataFrame:
    frame = frame.copy()
    frame['ablation'] = config['train']['ablation']
    frame['beta'] = config['filter']['beta']
    frame['particles'] = config['filter']['particles']
    frame['experiment_hash'] = experiment_hash(config)
    return frame


def evaluate(dataset, model: ImplicitDeformModel, config: Dict[str, Any], out_dir: Union[str, Path],
             monitor: Optional[PerformanceMonitor] = None, plot: Optional[bool] = None) -> Dict[str, pd.DataFrame]:
    """Filter the held-out trajectories and write the summary tables"""
    out = Path(out_dir)
    monitor = monitor or PerformanceMonitor(show_progress=False)
    seed = int(config['seed'])
    digest = config_hash(config)
    train_config = TrainConfig.from_dict({**config['train'], 'seed': seed})
    filter_config = FilterConfig.from_dict({**config['filter'], 'seed': seed})
    contact_config = ContactConfig.from_dict(config['contact'])
    eval_config = EvalConfig.from_dict(config.get('eval', {}))
    plot = eval_config.plot if plot is None else plot
    weights = LossWeights.from_dict(config['train'].get('weights', {}))

    nominal_cd = nominal_cd_table(model, dataset.objects_in('train'), train_config)
    codes: Dict[str, np.ndarray] = {}
    if 'unseen' in eval_config.splits:
        rows = []
        for record in dataset.objects_in('unseen'):
            inferred = infer_object_code(model, record.samples, train_config, record.nominal_cloud)
            codes[record.object_id] = inferred.code
            rows.append({'object_id': record.object_id, 'split': 'unseen', 'nominal_cd': inferred.cd})
        nominal_cd = pd.concat([nominal_cd, pd.DataFrame(rows, columns=nominal_cd.columns)], ignore_index=True)

    frames: List[pd.DataFrame] = []
    for split in eval_config.splits:
        trajectories = sorted(dataset.trajectories_in(split), key=lambda t: t.trajectory_id)
        if eval_config.max_trajectories:
            trajectories = trajectories[:eval_config.max_trajectories]
        for trajectory in trajectories:
            record = dataset.objects[trajectory.object_id]
            trace = run_filter(model, trajectory, filter_config, record.nominal_cloud,
                               alpha=codes.get(trajectory.object_id), contact=contact_config, weights=weights,
                               monitor=monitor)
            write_trace(trace, out / 'traces', digest, seed)
            frame = trace.to_frame()
            if not frame.empty:
                # record.length is already in normalized units
                frame['contact_est_rel'] = frame['contact_est_err'] / record.length
                frame['contact_pred_rel'] = frame['contact_pred_err'] / record.length
                frames.append(frame)
            if plot and trace.records:
                last = trace.records[-1]
                if last.reconstruction is not None:
                    plot_slice(last.reconstruction, trajectory.transitions[-1].full_cloud,
                               out / 'plots' / f"{trajectory.trajectory_id}.svg",
                               title=f"{trajectory.trajectory_id} step {last.step}")
    if not frames:
        raise DataError(f"No trajectory steps to evaluate in splits {list(eval_config.splits)}")

    metrics = _stamp(pd.concat(frames, ignore_index=True), config)
    variant = variant_label(config)
    tables = {
        'metrics': metrics,
        'split_table': _stamp(split_table(metrics), config),
        'variant_table': _stamp(variant_table(metrics, nominal_cd, variant), config),
        'contact': _stamp(contact_summary(metrics), config),
        'nominal_cd': _stamp(nominal_cd, config),
    }
    for name, frame in tables.items():
        atomic_write_csv(out / f"{name}.csv", frame, digest, seed)
    atomic_write_json(out / 'run_config.json', config)
    summary = tables['split_table'].set_index('split')[['CD Est.', 'CD Pred.']]
    logger.info(f"Evaluation ({variant}) over {len(metrics)} steps:\n{summary.to_string()}")
    return tables


# ---------------------------------------------------------------------------
# Report: merge evaluation directories
# ---------------------------------------------------------------------------

def _load_eval(directory: Path) -> Dict[str, Any]:
    config = read_json(directory / 'run_config.json')
    return {'config': config, 'metrics': read_csv(directory / 'metrics.csv'),
            'variant_table': read_csv(directory / 'variant_table.csv')}


def merge_reports(directories: Sequence[Union[str, Path]], by: str = 'ablation',
                  bins: int = 20) -> Dict[str, pd.DataFrame]:
    """Side-by-side variant columns; runs of different experiments are never merged"""
    if not directories:
        raise DataError("report needs at least one evaluation directory")
    runs = [_load_eval(Path(d)) for d in directories]
    hashes = {experiment_hash(run['config']) for run in runs}
    if len(hashes) > 1:
        raise ConfigurationError(f"Refusing to merge evaluations of different experiments (hashes {sorted(hashes)})")
    if any(run['metrics'].empty for run in runs):
        raise DataError("An evaluation directory holds an empty metrics table")

    variants: Dict[str, pd.DataFrame] = {}
    for run in runs:
        label = variant_label(run['config'], by)
        if label in variants:
            raise ConfigurationError(f"Two evaluation directories share the variant '{label}'")
        variants[label] = run['metrics']

    rows = []
    for split in SPLIT_LABELS:
        for metric, column in (('CD Est.', 'cd_est'), ('CD Pred.', 'cd_pred'), ('Wr. Pred.', 'wrench_err'),
                               ('Contact Est.', 'contact_est_err')):
            row = {'split': SPLIT_LABELS[split], 'metric': metric}
            present = False
            for label, frame in variants.items():
                part = frame[frame['split'] == split]
                if part.empty:
                    row[label] = '-'
                    continue
                present = True
                row[label] = format_cell(mean_std(part[column]))
            if present:
                rows.append(row)
    side_by_side = pd.DataFrame(rows)

    merged = None
    for run in runs:
        label = variant_label(run['config'], by)
        source = run['variant_table']
        column = run['config']['train']['ablation']
        part = source[['group', 'metric', column]].rename(columns={column: label})
        merged = part if merged is None else merged.merge(part, on=['group', 'metric'])

    result = {'summary': side_by_side, 'variant_table': merged, 'histograms': histogram_table(variants, bins)}
    if by == 'beta':
        ordered = sorted(runs, key=lambda run: float(run['config']['filter']['beta']))
        sweep = []
        for metric, column in (('CD Est.', 'cd_est'), ('CD Pred.', 'cd_pred')):
            row = {'metric': metric}
            for run in ordered:
                row[f"beta={run['config']['filter']['beta']}"] = format_cell(mean_std(run['metrics'][column]))
            sweep.append(row)
        result['beta_sweep'] = pd.DataFrame(sweep)
    return result


def write_report(result: Dict[str, pd.DataFrame], out_dir: Union[str, Path], config: Dict[str, Any]) -> Path:
    out = Path(out_dir)
    digest = config_hash(config)
    for name, frame in result.items():
        atomic_write_csv(out / f"{name}.csv", frame, digest, int(config['seed']))
    logger.info(f"Report tables written to {out}: {sorted(result)}")
    return out
