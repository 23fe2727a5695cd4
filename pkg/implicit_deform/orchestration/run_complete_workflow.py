#!/usr/bin/env python3
"""
Complete Timed Workflow Runner
gen-data -> pretrain -> train -> eval -> report, with per-step wall-clock timing
"""

import argparse
import logging
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Tuple

from .. import cli
from ..utils.error_handler import EXIT_OK

logger = logging.getLogger(__name__)


def run_step(argv: List[str], description: str) -> Tuple[float, int]:
    """Run one CLI subcommand in-process and return (seconds, exit code)"""
    print(f"\n{'=' * 60}")
    print(f"Step: {description}")
    print(f"{'=' * 60}")
    print(f"Started at: {datetime.now().strftime('%H:%M:%S.%f')[:-3]}")
    print(f"Command: implicit_deform {' '.join(argv)}\n")
    start = time.time()
    code = cli.main(argv)
    duration = time.time() - start
    print(f"\nCompleted at: {datetime.now().strftime('%H:%M:%S.%f')[:-3]}")
    print(f"Duration: {duration:.2f} seconds")
    if code != EXIT_OK:
        print(f"ERROR: step exited with code {code}")
    return duration, code


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description='Run the full pipeline with timing')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--out', default='output/workflow')
    parser.add_argument('--config', help='JSON file overlaid on the default config.json')
    parser.add_argument('--ablations', nargs='+', default=['none'], choices=('none', 'no-ct', 'rigid'))
    parser.add_argument('--set', action='append', default=[])
    args = parser.parse_args(argv)

    out = Path(args.out)
    shared = ['--seed', str(args.seed)] + (['--config', args.config] if args.config else [])
    for assignment in args.set:
        shared += ['--set', assignment]
    data, nominal = out / 'data', out / 'nominal'

    print("\n" + "=" * 60)
    print("IMPLICIT DEFORMATION PIPELINE - TIMED EXECUTION")
    print("=" * 60)
    print(f"Start Time: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    total_start = time.time()

    steps = [
        (['gen-data', '--out', str(data)], "Generate synthetic dataset"),
        (['pretrain', '--data', str(data), '--out', str(nominal)], "Nominal pretraining"),
    ]
    evals = []
    for ablation in args.ablations:
        dynamics, evaluation = out / f"dynamics-{ablation}", out / f"eval-{ablation}"
        evals.append(str(evaluation))
        steps += [
            (['train', '--data', str(data), '--checkpoint', str(nominal / 'nominal.ckpt'),
              '--out', str(dynamics), '--ablation', ablation], f"Dynamics training ({ablation})"),
            (['eval', '--data', str(data), '--checkpoint', str(dynamics / f"dynamics-{ablation}.ckpt"),
              '--out', str(evaluation), '--ablation', ablation], f"Evaluation ({ablation})"),
        ]
    steps.append((['report', '--inputs', *evals, '--out', str(out / 'report')], "Merge report"))

    timings = []
    for command, description in steps:
        duration, code = run_step(command + shared, description)
        timings.append((description, duration))
        if code != EXIT_OK:
            print(f"❌ {description} failed!")
            return code

    total = time.time() - total_start
    print("\n" + "=" * 60)
    print("WORKFLOW COMPLETE - TIMING SUMMARY")
    print("=" * 60)
    for description, duration in timings:
        print(f"{description:<32} {duration:8.2f} seconds")
    print("-" * 44)
    print(f"{'TOTAL WORKFLOW TIME':<32} {total:8.2f} seconds")
    print("=" * 60)
    print(f"\n✅ Report tables in {out / 'report'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
