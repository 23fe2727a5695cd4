#!/usr/bin/env python3
"""
Local runner for the implicit deformation pipeline
Pick a preset and run it against the default config.json
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from implicit_deform.orchestration.run_complete_workflow import main as run_workflow  # noqa: E402

PRESETS = {
    '1': ("Smoke run (2 objects, short training)",
          ['--set', 'generator.n_train_objects=2', '--set', 'generator.n_unseen_objects=1',
           '--set', 'generator.trajectories_per_object=3', '--set', 'generator.steps=4',
           '--set', 'train.epochs=5', '--set', 'train.dynamics_epochs=3',
           '--set', 'filter.particles=8', '--set', 'filter.refine_epochs=2',
           '--set', 'filter.recon_resolution=24']),
    '2': ("Desk-scale run (defaults)", []),
    '3': ("Ablation sweep (none, no-ct, rigid)", ['--ablations', 'none', 'no-ct', 'rigid']),
}


def main():
    print("Implicit Deformation - Local Runs")
    print("=================================")
    for key, (label, _) in PRESETS.items():
        print(f"{key}) {label}")
    print("4) Exit")

    choice = input("\nEnter choice (1-4) or press Enter for the smoke run: ").strip() or '1'
    if choice not in PRESETS:
        print("Exiting.")
        return 0

    seed = input("Seed (default 0): ").strip() or '0'
    label, extra = PRESETS[choice]
    out = Path('output') / f"local-{choice}-seed{seed}"
    print(f"\n🚀 {label} -> {out}")
    return run_workflow(['--seed', seed, '--out', str(out), *extra])


if __name__ == "__main__":
    sys.exit(main())
