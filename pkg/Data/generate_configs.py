"""
Experiment Config Generator

Writes one JSON run config per (experiment template, seed) so batches of
runs can be archived and rerun with `main.py train --config`.

Usage:
    python generate_configs.py --experiments disentangle discrete --seeds 3 --output batch_configs
"""

import argparse
import json
import os
import sys
from typing import Any, Dict, List, Optional

CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.dirname(CURRENT_DIR)
sys.path.insert(0, os.path.join(PROJECT_ROOT, "Product"))

from trainer import EXPERIMENTS, build_config


class ExperimentConfigGenerator:
    """Expand experiment templates into validated, seed-specific config files"""

    def __init__(self, base_seed: int = 0):
        self.base_seed = base_seed

    def generate(self, experiment: str, seed: int, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        fields = dict(overrides or {})
        fields["seed"] = seed
        # validate now so a bad batch fails before any run starts
        return build_config(experiment, fields).model_dump(mode="json")

    def generate_batch(self, experiments: List[str], n_seeds: int,
                       overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Dict[str, Any]]:
        batch = {}
        for experiment in experiments:
            for k in range(n_seeds):
                seed = self.base_seed + k
                batch[f"{experiment}_seed{seed:03d}"] = self.generate(experiment, seed, overrides)
        return batch

    def save_batch(self, batch: Dict[str, Dict[str, Any]], output_dir: str) -> List[str]:
        os.makedirs(output_dir, exist_ok=True)
        paths = []
        for name, config in batch.items():
            path = os.path.join(output_dir, f"{name}.json")
            with open(path, "w", encoding="utf-8") as f:
                json.dump(config, f, indent=2, sort_keys=True)
                f.write("\n")
            paths.append(path)
            print(f"  💾 Saved: {path}")
        return paths


def main():
    parser = argparse.ArgumentParser(description="Generate experiment config files")
    parser.add_argument("--experiments", nargs="+", default=["disentangle", "discrete"],
                        choices=sorted(EXPERIMENTS))
    parser.add_argument("--seeds", type=int, default=3, help="Seeds per experiment.")
    parser.add_argument("--base-seed", type=int, default=0)
    parser.add_argument("--steps", type=int, help="Override the template step count.")
    parser.add_argument("--output", default=os.path.join(CURRENT_DIR, "batch_configs"))
    args = parser.parse_args()

    overrides = {"steps": args.steps} if args.steps is not None else None
    generator = ExperimentConfigGenerator(base_seed=args.base_seed)
    print(f"🔧 Generating {len(args.experiments) * args.seeds} configs...")
    batch = generator.generate_batch(args.experiments, args.seeds, overrides)
    generator.save_batch(batch, args.output)
    print(f"✅ Done: {args.output}")


if __name__ == "__main__":
    main()
