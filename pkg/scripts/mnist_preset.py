#!/usr/bin/env python3
"""Opt-in long-running preset: hidden-layer training on user-supplied MNIST.

Expects an .npz with train_x/test_x (rows of 784 floats in [0, 1]) and
integer train_y/test_y. Takes minutes to hours depending on the tolerance
grid; nothing in the test suite depends on it.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from trustsim.config import load_config
from trustsim.experiment import run_experiment, vanilla_train


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", required=True, help="path to the MNIST .npz")
    parser.add_argument("--config", default=str(Path(__file__).parent.parent
                                                / "configs" / "mnist.toml"))
    parser.add_argument("--tolerance", type=float, default=None)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    cfg = load_config(args.config)
    cfg = replace(cfg, computation=replace(cfg.computation, dataset_path=args.data))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)

    artifacts = run_experiment(cfg, tolerance=args.tolerance)
    _, vanilla_acc = vanilla_train(cfg, cfg.computation.batch_size, cfg.seed)
    print(f"validated accuracy: {artifacts.accuracy:.4f} "
          f"(vanilla batch-{cfg.computation.batch_size}: {vanilla_acc:.4f})")
    print(f"invalidation rounds: {artifacts.invalidation_rounds}, "
          f"forced states: {artifacts.forced_states}")
    print(f"recomputations/iteration: {artifacts.recomputations_per_iter:.3f}")
    print(f"chain tip: {artifacts.chain_tip_hex}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
