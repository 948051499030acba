#!/usr/bin/env python3
"""Run one trajectory through all three protocol modes and compare costs."""

import argparse
from pathlib import Path

from trustsim.config import load_config
from trustsim.experiment import run_experiment
from trustsim.netsim import ModeParams, measured_vs_predicted


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=Path(__file__).parent.parent
                        / "configs" / "affine.toml")
    args = parser.parse_args()
    cfg = load_config(args.config)

    runs = {mode: run_experiment(cfg, mode=mode)
            for mode in ("transaction", "streaming", "batch")}
    print(f"{'mode':<12} {'comm bits':>12} {'storage bits':>13} {'f evals':>9} "
          f"{'blocks':>7}")
    for mode, r in runs.items():
        comm = r.cost.comm_bits + r.cost.comm_meta_bits
        stor = r.cost.storage_bits + r.cost.storage_meta_bits
        print(f"{mode:<12} {comm:>12} {stor:>13} {r.cost.total_comp:>9} "
              f"{r.frames_committed:>7}")

    batch = runs["batch"]
    params = ModeParams(mode="batch", endorsers_per_frame=1,
                        frame_cap=cfg.frame_cap,
                        subsample_rate=1.0 / batch.subsample_period,
                        dimension=batch.dimension, state_bound=cfg.state_bound,
                        quant_error=cfg.quant_error,
                        clamp_radius=cfg.clamp_radius, meta_bits=cfg.meta_bits)
    report = measured_vs_predicted(batch.cost, params,
                                   windows=cfg.iterations / cfg.frame_cap)
    print(f"\nbatch mode vs unit-constant model: comm x{report.comm_ratio:.2f}, "
          f"storage x{report.storage_ratio:.2f} per {cfg.frame_cap}-iterate window")


if __name__ == "__main__":
    main()
