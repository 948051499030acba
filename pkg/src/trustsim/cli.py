"""Command line front end: run one experiment, verify a chain, sweep a grid."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .experiment import (
    _Engine,
    run_experiment,
    sweep_tolerances,
    vanilla_train,
)
from .ledger import (
    block_hash,
    load_chain,
    save_chain,
    verify_chain_integrity,
    verify_computation,
)

__all__ = ["main"]

COST_COLUMNS = ("mode", "scenario", "tolerance", "comp_ops_per_iter",
                "comm_bits_per_dim", "storage_bits_per_dim",
                "recomputations_per_iter")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns, rows) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _cost_row(artifacts) -> tuple:
    return (artifacts.mode, artifacts.scenario, artifacts.tolerance,
            artifacts.comp_ops_per_iter, artifacts.comm_bits_per_dim,
            artifacts.storage_bits_per_dim, artifacts.recomputations_per_iter)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    from dataclasses import replace

    updates = {}
    if getattr(args, "mode", None):
        updates["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    return replace(cfg, **updates) if updates else cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = run_experiment(cfg, strict_period=args.strict_period)

    save_chain(artifacts.chain, out / "chain.bin")
    _write_csv(out / "costs.csv", COST_COLUMNS, [_cost_row(artifacts)])
    if artifacts.accuracy is not None:
        _write_csv(out / "precision.csv", ("tolerance", "validated_accuracy"),
                   [(artifacts.tolerance, artifacts.accuracy)])

    lines = [
        "trustsim run summary",
        f"mode: {artifacts.mode}",
        f"scenario: {artifacts.scenario}",
        f"seed: {artifacts.seed}",
        f"iterations: {artifacts.iterations}",
        f"dimension: {artifacts.dimension}",
        f"tolerance_scale: {_fmt(artifacts.tolerance)}",
        f"schedule: {cfg.schedule}",
        f"quant_error: {_fmt(cfg.scenario_quant_error(artifacts.tolerance))}",
        f"lipschitz_used: {_fmt(artifacts.lipschitz_used)}",
        f"subsample_period: {artifacts.subsample_period}",
        f"subsample_period_clamped: {artifacts.period_was_clamped}",
        f"validators_per_state: {artifacts.validators_per_state}",
        f"meta_bits_per_message: {cfg.meta_bits}",
        f"frames_committed: {artifacts.frames_committed}",
        f"invalidation_rounds: {artifacts.invalidation_rounds}",
        f"forced_states: {artifacts.forced_states}",
        f"refinement_messages: {artifacts.refinement_messages}",
        f"resend_messages: {artifacts.resend_messages}",
        f"comp_ops_total: {artifacts.cost.total_comp}",
        f"comm_bits: {artifacts.cost.comm_bits}",
        f"comm_meta_bits: {artifacts.cost.comm_meta_bits}",
        f"storage_bits: {artifacts.cost.storage_bits}",
        f"storage_meta_bits: {artifacts.cost.storage_meta_bits}",
        f"chain_tip: {artifacts.chain_tip_hex}",
    ]
    if artifacts.accuracy is not None:
        lines.append(f"test_accuracy: {_fmt(artifacts.accuracy)}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print(f"run complete: {artifacts.frames_committed} blocks, "
          f"tip {artifacts.chain_tip_hex[:16]}..., outputs in {out}")
    return 0


def cmd_verify(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    op = cfg.computation.build()
    engine = _Engine(op, cfg.validation_config(), cfg.randomized_config()
                     if op.stochastic else None, cfg, cfg.tolerance, cfg.seed)
    chain = load_chain(args.chain, subsample_period=engine.chain.subsample_period,
                       quantizer=engine.q)

    integrity = verify_chain_integrity(chain)
    if not integrity.ok:
        print(f"integrity: FAIL at height {integrity.first_bad_height} "
              f"({integrity.reason})")
        return 1
    print(f"integrity: PASS ({len(chain.blocks)} blocks)")
    if args.expect_tip:
        tip = "0" * 64 if not chain.blocks else block_hash(chain.blocks[-1]).hex()
        if tip != args.expect_tip:
            print(f"tip: FAIL expected {args.expect_tip} got {tip}")
            return 1
        print("tip: PASS")

    if op.stochastic:
        print("computation: SKIPPED (stochastic operation; audits are integrity-only)")
        return 0
    tolerance = cfg.verification_tolerance
    if tolerance is None:
        tolerance = engine.vcfg.verification_tolerance
    report = verify_computation(chain, op, tolerance)
    devs = [r.deviation for r in report.records]
    print(f"audits checked: {len(report.records)}")
    if devs:
        print(f"max deviation: {max(devs):.6g} (tolerance {tolerance:.6g})")
        print(f"mean deviation: {float(np.mean(devs)):.6g}")
    if report.all_ok:
        print("computation: PASS")
        return 0
    for rec in report.failures[:10]:
        print(f"  deviation {rec.deviation:.6g} over iterates "
              f"{rec.covered_range} at height {rec.height}")
    print(f"computation: FAIL ({len(report.failures)} audits beyond tolerance)")
    return 1


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tolerances = None
    if args.tolerances:
        tolerances = [float(x) for x in args.tolerances.split(",")]
    points = sweep_tolerances(cfg, tolerances=tolerances)

    rows = [(cfg.mode, p.scenario, p.tolerance, p.comp_ops_per_iter,
             p.comm_bits_per_dim, p.storage_bits_per_dim,
             p.recomputations_per_iter) for p in points]
    _write_csv(out / "costs.csv", COST_COLUMNS, rows)

    base_points = [p for p in points if p.scenario == "base"]
    if base_points and base_points[0].accuracy is not None:
        seeds = list(range(cfg.n_seeds))
        baselines = {b: float(np.mean([vanilla_train(cfg, b, s)[1] for s in seeds]))
                     for b in cfg.baseline_batch_sizes}
        columns = ["tolerance", "validated_accuracy"] + \
            [f"vanilla_batch_{b}" for b in cfg.baseline_batch_sizes]
        prows = [[p.tolerance, p.accuracy] + [baselines[b] for b in cfg.baseline_batch_sizes]
                 for p in base_points]
        _write_csv(out / "precision.csv", columns, prows)

    middle = cfg.tolerances[len(cfg.tolerances) // 2] if tolerances is None \
        else tolerances[len(tolerances) // 2]
    anchor = run_experiment(cfg, tolerance=middle, scenario="base", seed=0)
    save_chain(anchor.chain, out / "chain.bin")

    lines = ["trustsim sweep summary",
             f"mode: {cfg.mode}",
             f"seeds: {cfg.n_seeds}",
             f"iterations: {cfg.iterations}",
             f"meta_bits_per_message: {cfg.meta_bits}",
             f"anchor_chain: base scenario at tolerance {_fmt(middle)}, seed 0",
             f"anchor_chain_tip: {anchor.chain_tip_hex}",
             "", "scenario points (recomputations/iter by rising tolerance):"]
    for scenario in ("base", "coarse_compression", "large_frames"):
        vals = [p for p in points if p.scenario == scenario]
        if vals:
            txt = " ".join(f"{p.recomputations_per_iter:.3g}" for p in vals)
            lines.append(f"  {scenario}: {txt}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print(f"sweep complete: {len(points)} grid points, outputs in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trustsim",
        description="Trusted iterative computation: compressed reporting, "
                    "endorsement by recomputation, audit chains.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one simulated run")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--mode", choices=("transaction", "streaming", "batch"))
    run.add_argument("--seed", type=int)
    run.add_argument("--strict-period", action="store_true", dest="strict_period",
                     help="fail instead of clamping an infeasible subsampling period")
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="check a chain file")
    verify.add_argument("--chain", required=True)
    verify.add_argument("--config", required=True)
    verify.add_argument("--seed", type=int)
    verify.add_argument("--expect-tip", dest="expect_tip")
    verify.set_defaults(func=cmd_verify)

    sweep = sub.add_parser("sweep", help="scenario grid over tolerances")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--tolerances", help="comma-separated schedule scales")
    sweep.add_argument("--mode", choices=("transaction", "streaming", "batch"))
    sweep.add_argument("--seed", type=int)
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
