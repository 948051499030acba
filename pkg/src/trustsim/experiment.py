"""End-to-end simulated runs: compute, compress, endorse, repair, commit.

One run drives the client/endorser/orderer state machines over the message
simulation for a fixed mode and tolerance. Invalidated states are repaired
by successive refinement when quantization can explain the deviation and by
recomputation with a fresh draw otherwise; repair effort per frame is
bounded, with any leftovers force-accepted and reported, so a run always
terminates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .codec import (
    CheckpointDictionary,
    Frame,
    IndexAccumulator,
    NewEntry,
    QuantizedUpdate,
    apply_refinement,
    dict_encode_checkpoint,
    quantize_update,
    refine_update,
    refinement_chunk_bits,
    reported_states,
    update_bit_cost,
)
import math
from .compute import derive_draw, estimate_lipschitz, step
from .config import RunConfig
from .ledger import (
    AuditChain,
    CheckpointAudit,
    CumulativeAudit,
    append_block,
    block_hash,
    choose_subsample_period,
    subsample_frame,
)
from .netsim import CostLedger, Network
from .protocol import (
    InvalidationNotice,
    RandomizedConfig,
    RepairAction,
    ValidationConfig,
    handle_invalidation,
    randomized_endorse,
)

__all__ = ["RunArtifacts", "run_experiment", "vanilla_train", "sweep_tolerances",
           "precision_rows", "SweepPoint"]

BLOCK_HEADER_BITS = (32 + 8 + 8 + 8) * 8
NOTICE_BITS = 128
ENDORSEMENT_BITS = 128
COMMIT_BITS = 64
RESEND_HEADER_BITS = 24  # in-frame offset plus level byte


@dataclass
class RunArtifacts:
    mode: str
    scenario: str
    tolerance: float
    seed: int
    iterations: int
    dimension: int
    validators_per_state: int
    cost: CostLedger
    chain: AuditChain
    subsample_period: int
    period_was_clamped: bool
    final_state: np.ndarray
    final_reported: np.ndarray
    invalidation_rounds: int
    forced_states: int
    refinement_messages: int
    resend_messages: int
    frames_committed: int
    accuracy: Optional[float]
    lipschitz_used: float
    report_bits: int = 0

    @property
    def comp_ops_per_iter(self) -> float:
        return self.cost.total_comp / max(1, self.iterations)

    @property
    def recomputations_per_iter(self) -> float:
        baseline = self.iterations * (1 + self.validators_per_state)
        return max(0, self.cost.total_comp - baseline) / max(1, self.iterations)

    @property
    def comm_bits_per_dim(self) -> float:
        """State-report payload (client to endorsers) per iterate and dimension."""
        return self.report_bits / max(1, self.iterations * self.dimension)

    @property
    def storage_bits_per_dim(self) -> float:
        total = self.cost.storage_bits + self.cost.storage_meta_bits
        return total / max(1, self.iterations * self.dimension)

    @property
    def chain_tip_hex(self) -> str:
        if not self.chain.blocks:
            return "0" * 64
        return block_hash(self.chain.blocks[-1]).hex()


class _Engine:
    """One deterministic simulated run."""

    def __init__(self, op, vcfg: ValidationConfig, rcfg: Optional[RandomizedConfig],
                 run_cfg: RunConfig, tolerance: float, seed: int):
        self.op = op
        self.vcfg = vcfg
        self.rcfg = rcfg if op.stochastic else None
        self.mode = vcfg.mode
        self.iterations = run_cfg.iterations
        self.seed = seed
        self.meta = run_cfg.meta_bits
        self.heavy_cap = run_cfg.recompute_rounds_cap
        self.light_cap = run_cfg.light_rounds_cap
        self.max_level = run_cfg.max_refinement_level
        self.comp_bit_rate = run_cfg.comp_bit_rate
        self.det_endorsers = run_cfg.deterministic_endorsers
        self.tolerance = tolerance
        self.scenario = run_cfg.scenario

        d = op.dimension
        self.d = d
        self.q = vcfg.quantizer_for(d)
        self.ubits = update_bit_cost(self.q)
        self.percoord = self.ubits // d
        self.ledger = CostLedger()
        self.net = Network(self.ledger)
        self.dictionary = CheckpointDictionary(dimension=d, tolerance=vcfg.quant_error)
        self.period_was_clamped = False
        period = self._pick_period(run_cfg)
        self.chain = AuditChain(subsample_period=period, quantizer=self.q)
        self.x0 = run_cfg.initial_state_vector(op)

        self.catt: Dict[int, int] = {}  # client redraw attempts per state
        self.eatt: Dict[int, int] = {}  # endorser validation rounds per state
        self._carried: Optional[np.ndarray] = None
        self.invalidation_rounds = 0
        self.forced_states = 0
        self.refinement_messages = 0
        self.resend_messages = 0
        self.report_bits = 0

    def _pick_period(self, run_cfg: RunConfig) -> int:
        if run_cfg.subsample_rule == "ratio":
            # one stored state per verification/validation tolerance ratio;
            # degenerate for ratios below one, so it floors at one
            ratio = self.vcfg.verification_tolerance / self.vcfg.tolerance.value(1)
            return max(1, int(ratio))
        try:
            return choose_subsample_period(self.vcfg.lipschitz, self.vcfg.quant_error,
                                           self.vcfg.verification_tolerance,
                                           run_cfg.period_cap)
        except ValueError:
            # coarse quantization cannot meet any verification budget; store
            # every window of one and surface the clamp in the artifacts
            self.period_was_clamped = True
            return 1

    # role primitives ------------------------------------------------------

    def _client_step(self, tau: int, from_state: np.ndarray) -> np.ndarray:
        draw = None
        if self.op.stochastic:
            draw = derive_draw(self.op, self.seed, 0, tau, self.catt.get(tau, 0))
        x = step(self.op, from_state, draw)
        self.ledger.count_op("client")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"computation diverged at iteration {tau}")
        return x

    def _validate(self, tau: int, prev_reported: np.ndarray,
                  reported: np.ndarray) -> Tuple[bool, float]:
        margin = self.vcfg.tolerance.value(tau)
        if self.op.stochastic:
            self.eatt[tau] = self.eatt.get(tau, 0) + 1
            draws = [derive_draw(self.op, self.seed, 1000 + i, tau, self.eatt[tau])
                     for i in range(self.rcfg.endorsers)]
            result = randomized_endorse(reported, prev_reported, self.op,
                                        replace(self.rcfg, margin=margin), draws,
                                        on_eval=self.ledger.eval_hook("endorser"))
            return result.valid, result.deviation
        recomputed = None
        for _ in range(self.det_endorsers):
            recomputed = step(self.op, prev_reported)
            self.ledger.count_op("endorser")
        dev = float(np.linalg.norm(reported - recomputed))
        return dev <= margin, dev

    def _send(self, kind, sender, receiver, bits):
        self.net.send(kind, sender, receiver, None, payload_bits=int(bits),
                      meta_bits=self.meta)
        self.net.deliver_all()

    def _send_report(self, kind, bits):
        self.report_bits += int(bits)
        self._send(kind, "client", "endorser", bits)

    def _refine_levels(self, current_level: int, tau: int) -> int:
        """Levels to jump so quantization stops dominating the tolerance."""
        eps_eff = self.vcfg.quant_error / 2 ** current_level
        target = 0.5 * self.vcfg.tolerance.value(tau) / (self.vcfg.lipschitz + 1.0)
        levels = 1
        if eps_eff > target > 0:
            levels = math.ceil(math.log2(eps_eff / target))
        return max(1, min(levels, self.max_level - current_level))

    def _commit_block(self, frame_index: int, audits) -> None:
        block = append_block(self.chain, frame_index, audits)
        self.ledger.record_storage(len(block.payload) * 8, BLOCK_HEADER_BITS)
        self._send("CommitNotice", "orderer", "peers", COMMIT_BITS)

    def _frame_report_bits(self, frame: Frame) -> int:
        bits = 8 + 64 + 8 + 64  # magic, frame index, tag, update count
        bits += 64 * self.d if isinstance(frame.checkpoint_code, NewEntry) else 64
        return bits + len(frame.updates) * self.ubits

    # batch mode -----------------------------------------------------------

    def run(self) -> RunArtifacts:
        if self.mode == "batch":
            final, reported = self._run_batch()
        else:
            final, reported = self._run_per_state()
        acc = None
        if hasattr(self.op, "accuracy"):
            acc = self.op.accuracy(final)
        validators = self.rcfg.endorsers if self.op.stochastic else self.det_endorsers
        return RunArtifacts(
            mode=self.mode, scenario=self.scenario, tolerance=self.tolerance,
            seed=self.seed, iterations=self.iterations, dimension=self.d,
            validators_per_state=validators, cost=self.ledger, chain=self.chain,
            subsample_period=self.chain.subsample_period,
            period_was_clamped=self.period_was_clamped,
            final_state=final, final_reported=reported,
            invalidation_rounds=self.invalidation_rounds,
            forced_states=self.forced_states,
            refinement_messages=self.refinement_messages,
            resend_messages=self.resend_messages,
            frames_committed=len(self.chain.blocks),
            accuracy=acc, lipschitz_used=self.vcfg.lipschitz,
            report_bits=self.report_bits)

    def _run_batch(self) -> Tuple[np.ndarray, np.ndarray]:
        T = self.iterations
        x = self.x0
        code = dict_encode_checkpoint(self.dictionary, x)
        reported_prev = self._resolve(code)
        t = 0
        while True:
            frame_index = self.chain.next_frame_index
            if frame_index > 0:
                tau = t + 1
                x, code, reported_prev = self._accept_checkpoint(tau, x, reported_prev)
                t = tau
            frame = Frame(frame_index=frame_index, checkpoint_code=code,
                          checkpoint_time=t, cap=self.vcfg.frame_cap)
            span_true = [x]
            span_rep = [reported_prev]
            acc = IndexAccumulator(self.d)
            carried = None
            while t < T and len(frame.updates) < self.vcfg.frame_cap:
                tau = t + 1
                cand = self._client_step(tau, span_true[-1])
                delta = cand - span_rep[-1]
                if np.linalg.norm(delta) > self.vcfg.clamp_radius:
                    carried = cand
                    break
                update = quantize_update(self.q, delta)
                frame.append_update(update)
                acc.add(update.indices, 0)
                span_true.append(cand)
                span_rep.append(span_rep[0] + acc.value(self.q.step))
                t = tau
            self._send_report("FrameReport", self._frame_report_bits(frame))
            span_true, span_rep, tail_changed, removed = self._repair_frame(
                frame, span_true, span_rep, frame.checkpoint_time)
            t -= removed
            if removed or tail_changed:
                carried = None
            frame.seal()
            self._send("EndorsementMsg", "endorser", "orderer", ENDORSEMENT_BITS)
            self._commit_block(frame.frame_index, subsample_frame(frame, self.chain.subsample_period))
            x = span_true[-1]
            reported_prev = span_rep[-1]
            if t >= T:
                return x, reported_prev
            # the clamp candidate opens the next frame unless repair stale-d it
            self._carried = carried

    def _accept_checkpoint(self, tau, prev_state, prev_reported):
        """Produce and validate the state opening the next frame."""
        cand = self._carried if self._carried is not None \
            else self._client_step(tau, prev_state)
        self._carried = None
        rounds = 0
        while True:
            code = dict_encode_checkpoint(self.dictionary, cand)
            reported = self._resolve(code)
            ok, dev = self._validate(tau, prev_reported, reported)
            if ok:
                return cand, code, reported
            self.invalidation_rounds += 1
            self._send("InvalidationNotice", "endorser", "client", NOTICE_BITS)
            if rounds >= self.heavy_cap:
                self.forced_states += 1
                return cand, code, reported
            rounds += 1
            self.catt[tau] = self.catt.get(tau, 0) + 1
            cand = self._client_step(tau, prev_reported)
            self._send_report("FrameReport", 64 * self.d + 80)

    def _resolve(self, code) -> np.ndarray:
        if isinstance(code, NewEntry):
            return code.state
        return self.dictionary.lookup(code.index)

    def _repair_frame(self, frame, span_true, span_rep, t0):
        """Validate a frame's updates, repairing until accepted or budget-out.

        Returns (span_true, span_rep, tail_changed, removed_updates); the
        frame may be truncated when a recomputed delta outruns the clamp.
        """
        heavy = light = 0
        from_off = 0
        tail_changed = False
        removed = 0
        refined_once = set()  # refinement that failed once is not retried
        while True:
            bad = None
            for j in range(from_off, len(frame.updates)):
                ok, dev = self._validate(t0 + 1 + j, span_rep[j], span_rep[j + 1])
                if not ok:
                    bad = (j, dev)
                    break
            if bad is None:
                return span_true, span_rep, tail_changed, removed
            j, dev = bad
            self.invalidation_rounds += 1
            self._send("InvalidationNotice", "endorser", "client", NOTICE_BITS)
            update = frame.updates[j]
            notice = InvalidationNotice(frame_index=frame.frame_index, offset=j,
                                        deviation=dev)
            action = handle_invalidation(
                notice, self.vcfg, current_level=update.refinement_level,
                max_level=self.max_level, tail_length=len(frame.updates) - j,
                bits_per_update=self.ubits, dimension=self.d,
                meta_bits=self.meta, comp_bit_rate=self.comp_bit_rate)
            if (action is RepairAction.SEND_REFINEMENT and light < self.light_cap
                    and j not in refined_once):
                light += 1
                refined_once.add(j)
                delta_now = span_true[j + 1] - span_rep[j]
                levels = self._refine_levels(update.refinement_level, t0 + 1 + j)
                try:
                    chunk = refine_update(self.q, delta_now, update,
                                          target=(frame.frame_index, j),
                                          levels=levels)
                    frame.updates[j] = apply_refinement(update, chunk)
                    self._send_report("RefinementChunkMsg",
                                      refinement_chunk_bits(self.d, levels))
                    self.refinement_messages += 1
                except ValueError:
                    # earlier refinements shifted the reported chain; resend a
                    # fresh quantization of this update at the target level
                    new_level = min(update.refinement_level + levels, self.max_level)
                    frame.updates[j] = _quantize_at_level(self.q, delta_now, new_level)
                    bits = (self.percoord + new_level) * self.d + RESEND_HEADER_BITS
                    self._send_report("FrameReport", bits)
                    self.resend_messages += 1
                span_rep = reported_states(span_rep[0], frame.updates, self.q)
                from_off = j
                tail_changed = True
            elif heavy < self.heavy_cap:
                heavy += 1
                tail_changed = True
                tau_bad = t0 + 1 + j
                self.catt[tau_bad] = self.catt.get(tau_bad, 0) + 1
                kept = len(frame.updates)
                refined_once.clear()  # a rebuilt tail may refine afresh
                for i in range(j, len(frame.updates)):
                    tau = t0 + 1 + i
                    # recompute from the reported state: the validated chain
                    # is the trajectory of record, so repairs re-anchor on it
                    cand = self._client_step(tau, span_rep[i])
                    delta = cand - span_rep[i]
                    if np.linalg.norm(delta) > self.vcfg.clamp_radius:
                        kept = i
                        break
                    frame.updates[i] = quantize_update(self.q, delta)
                    span_true[i + 1] = cand
                    span_rep = reported_states(span_rep[0], frame.updates[:i + 1],
                                               self.q) + span_rep[i + 2:]
                if kept < len(frame.updates):
                    removed += len(frame.updates) - kept
                    del frame.updates[kept:]
                    del span_true[kept + 1:]
                    del span_rep[kept + 1:]
                bits = (len(frame.updates) - j) * self.ubits + 144
                self._send_report("FrameReport", bits)
                self.resend_messages += 1
                from_off = j
            else:
                self.forced_states += 1
                from_off = j + 1

    # streaming and transaction modes ---------------------------------------

    def _run_per_state(self) -> Tuple[np.ndarray, np.ndarray]:
        T = self.iterations
        x = self.x0
        if self.mode == "transaction":
            reported = x.copy()
            audits = [CheckpointAudit(code=NewEntry(state=x.copy()), covered_range=(0, 0))]
        else:
            code = dict_encode_checkpoint(self.dictionary, x)
            reported = self._resolve(code)
            audits = [CheckpointAudit(code=code, covered_range=(0, 0))]
        self._commit_block(0, audits)
        seg_anchor = reported
        seg_acc = IndexAccumulator(self.d)

        for tau in range(1, T + 1):
            cand = self._client_step(tau, x)
            heavy = light = 0
            update = None
            send_full = True
            refined_once = False
            while True:
                if self.mode == "transaction":
                    new_reported = cand
                    audits = [CheckpointAudit(code=NewEntry(state=cand.copy()),
                                              covered_range=(tau, tau))]
                    bits = 144 + 64 * self.d
                else:
                    delta = cand - reported
                    if np.linalg.norm(delta) > self.vcfg.clamp_radius:
                        code = dict_encode_checkpoint(self.dictionary, cand)
                        new_reported = self._resolve(code)
                        audits = [CheckpointAudit(code=code, covered_range=(tau, tau))]
                        update = None
                        bits = 144 + (64 * self.d if isinstance(code, NewEntry) else 64)
                    else:
                        if update is None:
                            update = quantize_update(self.q, delta)
                        probe = IndexAccumulator(self.d)
                        probe.total = seg_acc.total.copy()
                        probe.level = seg_acc.level
                        probe.add(update.indices, update.refinement_level)
                        new_reported = seg_anchor + probe.value(self.q.step)
                        audits = [CumulativeAudit(indices=update.indices,
                                                  level=update.refinement_level,
                                                  covered_range=(tau, tau))]
                        bits = (self.percoord + update.refinement_level) * self.d
                if send_full:
                    self._send_report("FrameReport", bits)
                    send_full = False
                ok, dev = self._validate(tau, reported, new_reported)
                if ok:
                    break
                self.invalidation_rounds += 1
                self._send("InvalidationNotice", "endorser", "client", NOTICE_BITS)
                refinable = (update is not None
                             and update.refinement_level < self.max_level)
                if refinable:
                    notice = InvalidationNotice(frame_index=tau, offset=0, deviation=dev)
                    action = handle_invalidation(
                        notice, self.vcfg, current_level=update.refinement_level,
                        max_level=self.max_level, tail_length=1,
                        bits_per_update=self.ubits, dimension=self.d,
                        meta_bits=self.meta, comp_bit_rate=self.comp_bit_rate)
                else:
                    action = RepairAction.RECOMPUTE_AND_RESEND
                if (action is RepairAction.SEND_REFINEMENT and light < self.light_cap
                        and not refined_once):
                    light += 1
                    refined_once = True
                    levels = self._refine_levels(update.refinement_level, tau)
                    update = apply_refinement(
                        update, refine_update(self.q, cand - reported, update,
                                              target=(tau, 0), levels=levels))
                    self._send_report("RefinementChunkMsg",
                                      refinement_chunk_bits(self.d, levels))
                    self.refinement_messages += 1
                elif heavy < self.heavy_cap:
                    heavy += 1
                    self.resend_messages += 1
                    self.catt[tau] = self.catt.get(tau, 0) + 1
                    cand = self._client_step(tau, reported)
                    update = None
                    send_full = True
                    refined_once = False
                else:
                    self.forced_states += 1
                    break
            if self.mode != "transaction":
                if update is None:  # checkpoint: reset the delta segment
                    seg_anchor = new_reported
                    seg_acc = IndexAccumulator(self.d)
                else:
                    seg_acc.add(update.indices, update.refinement_level)
            self._send("EndorsementMsg", "endorser", "orderer", ENDORSEMENT_BITS)
            self._commit_block(tau, audits)
            x = cand
            reported = new_reported
        return x, reported


def _quantize_at_level(q, delta, level):
    pitch = q.step / 2 ** level
    return QuantizedUpdate(indices=np.round(np.asarray(delta) / pitch).astype(np.int64),
                           refinement_level=level)


def _resolved_lipschitz(op, seed: int) -> float:
    if op.lipschitz is not None:
        return op.lipschitz
    est = estimate_lipschitz(op, sample_count=300, radius=2.0,
                             rng_seed=(seed, 0x11D))
    op.lipschitz = est
    return est


def run_experiment(cfg: RunConfig, tolerance: Optional[float] = None,
                   scenario: Optional[str] = None, mode: Optional[str] = None,
                   seed: Optional[int] = None,
                   strict_period: bool = False) -> RunArtifacts:
    """Execute one simulated run and return its artifacts.

    Deterministic given (config, seed): reruns yield byte-identical chains
    and counters.
    """
    tolerance = cfg.tolerance if tolerance is None else tolerance
    scenario = cfg.scenario if scenario is None else scenario
    mode = cfg.mode if mode is None else mode
    seed = cfg.seed if seed is None else seed
    op = cfg.computation.build()
    lip = _resolved_lipschitz(op, seed)
    run_cfg = replace(cfg, scenario=scenario, mode=mode)
    vcfg = replace(cfg.validation_config(tolerance, scenario), mode=mode, lipschitz=lip)
    rcfg = cfg.randomized_config(tolerance) if op.stochastic else None
    engine = _Engine(op, vcfg, rcfg, run_cfg, tolerance, seed)
    if strict_period and engine.period_was_clamped:
        raise ValueError("no feasible subsampling period for this configuration; "
                         "use a smaller quantization error")
    return engine.run()


def vanilla_train(cfg: RunConfig, batch_size: int, seed: int) -> Tuple[np.ndarray, float]:
    """Plain mini-batch SGD with the same draw derivation as a trusted run."""
    op = cfg.computation.with_batch_size(batch_size).build()
    x = cfg.initial_state_vector(op)
    for tau in range(1, cfg.iterations + 1):
        x = step(op, x, derive_draw(op, seed, 0, tau, 0))
    return x, op.accuracy(x)


@dataclass
class SweepPoint:
    scenario: str
    tolerance: float
    recomputations_per_iter: float
    comm_bits_per_dim: float
    storage_bits_per_dim: float
    comp_ops_per_iter: float
    accuracy: Optional[float]
    forced_states: float
    invalidation_rounds: float


def sweep_tolerances(cfg: RunConfig, scenarios=("base", "coarse_compression",
                                                "large_frames"),
                     tolerances=None, seeds=None) -> List[SweepPoint]:
    """Seed-averaged scenario grid over the tolerance schedule scale."""
    tolerances = list(cfg.tolerances if tolerances is None else tolerances)
    seeds = list(range(cfg.n_seeds) if seeds is None else seeds)
    points = []
    for scenario in scenarios:
        for tol in tolerances:
            runs = [run_experiment(cfg, tolerance=tol, scenario=scenario, seed=s)
                    for s in seeds]
            acc = None
            if runs[0].accuracy is not None:
                acc = float(np.mean([r.accuracy for r in runs]))
            points.append(SweepPoint(
                scenario=scenario, tolerance=tol,
                recomputations_per_iter=float(np.mean([r.recomputations_per_iter for r in runs])),
                comm_bits_per_dim=float(np.mean([r.comm_bits_per_dim for r in runs])),
                storage_bits_per_dim=float(np.mean([r.storage_bits_per_dim for r in runs])),
                comp_ops_per_iter=float(np.mean([r.comp_ops_per_iter for r in runs])),
                accuracy=acc,
                forced_states=float(np.mean([r.forced_states for r in runs])),
                invalidation_rounds=float(np.mean([r.invalidation_rounds for r in runs])),
            ))
    return points


def precision_rows(cfg: RunConfig, tolerances=None, seeds=None):
    """Validated-training accuracy per tolerance plus vanilla baselines.

    Returns (rows, baselines): rows are (tolerance, mean accuracy) for the
    base scenario; baselines map batch size to mean vanilla accuracy under
    the same seeds and draw paths.
    """
    tolerances = list(cfg.tolerances if tolerances is None else tolerances)
    seeds = list(range(cfg.n_seeds) if seeds is None else seeds)
    rows = []
    for tol in tolerances:
        accs = [run_experiment(cfg, tolerance=tol, scenario="base", seed=s).accuracy
                for s in seeds]
        rows.append((tol, float(np.mean(accs))))
    baselines = {}
    for b in cfg.baseline_batch_sizes:
        baselines[b] = float(np.mean([vanilla_train(cfg, b, s)[1] for s in seeds]))
    return rows, baselines
