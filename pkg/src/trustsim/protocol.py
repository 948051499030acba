"""Client, endorser, and orderer logic.

The client runs the computation, delta-encodes reported states into frames,
and opens a checkpoint whenever an update outruns the quantizer's clamp
radius or the frame cap fills. Endorsers accept a reported state when it
lies within the validation tolerance of their own recomputation from the
previous reported state; the orderer serializes validated frames onto the
audit chain in index order. For computations with private randomness the
endorsement compares against the mean of several independent recomputations
instead, with an explicit outlier-probability budget.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from struct import error as struct_error
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .codec import (
    CheckpointDictionary,
    Frame,
    IndexAccumulator,
    LatticeQuantizer,
    NewEntry,
    decode_frame,
    dict_encode_checkpoint,
    quantize_update,
    refinement_bits_per_level,
    reported_states,
)
from .compute import RandomDraw, as_state, step
from . import ledger as ledger_mod

__all__ = [
    "ToleranceSchedule",
    "ValidationConfig",
    "RandomizedConfig",
    "Endorsement",
    "InvalidationNotice",
    "RunTrace",
    "FrameCheck",
    "RandomizedEndorsement",
    "RepairAction",
    "CommitResult",
    "InfeasibleEndorserCount",
    "max_quantizer_error",
    "client_run_frames",
    "endorse_frame",
    "endorse_frame_bytes",
    "endorse_trajectory",
    "randomized_endorse",
    "deviation_probability_bound",
    "required_endorsers",
    "handle_invalidation",
    "orderer_commit",
    "power_iteration_max_eig",
]

MODES = ("transaction", "streaming", "batch")


class InfeasibleEndorserCount(ValueError):
    """No finite endorser count is certified for the requested budget."""


@dataclass(frozen=True)
class ToleranceSchedule:
    """Per-iteration validation tolerance, constant or log-tightening."""

    kind: str
    scale: float

    @classmethod
    def constant(cls, value: float) -> "ToleranceSchedule":
        return cls(kind="constant", scale=float(value))

    @classmethod
    def log(cls, max_value: float) -> "ToleranceSchedule":
        """max_value / ln(t+1): loose early, tightening as the run converges."""
        return cls(kind="log", scale=float(max_value))

    def __post_init__(self):
        if self.kind not in ("constant", "log"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("tolerance must be positive")

    def value(self, t: int) -> float:
        if t < 1:
            raise ValueError("tolerances are defined for iterations t >= 1")
        if self.kind == "constant":
            return self.scale
        return self.scale / math.log(t + 1)


@dataclass(frozen=True)
class ValidationConfig:
    tolerance: ToleranceSchedule
    verification_tolerance: float
    clamp_radius: float
    quant_error: float
    frame_cap: int
    lipschitz: float
    mode: str = "batch"
    strict_soundness: bool = False

    def __post_init__(self):
        if self.verification_tolerance <= 0:
            raise ValueError("verification tolerance must be positive")
        if self.tolerance.scale < self.verification_tolerance:
            raise ValueError("validation must be no stricter than verification")
        if not (self.clamp_radius > self.quant_error > 0):
            raise ValueError("need clamp_radius > quant_error > 0")
        if self.frame_cap < 1:
            raise ValueError("frame cap must be >= 1")
        if self.lipschitz < 0:
            raise ValueError("lipschitz must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.strict_soundness:
            allowed = max_quantizer_error(self.tolerance.value(1), self.lipschitz)
            if self.quant_error > allowed:
                raise ValueError(
                    f"quant_error {self.quant_error:.6g} breaks soundness; "
                    f"needs <= {allowed:.6g}")

    def quantizer_for(self, dimension: int) -> LatticeQuantizer:
        return LatticeQuantizer(dimension=dimension, max_error=self.quant_error,
                                clamp_radius=self.clamp_radius)


@dataclass(frozen=True)
class RandomizedConfig:
    """Validation budget for computations with private randomness."""

    endorsers: int
    outlier_budget: float
    margin: float
    covariance_max_eig: Optional[float] = None

    def __post_init__(self):
        if self.endorsers < 1:
            raise ValueError("need at least one endorser")
        if not 0 < self.outlier_budget < 1:
            raise ValueError("outlier budget must be in (0, 1)")
        if self.margin <= 0:
            raise ValueError("margin must be positive")


@dataclass
class Endorsement:
    frame_index: int
    endorser_id: int
    valid: bool
    first_bad_offset: Optional[int]
    deviations: List[float]
    recompute_count: int
    decode_failed: bool = False


@dataclass
class InvalidationNotice:
    frame_index: int
    offset: int
    deviation: float


@dataclass
class RandomizedEndorsement:
    valid: bool
    deviation: float
    mean_recomputation: np.ndarray
    covariance_max_eig: float
    recompute_count: int


def max_quantizer_error(validation_tolerance: float, lipschitz: float) -> float:
    """Largest quantization error that can never cause an honest invalidation.

    One recomputation step amplifies the report error by the Lipschitz
    constant and adds one fresh quantization error, so the tolerance divides
    by (L + 1).
    """
    if validation_tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if lipschitz < 0:
        raise ValueError("lipschitz must be nonnegative")
    return validation_tolerance / (lipschitz + 1.0)


@dataclass
class RunTrace:
    """Everything a client run produces: frames plus both trajectories."""

    frames: List[Frame]
    reported: List[np.ndarray]
    true_states: List[np.ndarray]
    dictionary: CheckpointDictionary
    seal_reasons: List[str]
    first_update_norms: List[Optional[float]]


def _resolve_code(code, dictionary: CheckpointDictionary) -> np.ndarray:
    if isinstance(code, NewEntry):
        return code.state
    return dictionary.lookup(code.index)


def client_run_frames(op, x0: np.ndarray, iterations: int, cfg: ValidationConfig,
                      draws: Optional[Sequence[RandomDraw]] = None,
                      on_eval=None) -> RunTrace:
    """Run the computation and build the reported, compressed trajectory.

    The reported state follows the true state within one quantization error
    at every iterate because each delta is taken against the previous
    reported state. A checkpoint opens a new frame whenever the delta norm
    exceeds the clamp radius or the frame cap fills.
    """
    x0 = as_state(x0, op.dimension)
    if op.stochastic and (draws is None or len(draws) != iterations):
        raise ValueError(f"stochastic run needs exactly {iterations} draws")
    q = cfg.quantizer_for(op.dimension)
    dictionary = CheckpointDictionary(dimension=op.dimension, tolerance=cfg.quant_error)

    code = dict_encode_checkpoint(dictionary, x0)
    anchor = _resolve_code(code, dictionary)
    true_states = [x0]
    reported = [anchor]
    if iterations == 0:
        return RunTrace(frames=[], reported=reported, true_states=true_states,
                        dictionary=dictionary, seal_reasons=[], first_update_norms=[])

    frame = Frame(frame_index=0, checkpoint_code=code, checkpoint_time=0, cap=cfg.frame_cap)
    frames = [frame]
    seal_reasons: List[str] = []
    first_norms: List[Optional[float]] = [None]
    acc = IndexAccumulator(op.dimension)

    for t in range(iterations):
        x_next = step(op, true_states[-1], draws[t] if op.stochastic else None)
        if on_eval:
            on_eval(1)
        if not np.all(np.isfinite(x_next)):
            raise ValueError(f"computation diverged at iteration {t + 1}")
        delta = x_next - reported[-1]
        over_clamp = np.linalg.norm(delta) > cfg.clamp_radius
        if over_clamp or len(frame) >= cfg.frame_cap:
            frame.seal()
            seal_reasons.append("clamp" if over_clamp else "cap")
            code = dict_encode_checkpoint(dictionary, x_next)
            anchor = _resolve_code(code, dictionary)
            frame = Frame(frame_index=len(frames), checkpoint_code=code,
                          checkpoint_time=t + 1, cap=cfg.frame_cap)
            frames.append(frame)
            first_norms.append(None)
            acc = IndexAccumulator(op.dimension)
            rep = anchor
        else:
            update = quantize_update(q, delta)
            if len(frame) == 0:
                first_norms[-1] = float(np.linalg.norm(x_next - true_states[-1]))
            frame.append_update(update)
            acc.add(update.indices, update.refinement_level)
            rep = anchor + acc.value(q.step)
        true_states.append(x_next)
        reported.append(rep)

    frame.seal()
    seal_reasons.append("end")
    return RunTrace(frames=frames, reported=reported, true_states=true_states,
                    dictionary=dictionary, seal_reasons=seal_reasons,
                    first_update_norms=first_norms)


def endorse_frame(frame: Frame, anchor: np.ndarray, op, cfg: ValidationConfig,
                  draws: Optional[Sequence[RandomDraw]] = None,
                  endorser_id: int = 0, on_eval=None) -> Endorsement:
    """Validate a frame by sequential recomputation from its checkpoint.

    ``anchor`` is the frame's resolved checkpoint state. Each reported state
    must lie within the (closed) tolerance of the recomputation from the
    previous reported state; validation stops at the first violation.
    """
    if not frame.sealed:
        raise ValueError("cannot endorse an unsealed frame")
    anchor = as_state(anchor, op.dimension)
    if op.stochastic and (draws is None or len(draws) != len(frame.updates)):
        raise ValueError("stochastic endorsement needs one draw per update")
    q = cfg.quantizer_for(op.dimension)
    states = reported_states(anchor, frame.updates, q)
    deviations: List[float] = []
    recompute = 0
    for j in range(len(frame.updates)):
        recomputed = step(op, states[j], draws[j] if op.stochastic else None)
        recompute += 1
        if on_eval:
            on_eval(1)
        dev = float(np.linalg.norm(states[j + 1] - recomputed))
        deviations.append(dev)
        if dev > cfg.tolerance.value(frame.checkpoint_time + 1 + j):
            return Endorsement(frame_index=frame.frame_index, endorser_id=endorser_id,
                               valid=False, first_bad_offset=j, deviations=deviations,
                               recompute_count=recompute)
    return Endorsement(frame_index=frame.frame_index, endorser_id=endorser_id,
                       valid=True, first_bad_offset=None, deviations=deviations,
                       recompute_count=recompute)


def endorse_frame_bytes(data: bytes, anchor: np.ndarray, op, cfg: ValidationConfig,
                        endorser_id: int = 0, on_eval=None) -> Endorsement:
    """Decode a frame bitstream and endorse it; decode failure invalidates."""
    q = cfg.quantizer_for(op.dimension)
    try:
        frame = decode_frame(data, q)
    except (ValueError, IndexError, struct_error):
        return Endorsement(frame_index=-1, endorser_id=endorser_id, valid=False,
                           first_bad_offset=0, deviations=[], recompute_count=0,
                           decode_failed=True)
    return endorse_frame(frame, anchor, op, cfg, endorser_id=endorser_id, on_eval=on_eval)


@dataclass
class FrameCheck:
    endorsement: Endorsement
    transition_deviation: Optional[float]
    transition_ok: bool


def endorse_trajectory(frames: Sequence[Frame], op, cfg: ValidationConfig,
                       on_eval=None) -> List[FrameCheck]:
    """Endorse a full frame sequence, including cross-frame checkpoint checks.

    The checkpoint of frame n (n > 0) must itself be within tolerance of one
    recomputation from the final reported state of frame n-1; a lie placed at
    a checkpoint is caught here rather than by in-frame recomputation.
    """
    if op.stochastic:
        raise ValueError("trajectory endorsement covers deterministic operations")
    q = cfg.quantizer_for(op.dimension)
    replica = CheckpointDictionary(dimension=op.dimension, tolerance=cfg.quant_error)
    checks: List[FrameCheck] = []
    prev_final: Optional[np.ndarray] = None
    for frame in frames:
        code = frame.checkpoint_code
        if isinstance(code, NewEntry):
            replica.entries.append(code.state)
            anchor = code.state
        else:
            anchor = replica.lookup(code.index)
        if prev_final is None:
            transition_dev, transition_ok = None, True
        else:
            recomputed = step(op, prev_final)
            if on_eval:
                on_eval(1)
            transition_dev = float(np.linalg.norm(anchor - recomputed))
            transition_ok = transition_dev <= cfg.tolerance.value(frame.checkpoint_time)
        endorsement = endorse_frame(frame, anchor, op, cfg, on_eval=on_eval)
        checks.append(FrameCheck(endorsement=endorsement,
                                 transition_deviation=transition_dev,
                                 transition_ok=transition_ok))
        prev_final = reported_states(anchor, frame.updates, q)[-1]
    return checks


def power_iteration_max_eig(matrix: np.ndarray, iterations: int = 50,
                            tolerance: float = 1e-9) -> float:
    """Dominant eigenvalue of a PSD matrix by plain power iteration."""
    d = matrix.shape[0]
    v = np.ones(d) / math.sqrt(d)
    eig = 0.0
    for _ in range(iterations):
        w = matrix @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        new_eig = float(v @ (matrix @ v))
        if abs(new_eig - eig) < tolerance:
            return new_eig
        eig = new_eig
    return eig


def randomized_endorse(report: np.ndarray, prev: np.ndarray, op,
                       rcfg: RandomizedConfig, draws: Sequence[RandomDraw],
                       on_eval=None) -> RandomizedEndorsement:
    """Validate one reported state against the mean of m fresh recomputations.

    Each endorser recomputes from the previous reported state with its own
    draw; the report is valid when it lies within the margin (closed) of the
    average. The covariance scale is taken from the configuration when given,
    otherwise estimated from the recomputations by power iteration.
    """
    if not op.stochastic:
        raise ValueError("randomized endorsement applies to stochastic operations")
    if len(draws) != rcfg.endorsers:
        raise ValueError(f"need exactly {rcfg.endorsers} draws")
    report = as_state(report, op.dimension)
    prev = as_state(prev, op.dimension)
    recomputations = np.stack([step(op, prev, theta) for theta in draws])
    if on_eval:
        on_eval(len(draws))
    mean = recomputations.mean(axis=0)
    deviation = float(np.linalg.norm(report - mean))
    if rcfg.covariance_max_eig is not None:
        lam = rcfg.covariance_max_eig
    elif len(draws) >= 2:
        centered = recomputations - mean
        cov = centered.T @ centered / (len(draws) - 1)
        lam = power_iteration_max_eig(cov)
    else:
        lam = 0.0
    return RandomizedEndorsement(valid=deviation <= rcfg.margin, deviation=deviation,
                                 mean_recomputation=mean, covariance_max_eig=lam,
                                 recompute_count=len(draws))


def _margin_gap(d: int, covariance_max_eig: float, margin: float,
                lipschitz: float, quant_error: float) -> float:
    if d < 1 or covariance_max_eig <= 0 or margin <= 0:
        raise ValueError("need d >= 1, covariance_max_eig > 0, margin > 0")
    if quant_error < 0 or lipschitz < 0:
        raise ValueError("quant_error and lipschitz must be nonnegative")
    gap = margin - (lipschitz + 1.0) * quant_error
    if gap <= 0:
        raise ValueError("quantization error must stay below margin / (L + 1)")
    return gap


def deviation_probability_bound(d: int, covariance_max_eig: float, margin: float,
                                lipschitz: float, quant_error: float, m: int) -> float:
    """Upper bound on the chance an honest report misses the randomized margin.

    Chebyshev-style bound for the deviation between one reported state and
    the average of m independent recomputations, clamped to [0, 1] for
    reporting.
    """
    gap = _margin_gap(d, covariance_max_eig, margin, lipschitz, quant_error)
    if m < 1:
        raise ValueError("m must be >= 1")
    raw = (2.0 * d * covariance_max_eig ** 2 / gap ** 2
           * (1.0 + 1.0 / (m * covariance_max_eig)) ** 2)
    return min(1.0, raw)


def required_endorsers(outlier_budget: float, d: int, margin: float,
                       lipschitz: float, quant_error: float,
                       covariance_max_eig: float) -> int:
    """Endorser count sufficient to hold honest invalidations under budget."""
    gap = _margin_gap(d, covariance_max_eig, margin, lipschitz, quant_error)
    if not 0 < outlier_budget < 1:
        raise ValueError("outlier budget must be in (0, 1)")
    if outlier_budget > 2.0 * d / gap ** 2:
        raise ValueError("budget exceeds the bound's stated range for this margin")
    bracket = math.sqrt(outlier_budget / (2.0 * d)) * gap - covariance_max_eig
    if bracket <= 0:
        raise InfeasibleEndorserCount(
            "recomputation spread too large: no finite endorser count certified")
    return math.ceil(1.0 / bracket)


class RepairAction(enum.Enum):
    SEND_REFINEMENT = "send_refinement"
    RECOMPUTE_AND_RESEND = "recompute_and_resend"


def handle_invalidation(notice: InvalidationNotice, cfg: ValidationConfig, *,
                        current_level: int, max_level: int, tail_length: int,
                        bits_per_update: int, dimension: int,
                        meta_bits: int = 256,
                        comp_bit_rate: float = 0.0) -> RepairAction:
    """Choose the cheaper repair for an invalidated state.

    Refinement is only on the table when the observed deviation is small
    enough to be explained by quantization at the update's current level and
    a finer level remains; otherwise the computation itself is suspect and
    the tail is recomputed and resent.
    """
    if tail_length < 1:
        raise ValueError("tail_length must cover at least the flagged state")
    eps_eff = cfg.quant_error / 2 ** current_level
    quant_explicable = notice.deviation <= (cfg.lipschitz + 1.0) * eps_eff
    refine_bits = refinement_bits_per_level(dimension) * tail_length + meta_bits
    recompute_bits = (bits_per_update * tail_length + meta_bits
                      + comp_bit_rate * tail_length)
    if quant_explicable and current_level < max_level and refine_bits < recompute_bits:
        return RepairAction.SEND_REFINEMENT
    return RepairAction.RECOMPUTE_AND_RESEND


@dataclass
class CommitResult:
    committed: List[int]
    appended: List["ledger_mod.Block"]
    conflicts: List[int]
    pending: List[int]


def orderer_commit(endorsements: Sequence[Endorsement],
                   frames: Mapping[int, Frame],
                   chain: "ledger_mod.AuditChain") -> CommitResult:
    """Commit unanimously endorsed frames to the chain, strictly in order.

    A valid frame with any uncommitted predecessor stays buffered; frames
    with conflicting endorsements are held and surfaced, never arbitrated.
    """
    by_frame: Dict[int, List[Endorsement]] = {}
    for e in endorsements:
        by_frame.setdefault(e.frame_index, []).append(e)
    conflicts = sorted(i for i, group in by_frame.items()
                       if any(e.valid for e in group) and any(not e.valid for e in group))
    unanimous = {i for i, group in by_frame.items() if all(e.valid for e in group)}

    committed: List[int] = []
    appended: List["ledger_mod.Block"] = []
    next_index = chain.next_frame_index
    while next_index in unanimous and next_index in frames:
        audits = ledger_mod.subsample_frame(frames[next_index], chain.subsample_period)
        appended.append(ledger_mod.append_block(chain, next_index, audits))
        committed.append(next_index)
        next_index += 1
    pending = sorted(i for i in unanimous if i >= next_index and i in frames)
    return CommitResult(committed=committed, appended=appended,
                        conflicts=conflicts, pending=pending)
